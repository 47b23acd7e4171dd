"""Synthetic stand-in for a surface-field benchmark with three imperfect experts.

Each sample is a randomly proportioned ellipsoidal body. Ground-truth pressure
is a sum of Gaussian bumps plus a long-wave term, ground-truth WSS is a
free-stream direction projected onto the tangent plane. Every synthetic
expert equals the truth plus a smooth random error field whose amplitude
depends on which third of the body (along x) a point lies in, so that expert
``i`` is accurate in region ``i`` and poor elsewhere under the default
profile.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, MoeError, UsageError
from .evaluator import EvalReport, evaluate
from .fields import (DatasetManifest, ExpertFieldSet, SurfaceSample, compute_norm_stats,
                     normalize_features, split_dataset, write_sample)
from . import gating
from .trainer import FitResult, TrainConfig, fit

log = logging.getLogger(__name__)

N_REGIONS = 3
COLLAPSE_THRESHOLD = 0.9


def complementary_profile(n_experts=3, good=0.02, bad=0.30):
    return [[good if r == e else bad for r in range(N_REGIONS)] for e in range(n_experts)]


def dominant_profile(n_experts=3, good=0.02, bad=0.30):
    """Expert 0 accurate everywhere, the others poor everywhere."""
    return [[good if e == 0 else bad] * N_REGIONS for e in range(n_experts)]


@dataclass
class SynthSpec:
    n_samples: int = 40
    n_test: int = 8
    n_pts: int = 2000
    seed: int = 7
    train_frac: float = 0.8
    experts: list = field(default_factory=lambda: ["e1", "e2", "e3"])
    # amplitude[expert][region], as a fraction of the field's RMS over the sample
    p_noise: list = field(default_factory=complementary_profile)
    wss_noise: list = field(default_factory=complementary_profile)
    noise_modes: int = 6
    noise_wavenumber: float = 2.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_samples < 2:
            raise UsageError("n_samples must be >= 2")
        if self.n_test < 0 or self.n_pts < N_REGIONS:
            raise UsageError("n_test must be >= 0 and n_pts >= 3")
        for name, prof in (("p_noise", self.p_noise), ("wss_noise", self.wss_noise)):
            if len(prof) != len(self.experts) or any(len(r) != N_REGIONS for r in prof):
                raise UsageError(f"{name} must be a {len(self.experts)} x {N_REGIONS} table")
            if any(a < 0 for row in prof for a in row):
                raise UsageError(f"{name} amplitudes must be >= 0")

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown synth spec keys: {', '.join(unknown)}")
        return cls(**raw)

    def replace(self, **changes) -> "SynthSpec":
        return SynthSpec.from_dict({**asdict(self), **changes})


# ------------------------------------------------------------------ geometry

def body_points(rng, n_pts):
    """Points, unit normals and semi-axes of a random elongated ellipsoid.

    x is sampled uniformly (away from the tips) so the three x-thirds hold
    equal point counts.
    """
    a = rng.uniform(1.4, 1.6)
    b = rng.uniform(0.65, 0.75)
    c = rng.uniform(0.55, 0.65)
    x = rng.uniform(-0.97 * a, 0.97 * a, n_pts)
    theta = rng.uniform(0.0, 2.0 * np.pi, n_pts)
    r = np.sqrt(1.0 - (x / a) ** 2)
    pts = np.column_stack([x, b * r * np.cos(theta), c * r * np.sin(theta)])
    grad = pts / np.array([a * a, b * b, c * c])
    normals = grad / np.linalg.norm(grad, axis=1, keepdims=True)
    return pts, normals, (a, b, c)


def region_index(points, half_length):
    """0, 1, 2 for the rear-to-front x-thirds of a body spanning [-a, a]."""
    third = 2.0 * half_length / N_REGIONS
    return np.clip(((points[:, 0] + half_length) // third).astype(int), 0, N_REGIONS - 1)


def truth_fields(rng, pts, normals, axes):
    a, b, c = axes
    p = np.zeros(len(pts))
    centres = [(-a, 0.0, 0.0), (rng.uniform(-0.3, 0.3) * a, 0.0, c), (0.8 * a, 0.0, -0.5 * c)]
    amps = [rng.uniform(0.8, 1.2), -rng.uniform(0.6, 1.0), rng.uniform(0.3, 0.6)]
    widths = [rng.uniform(0.4, 0.6), rng.uniform(0.5, 0.8), rng.uniform(0.3, 0.5)]
    for ctr, amp, w in zip(centres, amps, widths):
        d2 = ((pts - np.array(ctr)) ** 2).sum(axis=1)
        p += amp * np.exp(-d2 / (2 * w * w))
    p += 0.3 * np.sin(rng.uniform(1.0, 2.0) * pts[:, 0] + rng.uniform(0, 2 * np.pi))

    flow = np.array([1.0, rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)])
    tangential = flow - (normals @ flow)[:, None] * normals
    magnitude = 1.0 + 0.4 * np.sin(rng.uniform(1.0, 3.0) * pts[:, 0] + rng.uniform(0, 2 * np.pi))
    wss = -0.1 * magnitude[:, None] * tangential
    wss[:, 2] += 0.05 * np.cos(2.0 * pts[:, 1] / b)
    return p, wss


def smooth_field(rng, pts, n_modes, wavenumber):
    """Random sum of low-wavenumber cosines, scaled to unit RMS over ``pts``."""
    k = rng.normal(size=(n_modes, 3))
    k *= wavenumber / np.linalg.norm(k, axis=1, keepdims=True) * rng.uniform(0.5, 1.0, (n_modes, 1))
    phase = rng.uniform(0.0, 2 * np.pi, n_modes)
    coef = rng.normal(size=n_modes)
    f = np.cos(pts @ k.T + phase) @ coef
    rms = np.sqrt(np.mean(f * f))
    return f / rms if rms > 0 else f


def error_field(rng, pts, region, n_modes, wavenumber):
    """Sign-definite smooth error: a random sign per region times ``1 + g/2``, ``|g| <= 1``.

    Keeping each region's error away from zero is what makes the accurate
    expert pointwise best almost everywhere in its region; a zero-mean field
    would hand the win to a poor expert near every one of its zero crossings.
    """
    g = smooth_field(rng, pts, n_modes, wavenumber)
    peak = np.abs(g).max()
    if peak > 0:
        g = g / peak
    sign = rng.choice([-1.0, 1.0], size=N_REGIONS)
    return sign[region] * (1.0 + 0.5 * g)


def _rms(v):
    return float(np.sqrt(np.mean(np.square(v))))


def make_sample(spec: SynthSpec, sample_seed, sample_id: str) -> SurfaceSample:
    rng = np.random.default_rng(sample_seed)
    pts, normals, axes = body_points(rng, spec.n_pts)
    p, wss = truth_fields(rng, pts, normals, axes)
    region = region_index(pts, axes[0])
    p_amp = np.asarray(spec.p_noise, dtype=float)
    w_amp = np.asarray(spec.wss_noise, dtype=float)
    p_scale = _rms(p)
    w_scale = [_rms(wss[:, k]) for k in range(3)]
    preds = {}
    for e, name in enumerate(spec.experts):
        pe = p + p_amp[e][region] * p_scale * error_field(rng, pts, region, spec.noise_modes,
                                                           spec.noise_wavenumber)
        we = wss.copy()
        for k in range(3):
            we[:, k] += (w_amp[e][region] * w_scale[k]
                         * error_field(rng, pts, region, spec.noise_modes, spec.noise_wavenumber))
        preds[name] = ExpertFieldSet(pe, we)
    return SurfaceSample(sample_id, pts, normals, p, wss, preds)


def sample_regions(sample: SurfaceSample) -> np.ndarray:
    """Recover region labels from a generated sample (its x extent is the body length)."""
    x = sample.points[:, 0]
    a = max(-x.min(), x.max()) / 0.97
    return region_index(sample.points, a)


def generate_samples(spec: SynthSpec):
    pool = [make_sample(spec, [spec.seed, 0, i], f"sample_{i:03d}") for i in range(spec.n_samples)]
    tests = [make_sample(spec, [spec.seed, 1, i], f"test_{i:03d}") for i in range(spec.n_test)]
    return pool, tests


def duplicate_expert(samples, source: str, target: str):
    """Replace ``target``'s predictions by a copy of ``source``'s in every sample."""
    out = []
    for s in samples:
        preds = dict(s.expert_preds)
        preds[target] = preds[source]
        out.append(s.replace_experts(preds))
    return out


def write_dataset(pool, tests, out_dir, experts, train_frac: float, seed: int) -> DatasetManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in pool:
        write_sample(s, out / f"{s.sample_id}.csv")
        entries.append((f"{s.sample_id}.csv", "train"))
    if tests:
        (out / "test").mkdir(exist_ok=True)
    for s in tests:
        write_sample(s, out / "test" / f"{s.sample_id}.csv")
        entries.append((f"test/{s.sample_id}.csv", "test"))
    manifest = split_dataset(DatasetManifest(list(experts), entries, seed, out), train_frac, seed)
    manifest.save(out / "manifest.json")
    train = manifest.load("train")
    compute_norm_stats(train).save(out / "norm_stats.json")
    return manifest


def generate_dataset(spec: SynthSpec, out_dir) -> DatasetManifest:
    pool, tests = generate_samples(spec)
    return write_dataset(pool, tests, out_dir, spec.experts, spec.train_frac, spec.seed)


# ------------------------------------------------------------------ ablations

@dataclass
class AblationResult:
    label: str
    dataset: str
    lambda_entropy: float
    entropy_mode: str
    entropy_pressure: float
    entropy_shear: float
    mean_weights_pressure: dict
    mean_weights_shear: dict
    region_weights_pressure: list
    region_weights_shear: list
    dup_gap_pressure: float | None
    dup_gap_shear: float | None
    collapse: bool
    errors: dict
    epoch_entropy: list
    error: str | None = None

    def dominant(self, head: str = "pressure") -> tuple[str, float]:
        w = self.mean_weights_pressure if head == "pressure" else self.mean_weights_shear
        name = max(w, key=w.get)
        return name, w[name]


def gate_statistics(fit_result: FitResult, samples, dup_pair=None) -> dict:
    """Weight and entropy statistics of the trained gate over ``samples``."""
    cfg = fit_result.config
    experts = fit_result.experts
    per_head = {}
    for kind, head in (("pressure", fit_result.pressure_head), ("shear", fit_result.shear_head)):
        ws, regions = [], []
        for s in samples:
            out = gating.forward(head, normalize_features(s, fit_result.stats, cfg.use_normals))
            ws.append(out.weights)
            regions.append(sample_regions(s))
        w = np.concatenate(ws)
        reg = np.concatenate(regions)
        h = -(w * np.log(w + 1e-12)).sum(axis=1)
        info = {
            "entropy": float(h.mean()),
            "mean_weights": {e: float(w[:, i].mean()) for i, e in enumerate(experts)},
            "region_weights": [[float(w[reg == r, i].mean()) if (reg == r).any() else float("nan")
                                for i in range(len(experts))] for r in range(N_REGIONS)],
            "dup_gap": None,
        }
        if dup_pair is not None:
            i, j = (experts.index(e) for e in dup_pair)
            info["dup_gap"] = float(np.abs(w[:, i] - w[:, j]).mean())
        per_head[kind] = info
    return per_head


def _summarize(label, dataset, fit_result, samples, report: EvalReport, dup_pair=None):
    g = gate_statistics(fit_result, samples, dup_pair)
    collapse = any(max(g[k]["mean_weights"].values()) > COLLAPSE_THRESHOLD for k in g)
    cfg = fit_result.config
    return AblationResult(
        label=label, dataset=dataset, lambda_entropy=cfg.lambda_entropy,
        entropy_mode=cfg.entropy_mode,
        entropy_pressure=g["pressure"]["entropy"], entropy_shear=g["shear"]["entropy"],
        mean_weights_pressure=g["pressure"]["mean_weights"],
        mean_weights_shear=g["shear"]["mean_weights"],
        region_weights_pressure=g["pressure"]["region_weights"],
        region_weights_shear=g["shear"]["region_weights"],
        dup_gap_pressure=g["pressure"]["dup_gap"], dup_gap_shear=g["shear"]["dup_gap"],
        collapse=collapse, errors=report.errors,
        epoch_entropy=[list(e) for e in fit_result.epoch_entropy()],
    )


# label -> (dataset, lambda override or None for base, entropy mode, duplicated pair)
ABLATION_RUNS = {
    "regularized": ("complementary", None, "maximize", None),
    "no_reg": ("dominant", 0.0, "maximize", None),
    "regularized_dominant": ("dominant", None, "maximize", None),
    "dup_expert_no_reg": ("duplicated", 0.0, "maximize", ("e1", "e3")),
    "dup_expert_reg": ("duplicated", None, "maximize", ("e1", "e3")),
    "min_entropy": ("dominant", None, "minimize", None),
}


def ablation_datasets(spec: SynthSpec, out_dir) -> dict[str, DatasetManifest]:
    out = Path(out_dir)
    pool, tests = generate_samples(spec)
    first, last = spec.experts[0], spec.experts[-1]
    dom_spec = spec.replace(p_noise=dominant_profile(len(spec.experts)),
                            wss_noise=dominant_profile(len(spec.experts)))
    dpool, dtests = generate_samples(dom_spec)
    sets = {
        "complementary": (pool, tests),
        "dominant": (dpool, dtests),
        "duplicated": (duplicate_expert(pool, first, last), duplicate_expert(tests, first, last)),
    }
    return {name: write_dataset(p, t, out / "data" / name, spec.experts, spec.train_frac, spec.seed)
            for name, (p, t) in sets.items()}


def run_ablation_suite(spec: SynthSpec, base: TrainConfig, out_dir, labels=None) -> list[AblationResult]:
    """Train and evaluate every labelled run; a failing run is recorded, not raised."""
    out = Path(out_dir)
    manifests = ablation_datasets(spec, out)
    results = []
    for label, (dataset, lam, mode, dup) in ABLATION_RUNS.items():
        if labels is not None and label not in labels:
            continue
        cfg = base.replace(entropy_mode=mode,
                           lambda_entropy=base.lambda_entropy if lam is None else lam)
        if dup is not None:
            dup = (spec.experts[0], spec.experts[-1])
        run_dir = out / "runs" / label
        log.info("ablation run %s on %s data", label, dataset)
        manifest = manifests[dataset]
        try:
            res = fit(manifest, cfg, run_dir)
            test = manifest.load("test") or manifest.load("val")
            report, _ = evaluate(res.pressure_head, res.shear_head, res.stats, test,
                                 cfg.use_normals, res.experts)
            (run_dir / "report.txt").write_text(report.to_text())
            (run_dir / "report.csv").write_text(report.to_csv())
            results.append(_summarize(label, dataset, res, test, report, dup))
        except MoeError as exc:
            log.error("ablation run %s failed: %s", label, exc)
            results.append(AblationResult(label, dataset, cfg.lambda_entropy, mode, float("nan"),
                                          float("nan"), {}, {}, [], [], None, None, False, {}, [],
                                          error=str(exc)))
    return results


SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["spec", "config", "runs"],
    "properties": {
        "spec": {"type": "object"},
        "config": {"type": "object"},
        "runs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["label", "dataset", "lambda_entropy", "entropy_mode",
                             "entropy_pressure", "entropy_shear", "mean_weights_pressure",
                             "mean_weights_shear", "collapse", "errors"],
                "properties": {
                    "label": {"type": "string"},
                    "dataset": {"enum": ["complementary", "dominant", "duplicated"]},
                    "lambda_entropy": {"type": "number", "minimum": 0},
                    "entropy_mode": {"enum": ["maximize", "minimize", "none"]},
                    "entropy_pressure": {"type": ["number", "null"]},
                    "entropy_shear": {"type": ["number", "null"]},
                    "mean_weights_pressure": {"type": "object",
                                              "additionalProperties": {"type": "number"}},
                    "mean_weights_shear": {"type": "object",
                                           "additionalProperties": {"type": "number"}},
                    "collapse": {"type": "boolean"},
                    "errors": {"type": "object"},
                    "error": {"type": ["string", "null"]},
                },
            },
        },
    },
}


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    return v


def summary_dict(spec: SynthSpec, base: TrainConfig, results) -> dict:
    return _json_safe({"spec": asdict(spec), "config": asdict(base),
                       "runs": [asdict(r) for r in results]})


def summary_text(results) -> str:
    lines = [f"{'run':<22}{'data':<15}{'H_p':>8}{'H_s':>8}{'top expert (p)':>18}{'collapse':>10}"]
    for r in results:
        if r.error:
            lines.append(f"{r.label:<22}{r.dataset:<15}  FAILED: {r.error}")
            continue
        name, w = r.dominant("pressure")
        lines.append(f"{r.label:<22}{r.dataset:<15}{r.entropy_pressure:>8.3f}{r.entropy_shear:>8.3f}"
                     f"{name + f' {w:.3f}':>18}{str(r.collapse):>10}")
    return "\n".join(lines) + "\n"


def write_summary(spec, base, results, out_dir) -> dict:
    out = Path(out_dir)
    body = summary_dict(spec, base, results)
    (out / "summary.json").write_text(json.dumps(body, indent=2) + "\n")
    (out / "summary.txt").write_text(summary_text(results))
    return body
