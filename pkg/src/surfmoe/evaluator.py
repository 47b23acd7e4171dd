"""Inference with pointwise gate weights, L-2 relative errors and comparison reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gating
from .errors import ConfigError, DataError, FormatError, UsageError
from .fields import SurfaceSample, normalize_features, truth_scale
from .objective import blend_pressure, blend_shear

QUANTITIES = ("P", "WSS_x", "WSS_y", "WSS_z")
MOE = "MoE"


def l2_relative_error(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise UsageError(f"shape mismatch {pred.shape} vs {truth.shape}")
    den = math.sqrt(float(np.dot(truth, truth)))
    if den == 0.0:
        raise DataError("L-2 relative error undefined: ground truth is identically zero")
    diff = pred - truth
    return math.sqrt(float(np.dot(diff, diff))) / den


@dataclass
class InferenceOutput:
    sample_id: str
    p: np.ndarray                 # (N,) physical units
    wss: np.ndarray               # (N, 3)
    weights_p: np.ndarray         # (N, E)
    weights_s: np.ndarray         # (N, E)
    experts: list
    bias_p: np.ndarray | None = None
    bias_s: np.ndarray | None = None


def _one_hot(n, experts, name):
    if name not in experts:
        raise ConfigError(f"cannot force unknown expert {name!r}; experts are {list(experts)}")
    w = np.zeros((n, len(experts)))
    w[:, list(experts).index(name)] = 1.0
    return w


def infer_sample(pressure_head: gating.GatingHead, shear_head: gating.GatingHead, stats,
                 sample: SurfaceSample, use_normals: bool = True, experts=None,
                 force_expert: str | None = None) -> InferenceOutput:
    """Blend one sample's expert fields with the trained gate.

    The blend is computed directly on physical expert fields; since the
    weights sum to one this equals de-normalizing the normalized-space blend,
    and it makes a one-hot gate an exact passthrough. ``force_expert`` pins the
    weights of both heads to that expert.
    """
    names = list(sample.expert_names)
    if experts is not None and list(experts) != names:
        raise ConfigError(f"sample {sample.sample_id!r} expert order {names} does not match "
                          f"checkpoint order {list(experts)}")
    (pm, ps), (wm, ws) = truth_scale(stats)
    feats = normalize_features(sample, stats, use_normals)
    p_out = gating.forward(pressure_head, feats)
    s_out = gating.forward(shear_head, feats)
    wp, wsh = p_out.weights, s_out.weights
    if force_expert is not None:
        wp = _one_hot(sample.n_pts, names, force_expert)
        wsh = wp.copy()
    ep = np.column_stack([ex.p_pred for ex in sample.expert_preds.values()])
    ew = np.stack([ex.wss_pred for ex in sample.expert_preds.values()], axis=1)
    bias_p = bias_s = None
    p = blend_pressure(wp, ep)
    wss = blend_shear(wsh, ew)
    if pressure_head.bias_correction and force_expert is None:
        bias_p = p_out.bias_correction * ps
        p = p + bias_p
    if shear_head.bias_correction and force_expert is None:
        bias_s = s_out.bias_correction * ws
        wss = wss + bias_s
    return InferenceOutput(sample.sample_id, p, wss, wp, wsh, names, bias_p, bias_s)


def sample_errors(sample: SurfaceSample, p, wss) -> dict[str, float]:
    out = {"P": l2_relative_error(p, sample.p_true)}
    for i, q in enumerate(QUANTITIES[1:]):
        out[q] = l2_relative_error(wss[:, i], sample.wss_true[:, i])
    return out


@dataclass
class EvalReport:
    models: list                    # MoE first, then experts in manifest order
    errors: dict                    # model -> quantity -> mean L-2 error
    per_sample: list = field(default_factory=list)  # (sample_id, model, quantity, error)

    def table(self) -> np.ndarray:
        return np.array([[self.errors[m][q] for q in QUANTITIES] for m in self.models])

    def best_expert(self, quantity: str) -> tuple[str, float]:
        experts = [m for m in self.models if m != MOE]
        best = min(experts, key=lambda m: self.errors[m][quantity])
        return best, self.errors[best][quantity]

    def to_text(self) -> str:
        width = max(len(m) for m in self.models) + 2
        head = "Model".ljust(width) + "".join(f"{q + ' L-2':>14}" for q in QUANTITIES)
        lines = [head, "-" * len(head)]
        for m in self.models:
            lines.append(m.ljust(width) + "".join(f"{self.errors[m][q]:>14.4f}" for q in QUANTITIES))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "quantity", "l2_error"])
        for m in self.models:
            for q in QUANTITIES:
                w.writerow([m, q, "%.17g" % self.errors[m][q]])
        return buf.getvalue()

    def per_sample_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "model", "quantity", "l2_error"])
        for sid, m, q, e in self.per_sample:
            w.writerow([sid, m, q, "%.17g" % e])
        return buf.getvalue()


def read_report_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(rows[0]) != {"model", "quantity", "l2_error"}:
        raise FormatError(f"{path}: not an evaluation report")
    out = {}
    for r in rows:
        out.setdefault(r["model"], {})[r["quantity"]] = float(r["l2_error"])
    return out


def evaluate(pressure_head, shear_head, stats, test_samples, use_normals: bool = True,
             experts=None) -> tuple[EvalReport, list[InferenceOutput]]:
    test_samples = list(test_samples)
    if not test_samples:
        raise UsageError("evaluation needs at least one test sample")
    names = list(experts) if experts is not None else list(test_samples[0].expert_names)
    models = [MOE] + names
    per_sample = []
    outputs = []
    acc = {m: {q: [] for q in QUANTITIES} for m in models}
    for s in test_samples:
        inf = infer_sample(pressure_head, shear_head, stats, s, use_normals, names)
        outputs.append(inf)
        rows = {MOE: sample_errors(s, inf.p, inf.wss)}
        for e in names:
            ex = s.expert_preds[e]
            rows[e] = sample_errors(s, ex.p_pred, ex.wss_pred)
        for m in models:
            for q in QUANTITIES:
                acc[m][q].append(rows[m][q])
                per_sample.append((s.sample_id, m, q, rows[m][q]))
    errors = {m: {q: math.fsum(v) / len(v) for q, v in acc[m].items()} for m in models}
    return EvalReport(models, errors, per_sample), outputs


# ---------------------------------------------------------------- VTK export

def vtk_arrays(inference: InferenceOutput) -> dict[str, np.ndarray]:
    arrays = {"p_moe": inference.p}
    for i, a in enumerate("xyz"):
        arrays[f"wss_moe_{a}"] = inference.wss[:, i]
    for k, e in enumerate(inference.experts):
        arrays[f"weight_p_{e}"] = inference.weights_p[:, k]
    for k, e in enumerate(inference.experts):
        arrays[f"weight_s_{e}"] = inference.weights_s[:, k]
    if inference.bias_p is not None:
        arrays["bias_p"] = inference.bias_p
    if inference.bias_s is not None:
        for i, a in enumerate("xyz"):
            arrays[f"bias_s_{a}"] = inference.bias_s[:, i]
    return arrays


def export_vtk_polydata(sample: SurfaceSample, inference: InferenceOutput, path) -> None:
    """Legacy ASCII VTK polydata: points as vertices plus one scalar array per field."""
    n = sample.n_pts
    if len(inference.p) != n:
        raise UsageError("inference output does not match sample size")
    lines = ["# vtk DataFile Version 3.0", f"surfmoe {sample.sample_id}", "ASCII",
             "DATASET POLYDATA", f"POINTS {n} double"]
    lines.extend("%.17g %.17g %.17g" % tuple(p) for p in sample.points)
    lines.append(f"VERTICES {n} {2 * n}")
    lines.extend(f"1 {i}" for i in range(n))
    lines.append(f"POINT_DATA {n}")
    for name, arr in vtk_arrays(inference).items():
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend("%.17g" % v for v in arr)
    Path(path).write_text("\n".join(lines) + "\n")


def read_vtk_polydata(path) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Minimal reader for files written by :func:`export_vtk_polydata`."""
    tokens = Path(path).read_text().split("\n")
    if not tokens or not tokens[0].startswith("# vtk DataFile"):
        raise FormatError(f"{path}: not a legacy VTK file")
    it = iter(tokens[1:])
    points = None
    arrays = {}
    n_data = None
    try:
        for line in it:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "POINTS":
                n = int(parts[1])
                points = np.array([[float(v) for v in next(it).split()] for _ in range(n)])
            elif parts[0] == "VERTICES":
                for _ in range(int(parts[1])):
                    next(it)
            elif parts[0] == "POINT_DATA":
                n_data = int(parts[1])
            elif parts[0] == "SCALARS":
                name = parts[1]
                next(it)  # LOOKUP_TABLE
                arrays[name] = np.array([float(next(it)) for _ in range(n_data)])
    except (StopIteration, ValueError, TypeError) as exc:
        raise FormatError(f"{path}: truncated or malformed VTK ({exc})") from None
    if points is None or n_data != len(points):
        raise FormatError(f"{path}: POINTS and POINT_DATA counts disagree")
    return points, arrays


def write_inference_csv(inference: InferenceOutput, path) -> None:
    arrays = vtk_arrays(inference)
    names = list(arrays)
    table = np.column_stack([arrays[k] for k in names])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(names) + "\n")
        np.savetxt(fh, table, fmt="%.17g", delimiter=",")
