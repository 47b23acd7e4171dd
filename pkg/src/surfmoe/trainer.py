"""Training loop: one optimizer step per sample point cloud, cosine-annealed LR."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import gating
from .errors import ConfigError, NumericError, UsageError
from .fields import (DatasetManifest, NormalizationStats, blend_targets, compute_norm_stats,
                     feature_width, normalize_features)
from .objective import ENTROPY_MODES, LossBreakdown, objective

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "momentum", "adam")
METRIC_COLUMNS = ("epoch", "step", "lr", "loss_pressure", "loss_shear", "entropy_pressure",
                  "entropy_shear", "total_loss", "val_loss_pressure", "val_loss_shear")
CHECKPOINT_FILES = ("pressure_head.json", "shear_head.json", "norm_stats.json",
                    "config.json", "metrics.csv")
INCOMPLETE_MARKER = "INCOMPLETE"
STATE_FILE = "train_state.npz"


@dataclass
class TrainConfig:
    num_epochs: int = 10
    start_lr: float = 1e-3
    end_lr: float = 5e-6
    lambda_entropy: float = 0.01
    entropy_mode: str = "maximize"
    use_normals: bool = True
    bias_correction: bool = False
    seed: int = 0
    train_frac: float = 0.8
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    grad_clip: float | None = 10.0
    hidden_width: int = gating.HIDDEN_WIDTH
    hidden_layers: int = gating.HIDDEN_LAYERS

    def __post_init__(self):
        self.validate()

    def validate(self):
        if int(self.num_epochs) < 1:
            raise ConfigError(f"num_epochs must be >= 1, got {self.num_epochs}")
        if not (self.start_lr > 0 and self.end_lr > 0):
            raise ConfigError("learning rates must be positive")
        if self.end_lr > self.start_lr:
            raise ConfigError(f"end_lr {self.end_lr} exceeds start_lr {self.start_lr}")
        if self.lambda_entropy < 0:
            raise ConfigError(f"lambda_entropy must be >= 0, got {self.lambda_entropy}")
        if self.entropy_mode not in ENTROPY_MODES:
            raise ConfigError(f"entropy_mode must be one of {ENTROPY_MODES}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if not 0.0 < self.train_frac < 1.0:
            raise ConfigError(f"train_frac must lie in (0, 1), got {self.train_frac}")
        if self.hidden_width < 1 or self.hidden_layers < 1:
            raise ConfigError("hidden_width and hidden_layers must be positive")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        return cls.from_dict(raw)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig.from_dict({**asdict(self), **changes})

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def cosine_lr(step: int, total_steps: int, start_lr: float = 1e-3, end_lr: float = 5e-6) -> float:
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise UsageError(f"step {step} outside [0, {total_steps}]")
    if step == 0:
        return start_lr
    if step == total_steps:
        return end_lr
    return end_lr + 0.5 * (start_lr - end_lr) * (1.0 + math.cos(math.pi * step / total_steps))


# ------------------------------------------------------------------ optimizers

class Optimizer:
    """Updates a list of parameter arrays in place."""

    def __init__(self, params, config: TrainConfig):
        self.config = config
        self.t = 0
        self.slots = {k: [np.zeros_like(p) for p in params] for k in self.slot_names}

    slot_names: tuple = ()

    def step(self, params, grads, lr):
        self.t += 1
        self._update(params, grads, lr)

    def state(self) -> dict:
        out = {"t": np.array(self.t)}
        for k, arrs in self.slots.items():
            for i, a in enumerate(arrs):
                out[f"{k}{i}"] = a
        return out

    def load_state(self, state: dict):
        self.t = int(state["t"])
        for k, arrs in self.slots.items():
            for i in range(len(arrs)):
                arrs[i] = np.array(state[f"{k}{i}"], dtype=np.float64)


class SGD(Optimizer):
    def _update(self, params, grads, lr):
        for p, g in zip(params, grads):
            p -= lr * g


class Momentum(Optimizer):
    slot_names = ("v",)

    def _update(self, params, grads, lr):
        beta = self.config.momentum
        for p, g, v in zip(params, grads, self.slots["v"]):
            v *= beta
            v += g
            p -= lr * v


class Adam(Optimizer):
    slot_names = ("m", "v")

    def _update(self, params, grads, lr):
        b1, b2, eps = self.config.beta1, self.config.beta2, self.config.adam_eps
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.slots["m"], self.slots["v"]):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def make_optimizer(params, config: TrainConfig) -> Optimizer:
    return {"sgd": SGD, "momentum": Momentum, "adam": Adam}[config.optimizer](params, config)


def clip_by_global_norm(grads, max_norm):
    if not max_norm:
        return grads
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads]
    return grads


# ------------------------------------------------------------------- training

@dataclass
class Prepared:
    sample_id: str
    features: np.ndarray
    targets: object


def prepare(samples, stats: NormalizationStats, use_normals: bool) -> list[Prepared]:
    return [Prepared(s.sample_id, normalize_features(s, stats, use_normals), blend_targets(s, stats))
            for s in samples]


@dataclass
class TrainState:
    step: int
    total_steps: int
    pressure_head: gating.GatingHead
    shear_head: gating.GatingHead
    pressure_opt: Optimizer
    shear_opt: Optimizer
    metrics: list = field(default_factory=list)

    def save(self, path) -> None:
        arrays = {"step": np.array(self.step), "total_steps": np.array(self.total_steps),
                  "metrics": np.array(json.dumps(self.metrics))}
        for tag, head, opt in (("p", self.pressure_head, self.pressure_opt),
                               ("s", self.shear_head, self.shear_opt)):
            for i, a in enumerate(head.params()):
                arrays[f"{tag}_param{i}"] = a
            for k, a in opt.state().items():
                arrays[f"{tag}_opt_{k}"] = a
        tmp = Path(str(path) + ".tmp.npz")
        np.savez(tmp, **arrays)
        os.replace(tmp, path)

    def load(self, path) -> None:
        with np.load(path) as data:
            self.step = int(data["step"])
            if int(data["total_steps"]) != self.total_steps:
                raise ConfigError("saved training state was made with a different step budget")
            self.metrics = json.loads(str(data["metrics"]))
            for tag, head, opt in (("p", self.pressure_head, self.pressure_opt),
                                   ("s", self.shear_head, self.shear_opt)):
                for i, a in enumerate(head.params()):
                    a[...] = data[f"{tag}_param{i}"]
                prefix = f"{tag}_opt_"
                opt.load_state({k[len(prefix):]: data[k] for k in data.files if k.startswith(prefix)})


def init_state(config: TrainConfig, n_experts: int, total_steps: int) -> TrainState:
    d_in = feature_width(n_experts, config.use_normals)
    hidden = (config.hidden_width,) * config.hidden_layers
    heads = []
    for k, kind in enumerate(gating.HEAD_KINDS):
        dims = gating.default_dims(d_in, n_experts, kind, config.bias_correction, hidden)
        heads.append(gating.init_head(dims, [config.seed, k], config.bias_correction, kind))
    p_head, s_head = heads
    return TrainState(0, total_steps, p_head, s_head,
                      make_optimizer(p_head.params(), config),
                      make_optimizer(s_head.params(), config))


def _flat(grads):
    out = []
    for dw, db in grads:
        out.extend((dw, db))
    return out


def train_step(state: TrainState, item: Prepared, config: TrainConfig, lr: float) -> LossBreakdown:
    p_out, p_cache = gating.forward(state.pressure_head, item.features, return_cache=True)
    s_out, s_cache = gating.forward(state.shear_head, item.features, return_cache=True)
    breakdown, g = objective(p_out, s_out, item.targets, config.lambda_entropy, config.entropy_mode)
    if not math.isfinite(breakdown.total):
        raise NumericError(f"non-finite loss on sample {item.sample_id!r} at step {state.step}")
    p_grads, _ = gating.backward(state.pressure_head, item.features, g.pressure_weights,
                                 g.pressure_bias, p_cache)
    s_grads, _ = gating.backward(state.shear_head, item.features, g.shear_weights,
                                 g.shear_bias, s_cache)
    state.pressure_opt.step(state.pressure_head.params(),
                            clip_by_global_norm(_flat(p_grads), config.grad_clip), lr)
    state.shear_opt.step(state.shear_head.params(),
                         clip_by_global_norm(_flat(s_grads), config.grad_clip), lr)
    return breakdown


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def validation_losses(state: TrainState, items, config: TrainConfig):
    if not items:
        return None, None
    lp, ls = [], []
    for item in items:
        p_out = gating.forward(state.pressure_head, item.features)
        s_out = gating.forward(state.shear_head, item.features)
        b, _ = objective(p_out, s_out, item.targets, config.lambda_entropy, config.entropy_mode)
        lp.append(b.loss_pressure)
        ls.append(b.loss_shear)
    return math.fsum(lp) / len(lp), math.fsum(ls) / len(ls)


def train_epoch(state: TrainState, train_items, config: TrainConfig, epoch: int,
                val_items=(), stop_at_step: int | None = None) -> list[LossBreakdown]:
    """Run (the rest of) one epoch; appends a metrics row per optimizer step."""
    n = len(train_items)
    order = epoch_order(config.seed, epoch, n)
    start = state.step - epoch * n
    logged = []
    for pos in range(start, n):
        if stop_at_step is not None and state.step >= stop_at_step:
            return logged
        lr = cosine_lr(state.step, state.total_steps, config.start_lr, config.end_lr)
        item = train_items[order[pos]]
        b = train_step(state, item, config, lr)
        logged.append(b)
        state.step += 1
        row = {"epoch": epoch, "step": state.step, "lr": lr,
               "loss_pressure": b.loss_pressure, "loss_shear": b.loss_shear,
               "entropy_pressure": b.entropy_pressure, "entropy_shear": b.entropy_shear,
               "total_loss": b.total, "val_loss_pressure": None, "val_loss_shear": None}
        if pos == n - 1:
            row["val_loss_pressure"], row["val_loss_shear"] = validation_losses(state, val_items, config)
        state.metrics.append(row)
    return logged


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        out = []
        for c in METRIC_COLUMNS:
            v = r[c]
            if v is None:
                out.append("")
            elif isinstance(v, float):
                out.append("%.17g" % v)
            else:
                out.append(str(v))
        w.writerow(out)
    return buf.getvalue()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            r[k] = None if v == "" else (int(v) if k in ("epoch", "step") else float(v))
    return rows


@dataclass
class FitResult:
    pressure_head: gating.GatingHead
    shear_head: gating.GatingHead
    stats: NormalizationStats
    experts: list
    metrics: list
    config: TrainConfig
    out_dir: Path | None = None
    complete: bool = True

    def epoch_entropy(self) -> list[tuple[float, float]]:
        """Per epoch, mean logged (pressure, shear) gate entropy."""
        per = {}
        for r in self.metrics:
            per.setdefault(r["epoch"], []).append((r["entropy_pressure"], r["entropy_shear"]))
        return [tuple(float(np.mean(col)) for col in zip(*per[e])) for e in sorted(per)]


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_checkpoint(out_dir, result: FitResult) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ref = result.stats.digest()
    gating.save_head(result.pressure_head, out / "pressure_head.json", ref, result.experts)
    gating.save_head(result.shear_head, out / "shear_head.json", ref, result.experts)
    _atomic_write(out / "norm_stats.json", result.stats.to_json())
    _atomic_write(out / "config.json", result.config.to_json())
    _atomic_write(out / "metrics.csv", metrics_csv(result.metrics))


def fit(manifest: DatasetManifest, config: TrainConfig, out_dir=None, resume: bool = False,
        stop_at_step: int | None = None) -> FitResult:
    """Train both gating heads on the manifest's train split.

    With ``out_dir`` set, checkpoint files are written there; a run halted by
    ``stop_at_step`` leaves an ``INCOMPLETE`` marker and a resumable
    ``train_state.npz``, and ``resume=True`` picks it up.
    """
    train = manifest.load("train")
    if not train:
        raise UsageError("manifest has no training samples")
    val = manifest.load("val")
    stats = compute_norm_stats(train)
    train_items = prepare(train, stats, config.use_normals)
    val_items = prepare(val, stats, config.use_normals)
    n = len(train_items)
    total = config.num_epochs * n
    state = init_state(config, len(manifest.experts), total)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume:
            if not (out / STATE_FILE).exists():
                raise ConfigError(f"nothing to resume in {out}")
            state.load(out / STATE_FILE)
            log.info("resuming at step %d/%d", state.step, total)
        (out / INCOMPLETE_MARKER).write_text("training in progress\n")

    for epoch in range(state.step // n if n else 0, config.num_epochs):
        train_epoch(state, train_items, config, epoch, val_items, stop_at_step)
        if stop_at_step is not None and state.step >= stop_at_step and state.step < total:
            break
        last = state.metrics[-1]
        log.info("epoch %d: loss_p=%.4g loss_s=%.4g H_p=%.4f H_s=%.4f lr=%.3g", epoch,
                 last["loss_pressure"], last["loss_shear"], last["entropy_pressure"],
                 last["entropy_shear"], last["lr"])

    complete = state.step == total
    result = FitResult(state.pressure_head, state.shear_head, stats, list(manifest.experts),
                       state.metrics, config, out, complete)
    if out is not None:
        write_checkpoint(out, result)
        if complete:
            (out / INCOMPLETE_MARKER).unlink(missing_ok=True)
            (out / STATE_FILE).unlink(missing_ok=True)
        else:
            state.save(out / STATE_FILE)
    return result


@dataclass
class Checkpoint:
    pressure_head: gating.GatingHead
    shear_head: gating.GatingHead
    stats: NormalizationStats
    config: TrainConfig
    experts: list


def load_checkpoint(ckpt_dir) -> Checkpoint:
    d = Path(ckpt_dir)
    for name in CHECKPOINT_FILES[:4]:
        if not (d / name).exists():
            raise ConfigError(f"checkpoint {d} is missing {name}")
    if (d / INCOMPLETE_MARKER).exists():
        log.warning("checkpoint %s is flagged incomplete", d)
    config = TrainConfig.load(d / "config.json")
    stats = NormalizationStats.load(d / "norm_stats.json")
    p = gating.load_head(d / "pressure_head.json", expected_kind="pressure")
    s = gating.load_head(d / "shear_head.json", expected_kind="shear")
    experts = p.meta.get("expert_order") or []
    ref = stats.digest()
    for h in (p, s):
        if h.meta.get("norm_stats_ref") not in (None, ref):
            raise ConfigError(f"head checkpoint in {d} was trained against other normalization stats")
        if (h.meta.get("expert_order") or experts) != experts:
            raise ConfigError("pressure and shear heads disagree on expert order")
    width = feature_width(len(experts), config.use_normals)
    for h in (p, s):
        if h.d_in != width:
            raise ConfigError(f"{h.head_kind} head expects {h.d_in} features, config implies {width}")
    return Checkpoint(p, s, stats, config, list(experts))
