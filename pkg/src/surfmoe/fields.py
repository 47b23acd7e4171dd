"""Surface point-cloud samples carrying ground truth and expert predictions.

One sample is stored as one CSV file (one row per surface point); a dataset is
a directory of such files plus a JSON manifest recording the expert order and
the train/val/test split.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, UsageError

STD_FLOOR = 1e-8
BASE_COLUMNS = ("x", "y", "z", "nx", "ny", "nz",
                "p_true", "wss_true_x", "wss_true_y", "wss_true_z")
NORMAL_CHANNELS = ("nx", "ny", "nz")
SPLITS = ("train", "val", "test")
_AXES = ("x", "y", "z")


def expert_columns(name: str) -> list[str]:
    return [f"p_{name}"] + [f"wss_{name}_{a}" for a in _AXES]


def channel_names(experts) -> list[str]:
    """Every per-point scalar channel of a sample, in CSV column order (minus coordinates)."""
    names = list(BASE_COLUMNS[3:])
    for e in experts:
        names.extend(expert_columns(e))
    return names


def _frozen(a, shape_tail, what) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != 1 + len(shape_tail) or arr.shape[1:] != shape_tail:
        raise DataError(f"{what}: expected shape (N, {shape_tail}), got {arr.shape}")
    arr.setflags(write=False)
    return arr


def _check_finite(arr: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        row = int(np.argwhere(bad)[0][0])
        raise DataError(f"{what}: non-finite value at row {row}")


@dataclass(frozen=True, eq=False)
class ExpertFieldSet:
    p_pred: np.ndarray
    wss_pred: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p_pred", _frozen(self.p_pred, (), "p_pred"))
        object.__setattr__(self, "wss_pred", _frozen(self.wss_pred, (3,), "wss_pred"))
        if len(self.p_pred) != len(self.wss_pred):
            raise DataError("expert p_pred and wss_pred lengths differ")
        _check_finite(self.p_pred, "p_pred")
        _check_finite(self.wss_pred, "wss_pred")


def _unit_normals(normals: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(normals, axis=1)
    zero = norms == 0.0
    if zero.any():
        raise DataError(f"zero normal at row {int(np.argmax(zero))}")
    # rows already unit to rounding are left untouched so CSV round-trips stay bit-exact
    off = np.abs(norms - 1.0) > 1e-12
    if not off.any():
        return normals
    out = normals.copy()
    out[off] /= norms[off, None]
    return out


@dataclass(frozen=True, eq=False)
class SurfaceSample:
    sample_id: str
    points: np.ndarray
    normals: np.ndarray
    p_true: np.ndarray
    wss_true: np.ndarray
    expert_preds: dict[str, ExpertFieldSet] = field(default_factory=dict)

    def __post_init__(self):
        pts = _frozen(self.points, (3,), "points")
        n = len(pts)
        if n < 1:
            raise DataError("sample has no points")
        _check_finite(pts, "points")
        normals = np.array(self.normals, dtype=np.float64)
        _check_finite(normals, "normals")
        normals = _frozen(_unit_normals(_frozen(normals, (3,), "normals")), (3,), "normals")
        p = _frozen(self.p_true, (), "p_true")
        wss = _frozen(self.wss_true, (3,), "wss_true")
        _check_finite(p, "p_true")
        _check_finite(wss, "wss_true")
        if not (len(normals) == len(p) == len(wss) == n):
            raise DataError("per-point arrays have different lengths")
        if not self.expert_preds:
            raise DataError("sample has no expert predictions")
        for name, ex in self.expert_preds.items():
            if len(ex.p_pred) != n:
                raise DataError(f"expert {name!r} covers {len(ex.p_pred)} points, sample has {n}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "p_true", p)
        object.__setattr__(self, "wss_true", wss)
        object.__setattr__(self, "expert_preds", dict(self.expert_preds))

    @property
    def n_pts(self) -> int:
        return len(self.points)

    @property
    def expert_names(self) -> tuple[str, ...]:
        return tuple(self.expert_preds)

    def columns(self) -> dict[str, np.ndarray]:
        cols = {"x": self.points[:, 0], "y": self.points[:, 1], "z": self.points[:, 2],
                "nx": self.normals[:, 0], "ny": self.normals[:, 1], "nz": self.normals[:, 2],
                "p_true": self.p_true}
        for i, a in enumerate(_AXES):
            cols[f"wss_true_{a}"] = self.wss_true[:, i]
        for name, ex in self.expert_preds.items():
            cols[f"p_{name}"] = ex.p_pred
            for i, a in enumerate(_AXES):
                cols[f"wss_{name}_{a}"] = ex.wss_pred[:, i]
        return cols

    def replace_experts(self, expert_preds: dict[str, ExpertFieldSet]) -> "SurfaceSample":
        return SurfaceSample(self.sample_id, self.points, self.normals, self.p_true,
                             self.wss_true, expert_preds)


def samples_equal(a: SurfaceSample, b: SurfaceSample) -> bool:
    if a.sample_id != b.sample_id or a.expert_names != b.expert_names:
        return False
    ca, cb = a.columns(), b.columns()
    return all(np.array_equal(ca[k], cb[k]) for k in ca)


# --------------------------------------------------------------------- CSV I/O

def write_sample(sample: SurfaceSample, path) -> None:
    path = Path(path)
    cols = sample.columns()
    names = list(BASE_COLUMNS)
    for e in sample.expert_names:
        names.extend(expert_columns(e))
    table = np.column_stack([cols[n] for n in names])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(names) + "\n")
        np.savetxt(fh, table, fmt="%.17g", delimiter=",")


def _experts_from_header(header: list[str]) -> list[str]:
    experts = []
    for col in header[len(BASE_COLUMNS):]:
        if col.startswith("p_"):
            experts.append(col[2:])
    return experts


def load_sample(path, experts=None) -> SurfaceSample:
    """Read one sample CSV.

    ``experts`` fixes the expected expert order; when omitted it is taken from
    the header (``p_<name>`` columns in order of appearance).
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        rows = list(reader)
    if experts is None:
        experts = _experts_from_header(header)
        if not experts:
            raise FormatError(f"{path}: no expert columns (p_<name>) in header")
    index = {name: i for i, name in enumerate(header)}
    needed = list(BASE_COLUMNS) + [c for e in experts for c in expert_columns(e)]
    for col in needed:
        if col not in index:
            raise FormatError(f"{path}: missing column {col!r}")
    if not rows:
        raise FormatError(f"{path}: no data rows")
    width = len(header)
    data = np.empty((len(rows), width))
    for r, row in enumerate(rows):
        if len(row) != width:
            raise FormatError(f"{path}: row {r} has {len(row)} fields, header has {width}")
        try:
            data[r] = [float(v) for v in row]
        except ValueError:
            raise FormatError(f"{path}: unparseable number in row {r}") from None
    bad = ~np.isfinite(data[:, [index[c] for c in needed]])
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise DataError(f"{path}: non-finite value in column {needed[c]!r} at row {int(r)}")

    def col(*names):
        return data[:, [index[n] for n in names]]

    preds = {
        e: ExpertFieldSet(col(f"p_{e}")[:, 0], col(*expert_columns(e)[1:]))
        for e in experts
    }
    try:
        return SurfaceSample(
            sample_id=path.stem,
            points=col("x", "y", "z"),
            normals=col("nx", "ny", "nz"),
            p_true=col("p_true")[:, 0],
            wss_true=col("wss_true_x", "wss_true_y", "wss_true_z"),
            expert_preds=preds,
        )
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


# -------------------------------------------------------------- normalization

@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel mean and population std over the training split."""

    channels: dict[str, tuple[float, float]]

    def mean(self, name: str) -> float:
        return self._get(name)[0]

    def std(self, name: str) -> float:
        return self._get(name)[1]

    def _get(self, name):
        try:
            return self.channels[name]
        except KeyError:
            raise ConfigError(f"normalization stats have no channel {name!r}") from None

    def to_json(self) -> str:
        body = {"channels": {k: {"mean": float(m), "std": float(s)}
                             for k, (m, s) in self.channels.items()}}
        return _dump_json_f17(body)

    @classmethod
    def from_json(cls, text: str) -> "NormalizationStats":
        try:
            raw = json.loads(text)
            chans = {k: (float(v["mean"]), float(v["std"])) for k, v in raw["channels"].items()}
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"bad normalization stats file: {exc}") from None
        return cls(chans)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "NormalizationStats":
        return cls.from_json(Path(path).read_text())

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def _dump_json_f17(obj) -> str:
    """JSON with every float written at 17 significant digits."""

    def enc(o):
        if isinstance(o, float):
            if not math.isfinite(o):
                raise DataError("cannot serialize non-finite value")
            return "%.17g" % o
        if isinstance(o, dict):
            return "{" + ", ".join(f"{json.dumps(k)}: {enc(v)}" for k, v in o.items()) + "}"
        if isinstance(o, (list, tuple)):
            return "[" + ", ".join(enc(v) for v in o) + "]"
        return json.dumps(o)

    return enc(obj) + "\n"


def compute_norm_stats(train_samples) -> NormalizationStats:
    train_samples = list(train_samples)
    if not train_samples:
        raise UsageError("compute_norm_stats needs at least one training sample")
    experts = train_samples[0].expert_names
    for s in train_samples:
        if s.expert_names != experts:
            raise ConfigError(f"sample {s.sample_id!r} has expert order {s.expert_names}, "
                              f"expected {experts}")
    stats = {}
    for name in channel_names(experts):
        values = np.concatenate([s.columns()[name] for s in train_samples])
        # fsum gives an order-independent result, hence exact permutation invariance
        n = len(values)
        mean = math.fsum(values) / n
        var = math.fsum((values - mean) ** 2) / n
        stats[name] = (mean, max(math.sqrt(var), STD_FLOOR))
    return NormalizationStats(stats)


def feature_width(n_experts: int, use_normals: bool) -> int:
    return 4 * n_experts + (3 if use_normals else 0)


def normalize_features(sample: SurfaceSample, stats: NormalizationStats,
                       use_normals: bool = True) -> np.ndarray:
    """Gate input matrix: z-scored expert P, then expert WSS (x, y, z per expert), then raw normals."""
    cols = sample.columns()
    feats = []
    for e in sample.expert_names:
        name = f"p_{e}"
        feats.append((cols[name] - stats.mean(name)) / stats.std(name))
    for e in sample.expert_names:
        for name in expert_columns(e)[1:]:
            feats.append((cols[name] - stats.mean(name)) / stats.std(name))
    if use_normals:
        feats.extend(sample.normals.T)
    return np.column_stack(feats)


@dataclass(frozen=True)
class BlendTargets:
    """Truth and expert fields in truth-channel normalized units (what the loss sees)."""

    p_true: np.ndarray      # (N,)
    wss_true: np.ndarray    # (N, 3)
    expert_p: np.ndarray    # (N, E)
    expert_wss: np.ndarray  # (N, E, 3)


def truth_scale(stats: NormalizationStats):
    """(mean, std) arrays for the pressure and the three WSS truth channels."""
    p = (stats.mean("p_true"), stats.std("p_true"))
    wm = np.array([stats.mean(f"wss_true_{a}") for a in _AXES])
    ws = np.array([stats.std(f"wss_true_{a}") for a in _AXES])
    return p, (wm, ws)


def blend_targets(sample: SurfaceSample, stats: NormalizationStats) -> BlendTargets:
    (pm, ps), (wm, ws) = truth_scale(stats)
    ep = np.column_stack([ex.p_pred for ex in sample.expert_preds.values()])
    ew = np.stack([ex.wss_pred for ex in sample.expert_preds.values()], axis=1)
    return BlendTargets(
        p_true=(sample.p_true - pm) / ps,
        wss_true=(sample.wss_true - wm) / ws,
        expert_p=(ep - pm) / ps,
        expert_wss=(ew - wm) / ws,
    )


# ------------------------------------------------------------------- manifest

@dataclass
class DatasetManifest:
    experts: list[str]
    samples: list[tuple[str, str]]  # (path, split)
    seed: int | None = None
    root: Path | None = None

    def __post_init__(self):
        if not self.experts:
            raise ConfigError("manifest expert order is empty")
        for p, split in self.samples:
            if split not in SPLITS:
                raise ConfigError(f"unknown split {split!r} for {p}")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def paths(self, split: str | None = None) -> list[Path]:
        return [self.resolve(p) for p, s in self.samples if split is None or s == split]

    def load(self, split: str | None = None) -> list[SurfaceSample]:
        return [load_sample(p, self.experts) for p in self.paths(split)]

    def counts(self) -> dict[str, int]:
        return {s: sum(1 for _, sp in self.samples if sp == s) for s in SPLITS}

    def to_json(self) -> str:
        body = {"experts": list(self.experts),
                "samples": [{"path": p, "split": s} for p, s in self.samples],
                "seed": self.seed}
        return json.dumps(body, indent=2) + "\n"

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(self.to_json())

    @classmethod
    def load_file(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
            return cls(experts=list(raw["experts"]),
                       samples=[(d["path"], d["split"]) for d in raw["samples"]],
                       seed=raw.get("seed"), root=path.parent)
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}: bad manifest: {exc}") from None


def split_dataset(manifest: DatasetManifest, train_frac: float = 0.8,
                  seed: int = 0) -> DatasetManifest:
    """Shuffle the non-test samples by ``seed`` and cut them into train/val.

    Samples already marked ``test`` keep that assignment.
    """
    if not 0.0 < train_frac < 1.0:
        raise UsageError(f"train_frac must lie in (0, 1), got {train_frac}")
    pool = [p for p, s in manifest.samples if s != "test"]
    tests = [p for p, s in manifest.samples if s == "test"]
    m = len(pool)
    if m < 2:
        raise UsageError(f"need at least 2 samples to split, got {m}")
    n_train = min(max(math.ceil(train_frac * m - 1e-9), 1), m - 1)
    order = np.random.default_rng(seed).permutation(m)
    split = {pool[i]: ("train" if rank < n_train else "val") for rank, i in enumerate(order)}
    samples = [(p, split[p]) for p in pool] + [(p, "test") for p in tests]
    return DatasetManifest(list(manifest.experts), samples, seed, manifest.root)
