"""Pointwise gating MLP with softmax expert weights and an optional additive bias head.

Forward and backward are written out by hand in numpy. Weight matrices are
stored input-major (``fan_in x fan_out``) so a layer is ``h @ W + b``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, UsageError
from .fields import _dump_json_f17

HIDDEN_LAYERS = 3
HIDDEN_WIDTH = 128
HEAD_KINDS = ("pressure", "shear")


def correction_width(head_kind: str) -> int:
    return 1 if head_kind == "pressure" else 3


def default_dims(d_in: int, n_experts: int, head_kind: str, bias_correction: bool,
                 hidden=(HIDDEN_WIDTH,) * HIDDEN_LAYERS) -> list[int]:
    d_out = n_experts + (correction_width(head_kind) if bias_correction else 0)
    return [d_in, *hidden, d_out]


@dataclass
class GatingHead:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    bias_correction: bool
    head_kind: str
    n_experts: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.head_kind not in HEAD_KINDS:
            raise UsageError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        expected_out = self.n_experts + (correction_width(self.head_kind) if self.bias_correction else 0)
        if self.layer_dims[-1] != expected_out:
            raise ConfigError(f"{self.head_kind} head with E={self.n_experts} and bias_correction="
                              f"{self.bias_correction} needs output width {expected_out}, "
                              f"got {self.layer_dims[-1]}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[i], self.layer_dims[i + 1]) or b.shape != (self.layer_dims[i + 1],):
                raise ConfigError(f"layer {i} parameter shapes do not match layer_dims")

    @property
    def d_in(self) -> int:
        return self.layer_dims[0]

    def params(self) -> list[np.ndarray]:
        """Flat parameter list in the order W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "GatingHead":
        return GatingHead(list(self.layer_dims), [w.copy() for w in self.weights],
                          [b.copy() for b in self.biases], self.bias_correction,
                          self.head_kind, self.n_experts, dict(self.meta))


@dataclass
class HeadOutput:
    weights: np.ndarray          # (N, E), rows on the probability simplex
    bias_correction: np.ndarray  # (N,) pressure or (N, 3) shear; zeros when disabled
    logits: np.ndarray           # (N, E)


def init_head(layer_dims, seed: int, bias_correction: bool, head_kind: str) -> GatingHead:
    """Weights U(-1, 1) * sqrt(2 / fan_in), zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise UsageError(f"layer dims must be positive, got {layer_dims}")
    correction = correction_width(head_kind) if bias_correction else 0
    n_experts = dims[-1] - correction
    if n_experts < 1:
        raise UsageError(f"output width {dims[-1]} leaves no room for experts")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(2.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return GatingHead(dims, weights, biases, bias_correction, head_kind, n_experts)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(head: GatingHead, features: np.ndarray, return_cache: bool = False):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != head.d_in:
        raise UsageError(f"feature matrix must be (N, {head.d_in}), got {x.shape}")
    bad = ~np.isfinite(x)
    if bad.any():
        raise DataError(f"non-finite feature at point {int(np.argwhere(bad)[0][0])}")
    acts = [x]
    pre = []
    h = x
    last = len(head.weights) - 1
    for i, (w, b) in enumerate(zip(head.weights, head.biases)):
        a = h @ w + b
        if i < last:
            pre.append(a)
            h = np.maximum(a, 0.0)
            acts.append(h)
        else:
            h = a
    logits = h[:, :head.n_experts]
    if head.bias_correction:
        corr = h[:, head.n_experts:]
        if head.head_kind == "pressure":
            corr = corr[:, 0]
    else:
        shape = (len(x),) if head.head_kind == "pressure" else (len(x), 3)
        corr = np.zeros(shape)
    out = HeadOutput(softmax(logits), corr, logits)
    if return_cache:
        return out, (acts, pre, out.weights)
    return out


def softmax_backward(weights: np.ndarray, grad_weights: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of softmax: dz_j = p_j (g_j - sum_i p_i g_i)."""
    return weights * (grad_weights - (weights * grad_weights).sum(axis=-1, keepdims=True))


def backward(head: GatingHead, features, grad_weights, grad_bias=None, cache=None):
    """Gradients of a scalar loss through the head.

    ``grad_weights`` is dL/d(softmax weights), shape (N, E); ``grad_bias`` is
    dL/d(bias correction), ignored when the head has no correction output.
    Returns ``(param_grads, grad_features)`` with ``param_grads`` a list
    ``[(dW0, db0), (dW1, db1), ...]``.
    """
    if cache is None:
        _, cache = forward(head, features, return_cache=True)
    acts, pre, probs = cache
    x = acts[0]
    n = len(x)
    grad_weights = np.asarray(grad_weights, dtype=np.float64)
    if grad_weights.shape != (n, head.n_experts):
        raise UsageError(f"grad_weights must be ({n}, {head.n_experts}), got {grad_weights.shape}")
    d_out = np.zeros((n, head.layer_dims[-1]))
    d_out[:, :head.n_experts] = softmax_backward(probs, grad_weights)
    if head.bias_correction and grad_bias is not None:
        g = np.asarray(grad_bias, dtype=np.float64).reshape(n, -1)
        if g.shape[1] != head.layer_dims[-1] - head.n_experts:
            raise UsageError(f"grad_bias has width {g.shape[1]}")
        d_out[:, head.n_experts:] = g
    grads = [None] * len(head.weights)
    delta = d_out
    for i in range(len(head.weights) - 1, -1, -1):
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        delta = delta @ head.weights[i].T
        if i > 0:
            # ReLU subgradient taken as 0 at exactly 0
            delta = delta * (pre[i - 1] > 0.0)
    return grads, delta


# ---------------------------------------------------------------- checkpoints

def head_to_dict(head: GatingHead, norm_stats_ref: str | None = None,
                 expert_order=None) -> dict:
    return {
        "head_kind": head.head_kind,
        "layer_dims": list(head.layer_dims),
        "bias_correction": head.bias_correction,
        "n_experts": head.n_experts,
        "weights": [w.tolist() for w in head.weights],
        "biases": [b.tolist() for b in head.biases],
        "norm_stats_ref": norm_stats_ref,
        "expert_order": list(expert_order) if expert_order is not None else None,
    }


def save_head(head: GatingHead, path, norm_stats_ref: str | None = None,
              expert_order=None) -> None:
    path = Path(path)
    text = _dump_json_f17(head_to_dict(head, norm_stats_ref, expert_order))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def load_head(path, expected_dims=None, expected_kind: str | None = None) -> GatingHead:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
        dims = [int(d) for d in raw["layer_dims"]]
        weights = [np.array(w, dtype=np.float64).reshape(dims[i], dims[i + 1])
                   for i, w in enumerate(raw["weights"])]
        biases = [np.array(b, dtype=np.float64).reshape(dims[i + 1])
                  for i, b in enumerate(raw["biases"])]
        kind = raw["head_kind"]
        corr = bool(raw["bias_correction"])
        n_experts = int(raw.get("n_experts") or dims[-1] - (correction_width(kind) if corr else 0))
    except (OSError, ValueError, KeyError, TypeError, IndexError) as exc:
        raise FormatError(f"{path}: corrupt head checkpoint ({exc})") from None
    if len(weights) != len(dims) - 1:
        raise FormatError(f"{path}: {len(weights)} weight matrices for {len(dims)} layer dims")
    if expected_dims is not None and list(expected_dims) != dims:
        raise ConfigError(f"{path}: layer dims {dims} do not match expected {list(expected_dims)}")
    if expected_kind is not None and kind != expected_kind:
        raise ConfigError(f"{path}: head kind {kind!r}, expected {expected_kind!r}")
    meta = {"norm_stats_ref": raw.get("norm_stats_ref"), "expert_order": raw.get("expert_order")}
    return GatingHead(dims, weights, biases, corr, kind, n_experts, meta)
