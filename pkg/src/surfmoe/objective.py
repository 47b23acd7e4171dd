"""Blending, prediction losses, gate entropy and the entropy-regularized total loss.

All quantities live in normalized field units. Every loss routine returns the
value together with its exact gradient so the trainer can chain it into
:func:`surfmoe.gating.backward`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError

ENTROPY_EPS = 1e-12
ENTROPY_MODES = ("maximize", "minimize", "none")


def blend_pressure(weights, expert_p, bias=None) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    p = np.asarray(expert_p, dtype=np.float64)
    if w.shape != p.shape:
        raise UsageError(f"weights {w.shape} and expert predictions {p.shape} disagree")
    out = (w * p).sum(axis=-1)
    if bias is not None:
        out = out + bias
    return out


def blend_shear(weights, expert_wss, bias=None) -> np.ndarray:
    """One weight per expert shared by all three WSS components."""
    w = np.asarray(weights, dtype=np.float64)
    s = np.asarray(expert_wss, dtype=np.float64)
    if s.shape[:-1] != w.shape or s.shape[-1] != 3:
        raise UsageError(f"weights {w.shape} and expert WSS {s.shape} disagree")
    out = np.einsum("...e,...ek->...k", w, s)
    if bias is not None:
        out = out + bias
    return out


def mse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise UsageError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise UsageError("mse of empty input")
    return float(np.mean((pred - truth) ** 2))


def mse_grad(pred, truth) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    return 2.0 * (pred - truth) / pred.size


def entropy(weights) -> float:
    """Mean over points of -sum_i w_i ln(w_i + eps)."""
    w = np.asarray(weights, dtype=np.float64)
    return float(np.mean(-(w * np.log(w + ENTROPY_EPS)).sum(axis=-1)))


def entropy_grad(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    n = w.shape[0] if w.ndim > 1 else 1
    return -(np.log(w + ENTROPY_EPS) + w / (w + ENTROPY_EPS)) / n


@dataclass(frozen=True)
class LossBreakdown:
    loss_pressure: float
    loss_shear: float
    entropy_pressure: float
    entropy_shear: float
    lambda_entropy: float
    total: float
    mode: str = "maximize"


def entropy_sign(mode: str) -> float:
    """Coefficient of lambda*(H_p + H_s) in the total loss."""
    if mode == "maximize":
        return -1.0
    if mode == "minimize":
        return 1.0
    if mode == "none":
        return 0.0
    raise UsageError(f"entropy mode must be one of {ENTROPY_MODES}, got {mode!r}")


def total_loss(loss_pressure, loss_shear, entropy_pressure, entropy_shear,
               lambda_entropy: float, mode: str = "maximize") -> LossBreakdown:
    if lambda_entropy < 0:
        raise UsageError(f"lambda_entropy must be >= 0, got {lambda_entropy}")
    sign = entropy_sign(mode)
    total = loss_pressure + loss_shear + sign * lambda_entropy * (entropy_pressure + entropy_shear)
    return LossBreakdown(float(loss_pressure), float(loss_shear), float(entropy_pressure),
                         float(entropy_shear), float(lambda_entropy), float(total), mode)


@dataclass
class ObjectiveGrads:
    """dL_total with respect to each head's outputs."""

    pressure_weights: np.ndarray  # (N, E)
    pressure_bias: np.ndarray     # (N,)
    shear_weights: np.ndarray     # (N, E)
    shear_bias: np.ndarray        # (N, 3)


def objective(p_out, s_out, targets, lambda_entropy: float = 0.01,
              mode: str = "maximize") -> tuple[LossBreakdown, ObjectiveGrads]:
    """Full forward of the training loss from both heads' outputs.

    ``p_out`` / ``s_out`` are :class:`~surfmoe.gating.HeadOutput`; ``targets``
    is a :class:`~surfmoe.fields.BlendTargets`.
    """
    sign = entropy_sign(mode)
    p_hat = blend_pressure(p_out.weights, targets.expert_p, p_out.bias_correction)
    s_hat = blend_shear(s_out.weights, targets.expert_wss, s_out.bias_correction)
    lp = mse(p_hat, targets.p_true)
    ls = mse(s_hat, targets.wss_true)
    hp = entropy(p_out.weights)
    hs = entropy(s_out.weights)
    breakdown = total_loss(lp, ls, hp, hs, lambda_entropy, mode)

    g_p = mse_grad(p_hat, targets.p_true)                  # (N,)
    g_s = mse_grad(s_hat, targets.wss_true)                # (N, 3)
    reg = sign * lambda_entropy
    gw_p = g_p[:, None] * targets.expert_p + reg * entropy_grad(p_out.weights)
    gw_s = np.einsum("nk,nek->ne", g_s, targets.expert_wss) + reg * entropy_grad(s_out.weights)
    return breakdown, ObjectiveGrads(gw_p, g_p, gw_s, g_s)
