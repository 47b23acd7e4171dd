import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from surfmoe import gating
from surfmoe.errors import UsageError
from surfmoe.fields import BlendTargets
from surfmoe.gating import HeadOutput
from surfmoe.objective import (blend_pressure, blend_shear, entropy, entropy_grad, mse, objective,
                               total_loss)


def test_blend_pressure_examples():
    preds = np.array([[3.0, 6.0, 9.0]])
    assert blend_pressure([[1.0, 0.0, 0.0]], preds)[0] == 3.0
    assert blend_pressure([[1 / 3, 1 / 3, 1 / 3]], preds)[0] == pytest.approx(6.0, rel=1e-15)
    # 0.5*2 + 0.25*4 + 0.25*8 + 0.5
    assert blend_pressure([[0.5, 0.25, 0.25]], [[2.0, 4.0, 8.0]], [0.5])[0] == pytest.approx(4.5, rel=1e-15)


def test_blend_pressure_shape_mismatch():
    with pytest.raises(UsageError):
        blend_pressure([[0.5, 0.5]], [[1.0, 2.0, 3.0]])


def test_blend_shear_examples():
    wss = np.random.default_rng(0).normal(size=(1, 3, 3))
    np.testing.assert_array_equal(blend_shear([[0.0, 1.0, 0.0]], wss)[0], wss[0, 1])
    v = np.array([0.3, -1.2, 2.0])
    same = np.tile(v, (1, 3, 1))
    np.testing.assert_allclose(blend_shear([[1 / 3] * 3], same)[0], v, rtol=1e-15)
    x_only = np.zeros((1, 3, 3))
    x_only[0, :, 0] = [1.0, 2.0, 3.0]
    assert blend_shear([[0.2, 0.3, 0.5]], x_only)[0, 0] == pytest.approx(2.3, rel=1e-15)
    out = blend_shear([[0.2, 0.3, 0.5]], x_only, [[1.0, 2.0, 3.0]])
    np.testing.assert_allclose(out[0], [3.3, 2.0, 3.0], rtol=1e-15)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(-10, 10))
def test_blend_linear_in_predictions(seed, c):
    rng = np.random.default_rng(seed)
    w = gating.softmax(rng.normal(size=(4, 3)))
    p = rng.normal(size=(4, 3))
    s = rng.normal(size=(4, 3, 3))
    np.testing.assert_allclose(blend_pressure(w, c * p), c * blend_pressure(w, p), atol=1e-12)
    np.testing.assert_allclose(blend_shear(w, c * s), c * blend_shear(w, s), atol=1e-12)


def test_mse_examples():
    assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse([1.0, 2.0], [0.0, 0.0]) == 2.5
    pred = np.zeros((2, 3))
    pred[1, 2] = 3.0
    assert mse(pred, np.zeros((2, 3))) == 1.5
    with pytest.raises(UsageError):
        mse([], [])


def test_entropy_examples():
    assert entropy([[1 / 3] * 3]) == pytest.approx(math.log(3.0), abs=1e-9)
    assert abs(entropy([[1.0, 0.0, 0.0]])) < 1e-10
    assert entropy([[0.5, 0.25, 0.25]]) == pytest.approx(1.5 * math.log(2.0), rel=1e-9)
    assert 1.5 * math.log(2.0) == pytest.approx(1.0397208, abs=5e-8)
    # mean over points, not sum
    assert entropy([[1 / 3] * 3, [1.0, 0.0, 0.0]]) == pytest.approx(math.log(3.0) / 2, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 20))
def test_entropy_bounds_and_permutation(seed, scale):
    rng = np.random.default_rng(seed)
    w = gating.softmax(scale * rng.normal(size=(6, 3)))
    h = entropy(w)
    assert -1e-11 <= h <= math.log(3.0) + 1e-9
    assert entropy(w[:, ::-1]) == pytest.approx(h, rel=1e-12, abs=1e-15)


def test_entropy_grad_matches_fd():
    w = gating.softmax(np.random.default_rng(1).normal(size=(4, 3)))
    g = entropy_grad(w)
    eps = 1e-7
    for idx in np.ndindex(w.shape):
        wp, wm = w.copy(), w.copy()
        wp[idx] += eps
        wm[idx] -= eps
        assert g[idx] == pytest.approx((entropy(wp) - entropy(wm)) / (2 * eps), rel=1e-6)


def test_total_loss_examples():
    b = total_loss(0.3, 0.2, 1.0, 0.5, 0.0)
    assert b.total == 0.5
    u = math.log(3.0)
    b = total_loss(0.0, 0.0, u, u, 0.01, "maximize")
    assert b.total == pytest.approx(-0.02 * u, rel=1e-12)
    assert b.total == pytest.approx(-0.0219722, abs=5e-8)
    assert total_loss(0.0, 0.0, u, u, 0.01, "minimize").total == pytest.approx(0.02 * u, rel=1e-12)
    assert total_loss(0.1, 0.2, u, u, 0.01, "none").total == pytest.approx(0.3, abs=1e-15)
    with pytest.raises(UsageError):
        total_loss(0.0, 0.0, 0.0, 0.0, -0.1)
    with pytest.raises(UsageError):
        total_loss(0.0, 0.0, 0.0, 0.0, 0.1, "sideways")


def _setup(seed=0, n=5):
    rng = np.random.default_rng(seed)
    t = BlendTargets(rng.normal(size=n), rng.normal(size=(n, 3)),
                     rng.normal(size=(n, 3)), rng.normal(size=(n, 3, 3)))
    return rng, t


def _outputs(zp, zs, cp, cs):
    return (HeadOutput(gating.softmax(zp), cp, zp), HeadOutput(gating.softmax(zs), cs, zs))


@pytest.mark.parametrize("mode", ["maximize", "minimize", "none"])
def test_gradient_wrt_logits_and_bias_matches_fd(mode):
    rng, t = _setup(3)
    zp, zs = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    cp, cs = rng.normal(size=5), rng.normal(size=(5, 3))
    lam = 0.05
    p_out, s_out = _outputs(zp, zs, cp, cs)
    _, g = objective(p_out, s_out, t, lam, mode)
    dzp = gating.softmax_backward(p_out.weights, g.pressure_weights)
    dzs = gating.softmax_backward(s_out.weights, g.shear_weights)

    def f(zp, zs, cp, cs):
        return objective(*_outputs(zp, zs, cp, cs), t, lam, mode)[0].total

    eps = 1e-6
    args = [zp, zs, cp, cs]
    for which, analytic in enumerate([dzp, dzs, g.pressure_bias, g.shear_bias]):
        for idx in np.ndindex(args[which].shape):
            plus = [a.copy() for a in args]
            minus = [a.copy() for a in args]
            plus[which][idx] += eps
            minus[which][idx] -= eps
            fd = (f(*plus) - f(*minus)) / (2 * eps)
            assert analytic[idx] == pytest.approx(fd, rel=1e-4, abs=1e-9)


def test_breakdown_consistency():
    rng, t = _setup(4)
    p_out, s_out = _outputs(rng.normal(size=(5, 3)), rng.normal(size=(5, 3)), np.zeros(5), np.zeros((5, 3)))
    b, _ = objective(p_out, s_out, t, 0.01)
    assert b.total == b.loss_pressure + b.loss_shear - 0.01 * (b.entropy_pressure + b.entropy_shear)


def _stationary_entropy(lam, seed=5, steps=4000, lr=0.5):
    """Minimize the pressure objective directly over per-point logits by gradient descent."""
    rng, t = _setup(seed, n=8)
    z = np.zeros((8, 3))
    zs = np.zeros((8, 3))
    for _ in range(steps):
        p_out, s_out = _outputs(z, zs, np.zeros(8), np.zeros((8, 3)))
        _, g = objective(p_out, s_out, t, lam)
        z -= lr * 8 * gating.softmax_backward(p_out.weights, g.pressure_weights)
    return entropy(gating.softmax(z))


def test_regularized_stationary_point_has_higher_entropy():
    assert _stationary_entropy(0.01) > _stationary_entropy(0.0)
