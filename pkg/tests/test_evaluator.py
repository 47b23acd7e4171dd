import numpy as np
import pytest

from surfmoe import gating
from surfmoe.errors import ConfigError, DataError, FormatError, UsageError
from surfmoe.evaluator import (MOE, QUANTITIES, evaluate, export_vtk_polydata, infer_sample,
                               l2_relative_error, read_report_csv, read_vtk_polydata,
                               write_inference_csv)
from surfmoe.fields import ExpertFieldSet, compute_norm_stats, feature_width

from conftest import random_sample


def test_l2_examples():
    t = np.array([1.0, -2.0, 3.0])
    assert l2_relative_error(t, t) == 0.0
    assert l2_relative_error(2 * t, t) == pytest.approx(1.0, rel=1e-15)
    oracle = np.sqrt(1.0 / 5.0)
    assert l2_relative_error([1.0, 1.0], [1.0, 2.0]) == pytest.approx(oracle, rel=1e-15)
    assert oracle == pytest.approx(0.4472136, abs=5e-8)


def test_l2_zero_truth_and_shape():
    with pytest.raises(DataError):
        l2_relative_error([1.0, 2.0], [0.0, 0.0])
    with pytest.raises(UsageError):
        l2_relative_error([1.0], [1.0, 2.0])


def _heads(width=16, corr=False, use_normals=True, seed=0, zero=False):
    d = feature_width(3, use_normals)
    p = gating.init_head(gating.default_dims(d, 3, "pressure", corr, (width,) * 3), seed, corr, "pressure")
    s = gating.init_head(gating.default_dims(d, 3, "shear", corr, (width,) * 3), seed + 1, corr, "shear")
    if zero:
        for h in (p, s):
            for prm in h.params():
                prm[...] = 0.0
    return p, s


@pytest.fixture
def setup(samples):
    return samples, compute_norm_stats(samples)


@pytest.mark.parametrize("name", ["e1", "e2", "e3"])
def test_force_expert_is_exact_passthrough(setup, name):
    samples, stats = setup
    p, s = _heads(corr=True)
    for smp in samples:
        out = infer_sample(p, s, stats, smp, force_expert=name)
        np.testing.assert_array_equal(out.p, smp.expert_preds[name].p_pred)
        np.testing.assert_array_equal(out.wss, smp.expert_preds[name].wss_pred)
        assert out.bias_p is None and out.bias_s is None


def test_force_unknown_expert(setup):
    samples, stats = setup
    with pytest.raises(ConfigError):
        infer_sample(*_heads(), stats, samples[0], force_expert="e9")


def test_uniform_gate_gives_pointwise_mean(setup):
    samples, stats = setup
    p, s = _heads(zero=True)
    smp = samples[1]
    out = infer_sample(p, s, stats, smp)
    ep = np.mean([e.p_pred for e in smp.expert_preds.values()], axis=0)
    ew = np.mean([e.wss_pred for e in smp.expert_preds.values()], axis=0)
    np.testing.assert_allclose(out.p, ep, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(out.wss, ew, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("use_normals", [True, False])
def test_weights_on_simplex(setup, use_normals):
    samples, stats = setup
    p, s = _heads(use_normals=use_normals, seed=4)
    for smp in samples:
        out = infer_sample(p, s, stats, smp, use_normals)
        for w in (out.weights_p, out.weights_s):
            assert np.all(w >= 0)
            np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)


def test_expert_order_mismatch(setup):
    samples, stats = setup
    with pytest.raises(ConfigError, match="order"):
        infer_sample(*_heads(), stats, samples[0], experts=["e2", "e1", "e3"])


def test_report_shape_and_truth_expert(setup):
    samples, stats = setup
    exact = [smp.replace_experts({**smp.expert_preds,
                                  "e2": ExpertFieldSet(smp.p_true, smp.wss_true)})
             for smp in samples]
    report, outputs = evaluate(*_heads(), stats, exact)
    assert report.models == [MOE, "e1", "e2", "e3"]
    assert report.table().shape == (4, len(QUANTITIES))
    assert all(report.errors["e2"][q] == 0.0 for q in QUANTITIES)
    assert report.best_expert("P") == ("e2", 0.0)
    assert len(outputs) == len(samples)
    assert len(report.per_sample) == len(samples) * 4 * 4


def test_report_mean_over_samples(setup):
    samples, stats = setup
    report, _ = evaluate(*_heads(), stats, samples)
    per = [e for sid, m, q, e in report.per_sample if m == "e1" and q == "WSS_y"]
    assert report.errors["e1"]["WSS_y"] == pytest.approx(np.mean(per), rel=1e-14)


def test_report_csv_roundtrip(setup, tmp_path):
    samples, stats = setup
    report, _ = evaluate(*_heads(), stats, samples)
    (tmp_path / "r.csv").write_text(report.to_csv())
    assert read_report_csv(tmp_path / "r.csv") == report.errors
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(FormatError):
        read_report_csv(tmp_path / "bad.csv")
    text = report.to_text().splitlines()
    assert len(text) == 2 + 4 and text[0].startswith("Model")


def test_evaluate_needs_samples(setup):
    _, stats = setup
    with pytest.raises(UsageError):
        evaluate(*_heads(), stats, [])


@pytest.mark.parametrize("corr", [False, True])
def test_vtk_roundtrip(setup, tmp_path, corr):
    samples, stats = setup
    smp = samples[2]
    out = infer_sample(*_heads(corr=corr), stats, smp)
    export_vtk_polydata(smp, out, tmp_path / "a.vtk")
    pts, arrays = read_vtk_polydata(tmp_path / "a.vtk")
    np.testing.assert_array_equal(pts, smp.points)
    assert pts.shape[0] == smp.n_pts
    np.testing.assert_array_equal(arrays["p_moe"], out.p)
    np.testing.assert_array_equal(arrays["wss_moe_z"], out.wss[:, 2])
    np.testing.assert_array_equal(arrays["weight_s_e3"], out.weights_s[:, 2])
    assert ("bias_p" in arrays) == corr and ("bias_s_y" in arrays) == corr


def test_vtk_truncated(setup, tmp_path):
    samples, stats = setup
    out = infer_sample(*_heads(), stats, samples[0])
    export_vtk_polydata(samples[0], out, tmp_path / "a.vtk")
    text = (tmp_path / "a.vtk").read_text().splitlines()
    (tmp_path / "b.vtk").write_text("\n".join(text[:-3]) + "\n")
    with pytest.raises(FormatError):
        read_vtk_polydata(tmp_path / "b.vtk")
    (tmp_path / "c.vtk").write_text("hello\n")
    with pytest.raises(FormatError):
        read_vtk_polydata(tmp_path / "c.vtk")


def test_inference_csv(setup, tmp_path):
    samples, stats = setup
    out = infer_sample(*_heads(), stats, samples[0])
    write_inference_csv(out, tmp_path / "o.csv")
    header = (tmp_path / "o.csv").read_text().splitlines()[0].split(",")
    table = np.loadtxt(tmp_path / "o.csv", delimiter=",", skiprows=1, ndmin=2)
    assert table.shape == (samples[0].n_pts, len(header))
    np.testing.assert_array_equal(table[:, header.index("p_moe")], out.p)
    w = table[:, [header.index(f"weight_p_{e}") for e in ("e1", "e2", "e3")]]
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
