import json
import math

import numpy as np
import pytest

from surfmoe.errors import ConfigError, NumericError, UsageError
from surfmoe.fields import ExpertFieldSet
from surfmoe.synthbench import SynthSpec, generate_samples, write_dataset
from surfmoe.trainer import (CHECKPOINT_FILES, INCOMPLETE_MARKER, STATE_FILE, TrainConfig,
                             cosine_lr, fit, init_state, load_checkpoint, prepare, read_metrics,
                             train_epoch)


def test_cosine_lr_endpoints_and_midpoint():
    assert cosine_lr(0, 320) == 1e-3
    assert cosine_lr(320, 320) == 5e-6
    assert abs(cosine_lr(160, 320) - 5.025e-4) <= 1e-12


def test_cosine_lr_monotone_and_range():
    lrs = [cosine_lr(s, 97) for s in range(98)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(UsageError):
        cosine_lr(98, 97)
    with pytest.raises(UsageError):
        cosine_lr(0, 0)


def test_config_defaults():
    c = TrainConfig()
    assert (c.num_epochs, c.start_lr, c.end_lr, c.lambda_entropy) == (10, 1e-3, 5e-6, 0.01)
    assert c.optimizer == "adam" and c.hidden_width == 128 and c.hidden_layers == 3


@pytest.mark.parametrize("bad", [{"num_epochs": 0}, {"lambda_entropy": -1.0},
                                 {"end_lr": 1e-2}, {"entropy_mode": "up"}, {"optimizer": "lbfgs"}])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig.from_dict(bad)


def test_config_rejects_unknown_keys(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"num_epochs": 2, "batch_size": 4}))
    with pytest.raises(ConfigError, match="batch_size"):
        TrainConfig.load(tmp_path / "c.json")


def test_fit_writes_checkpoint_layout(tiny_manifest, tiny_config, tmp_path):
    res = fit(tiny_manifest, tiny_config, tmp_path / "ck")
    for name in CHECKPOINT_FILES:
        assert (tmp_path / "ck" / name).exists()
    assert not (tmp_path / "ck" / INCOMPLETE_MARKER).exists()
    rows = read_metrics(tmp_path / "ck" / "metrics.csv")
    n_train = tiny_manifest.counts()["train"]
    assert len(rows) == tiny_config.num_epochs * n_train
    assert (tmp_path / "ck" / "metrics.csv").read_text().splitlines()[0] == (
        "epoch,step,lr,loss_pressure,loss_shear,entropy_pressure,entropy_shear,total_loss,"
        "val_loss_pressure,val_loss_shear")
    for i, r in enumerate(rows):
        at_end = (i + 1) % n_train == 0
        assert (r["val_loss_pressure"] is not None) == at_end
    assert rows[0]["lr"] == 1e-3
    ck = load_checkpoint(tmp_path / "ck")
    assert ck.experts == ["e1", "e2", "e3"]
    assert ck.stats.channels == res.stats.channels


def test_fit_is_bitwise_deterministic(tiny_manifest, tiny_config, tmp_path):
    fit(tiny_manifest, tiny_config, tmp_path / "a")
    fit(tiny_manifest, tiny_config, tmp_path / "b")
    for name in CHECKPOINT_FILES:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    fit(tiny_manifest, tiny_config.replace(seed=2), tmp_path / "c")
    assert (tmp_path / "a" / "pressure_head.json").read_bytes() != \
        (tmp_path / "c" / "pressure_head.json").read_bytes()


def test_resume_reproduces_uninterrupted_run(tiny_manifest, tiny_config, tmp_path):
    fit(tiny_manifest, tiny_config, tmp_path / "full")
    part = fit(tiny_manifest, tiny_config, tmp_path / "part", stop_at_step=3)
    assert not part.complete
    assert (tmp_path / "part" / INCOMPLETE_MARKER).exists()
    assert (tmp_path / "part" / STATE_FILE).exists()
    fit(tiny_manifest, tiny_config, tmp_path / "part", resume=True)
    assert not (tmp_path / "part" / INCOMPLETE_MARKER).exists()
    for name in CHECKPOINT_FILES:
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()


def test_resume_without_state(tiny_manifest, tiny_config, tmp_path):
    with pytest.raises(ConfigError):
        fit(tiny_manifest, tiny_config, tmp_path / "none", resume=True)


def _train_set_loss(pressure_head, shear_head, items):
    from surfmoe import gating
    from surfmoe.objective import objective

    out = []
    for it in items:
        b, _ = objective(gating.forward(pressure_head, it.features),
                         gating.forward(shear_head, it.features), it.targets, 0.0, "none")
        out.append(b.total)
    return float(np.mean(out))


@pytest.mark.parametrize("optimizer", ["sgd", "momentum", "adam"])
def test_optimizers_reduce_loss(tiny_manifest, optimizer):
    from surfmoe.fields import compute_norm_stats

    cfg = TrainConfig(num_epochs=5, hidden_width=16, optimizer=optimizer, seed=0,
                      start_lr=1e-2, end_lr=1e-4)
    train = tiny_manifest.load("train")
    items = prepare(train, compute_norm_stats(train), True)
    init = init_state(cfg, 3, 1)
    res = fit(tiny_manifest, cfg)
    before = _train_set_loss(init.pressure_head, init.shear_head, items)
    after = _train_set_loss(res.pressure_head, res.shear_head, items)
    assert after < before


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_nan_loss_aborts_with_sample_and_step(tiny_manifest, tiny_config):
    train = tiny_manifest.load("train")
    from surfmoe.fields import compute_norm_stats

    stats = compute_norm_stats(train)
    items = prepare(train, stats, True)
    state = init_state(tiny_config, 3, 10)
    state.pressure_head.biases[-1][0] = np.inf
    with pytest.raises(NumericError, match="step 0"):
        train_epoch(state, items, tiny_config, 0)


def _truth_expert_manifest(tmp_path, identical=False):
    spec = SynthSpec(n_samples=20, n_test=0, n_pts=1000, seed=11)
    pool, _ = generate_samples(spec)
    out = []
    for s in pool:
        if identical:
            ex = ExpertFieldSet(s.expert_preds["e2"].p_pred, s.expert_preds["e2"].wss_pred)
            preds = {"e1": ex, "e2": ex, "e3": ex}
        else:
            preds = {"e1": ExpertFieldSet(s.p_true, s.wss_true),
                     "e2": s.expert_preds["e2"], "e3": s.expert_preds["e3"]}
        out.append(s.replace_experts(preds))
    return write_dataset(out, [], tmp_path, ["e1", "e2", "e3"], 0.8, 11)


@pytest.fixture(scope="module")
def truth_runs(tmp_path_factory):
    manifest = _truth_expert_manifest(tmp_path_factory.mktemp("truth"))
    cfg = TrainConfig(seed=3, lambda_entropy=0.0)
    no_reg = fit(manifest, cfg)
    reg = fit(manifest, cfg.replace(lambda_entropy=0.01))
    return manifest, no_reg, reg


def _mean_pressure_weight(res, manifest, k=0):
    from surfmoe import gating
    from surfmoe.fields import normalize_features

    ws = [gating.forward(res.pressure_head, normalize_features(s, res.stats)).weights
          for s in manifest.load("train")]
    return float(np.concatenate(ws)[:, k].mean())


def test_unregularized_gate_collapses_onto_exact_expert(truth_runs):
    manifest, no_reg, _ = truth_runs
    assert _mean_pressure_weight(no_reg, manifest) > 0.9


def test_regularized_entropy_higher_every_epoch(truth_runs):
    _, no_reg, reg = truth_runs
    for (hp0, hs0), (hp1, hs1) in zip(no_reg.epoch_entropy(), reg.epoch_entropy()):
        assert hp1 + hs1 > hp0 + hs0


def test_identical_experts_drive_gate_to_uniform(tmp_path):
    manifest = _truth_expert_manifest(tmp_path, identical=True)
    res = fit(manifest, TrainConfig(seed=4, num_epochs=10))
    hp, hs = res.epoch_entropy()[-1]
    assert min(hp, hs) >= 0.95 * math.log(3)
