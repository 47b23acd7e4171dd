import numpy as np
import pytest

from surfmoe.fields import ExpertFieldSet, SurfaceSample


def random_sample(n=6, experts=("e1", "e2", "e3"), seed=0, sample_id="s0"):
    rng = np.random.default_rng(seed)
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    preds = {e: ExpertFieldSet(rng.normal(size=n), rng.normal(size=(n, 3))) for e in experts}
    return SurfaceSample(sample_id, rng.normal(size=(n, 3)), normals, rng.normal(size=n),
                         rng.normal(size=(n, 3)), preds)


@pytest.fixture
def sample():
    return random_sample()


@pytest.fixture
def samples():
    return [random_sample(n=5 + i, seed=i, sample_id=f"s{i}") for i in range(4)]


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    from surfmoe.synthbench import SynthSpec, generate_dataset

    spec = SynthSpec(n_samples=6, n_test=2, n_pts=60, seed=3)
    return generate_dataset(spec, tmp_path_factory.mktemp("tiny"))


@pytest.fixture
def tiny_config():
    from surfmoe.trainer import TrainConfig

    return TrainConfig(num_epochs=2, hidden_width=16, seed=1)


# --------------------------------------------------------- acceptance report

_CRITERIA = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when not in ("setup", "call"):
        return
    n, title = mark.args
    ok = call.excinfo is None
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "details": []})
    if call.when == "call" or not ok:
        entry["ok"] &= ok
        if not ok:
            entry["details"].append(f"{item.name}: {call.excinfo.typename}")
    if call.when == "call":
        entry["details"].extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        line = f"criterion {n} {'PASS' if e['ok'] else 'FAIL'}: {e['title']}"
        if e["details"]:
            line += " [" + "; ".join(e["details"]) + "]"
        terminalreporter.write_line(line)
