import json
import time
from pathlib import Path

import pytest

from puncto.cli import dispatch
from puncto.synthetic import make_triplet_dataset

OVERFIT = {
    "scale": "nano",
    "G": 64,
    "K": 32,
    "batch_size": 32,
    "total_steps": 500,
    "peak_lr": 1e-3,
    "mask_ratio": 0.5,
    "seed": 0,
    "determinism": True,
}

_criteria: dict[str, tuple[str, str]] = {}


def _train(root: Path, name: str, manifest: Path) -> dict:
    out = root / name
    cfg = dict(OVERFIT, manifest_path=str(manifest), output_dir=str(out))
    (root / f"{name}.json").write_text(json.dumps(cfg))
    t0 = time.perf_counter()
    assert dispatch(["train", "--config", str(root / f"{name}.json")]) == 0
    return {"dir": out, "seconds": time.perf_counter() - t0, "manifest": manifest}


@pytest.fixture(scope="session")
def overfit_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    return root, make_triplet_dataset(root / "data", num_shapes=32, num_points=512, dim=64, seed=0)


@pytest.fixture(scope="session")
def overfit_run(overfit_data):
    root, manifest = overfit_data
    return _train(root, "run_a", manifest)


@pytest.fixture(scope="session")
def overfit_rerun(overfit_data):
    root, manifest = overfit_data
    return _train(root, "run_b", manifest)


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or report.outcome != "passed":
        prev = _criteria.get(name)
        if prev is None or prev[0] == "PASS":
            _criteria[name] = ("PASS" if report.passed else "FAIL", report.when)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria, key=lambda n: int(n.split("_")[1]) if n.split("_")[1].isdigit() else 99):
        status, _ = _criteria[name]
        terminalreporter.write_line(f"{status}  {name}")
