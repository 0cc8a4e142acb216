import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_synthetic(tmp_path_factory):
    """40-study synthetic dataset shared by the slower integration tests."""
    from mammovl.synthetic import SyntheticSpec, generate

    out = tmp_path_factory.mktemp("tiny")
    spec = SyntheticSpec(n_studies=40, split_sizes={"train": 30, "test": 10}, seed=3)
    return generate(spec, out), spec


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """The full desk-scale pipeline (500/100 studies, seed 0), run once."""
    import desk

    return desk.run(tmp_path_factory.mktemp("desk"))


_CRITERIA: dict = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "ran": False})
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        entry["ran"] = True
        entry["ok"] = entry["ok"] and call.excinfo is None


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL" if e["ran"] else "NOT RUN"
        terminalreporter.write_line(f"criterion {number:>2} {status}: {e['title']}")
