import json
from importlib import resources

import numpy as np
import pytest

from tinyarc.grid import Grid
from tinyarc.tasks import Pair, TaskRecord, TestItem, parse_task

ARC2_FILE = "arcagi2_f3283f7.json"


def _arc2_raw():
    try:
        path = resources.files("arckit") / "data" / ARC2_FILE
        return json.loads(path.read_text())
    except (ModuleNotFoundError, FileNotFoundError):
        return None


@pytest.fixture(scope="session")
def arc2_raw():
    raw = _arc2_raw()
    if raw is None:
        pytest.skip("ARC-AGI-2 data not available (pip install arckit)")
    return raw


@pytest.fixture(scope="session")
def arc2_grids(arc2_raw):
    """Every raw grid (nested lists) of the public training + evaluation splits."""
    out = []
    for split in ("train", "eval"):
        for task in arc2_raw[split].values():
            for ex in task["train"] + task["test"]:
                out.append(ex["input"])
                if "output" in ex:
                    out.append(ex["output"])
    return out


@pytest.fixture(scope="session")
def arc2_tasks(arc2_raw):
    return {split: [parse_task(k, v) for k, v in sorted(arc2_raw[split].items())]
            for split in ("train", "eval")}


def random_grid(rng, max_side=30, n_colors=10):
    h, w = rng.integers(1, max_side + 1, size=2)
    return Grid(rng.integers(0, n_colors, size=(h, w)))


def G(rows):
    return Grid(np.array(rows))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def copy_task(task_id="copy", n_train=3, seed=0, side=(3, 4)):
    """Asymmetric boards with distinct-ish colors whose outputs equal their inputs."""
    r = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_train + 1):
        a = r.integers(1, 10, size=side)
        a[0, 0] = 0
        pairs.append(Grid(a))
    return TaskRecord(task_id, tuple(Pair(g, g) for g in pairs[:-1]),
                      (TestItem(pairs[-1], pairs[-1]),))


# one summary line per acceptance criterion, printed after the test session
ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
