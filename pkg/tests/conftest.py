import time

import numpy as np
import pytest

from patchfool.data import gen_dataset
from patchfool.model import Model, build_default_model, train

TRAIN_SEED, HELDOUT_SEED = 1, 2
_CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_CRITERIA] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda item: item[0]):
            terminalreporter.write_line(line[1])


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion; returns the verdict."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[_CRITERIA].append((number, line))
        print(line)
        return ok

    return record


class Trained:
    def __init__(self, model: Model, report, seconds: float, train_set, heldout):
        self.model = model
        self.report = report
        self.seconds = seconds
        self.train_set = train_set
        self.heldout = heldout


@pytest.fixture(scope="session")
def trained() -> Trained:
    """The default model trained once per session on 2000 generated images."""
    train_set = gen_dataset(2000, seed=TRAIN_SEED)
    heldout = gen_dataset(500, seed=HELDOUT_SEED)
    model = build_default_model(4, seed=0, class_names=["disk", "square", "triangle", "cross"])
    start = time.perf_counter()
    report = train(model, train_set, epochs=15, lr=0.05, batch_size=32, seed=0, heldout=heldout)
    return Trained(model, report, time.perf_counter() - start, train_set, heldout)


@pytest.fixture(scope="session")
def small_model() -> Model:
    """Untrained default architecture at 16x16 input (2x2 interpretation grid)."""
    return build_default_model(3, seed=5, image_size=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
