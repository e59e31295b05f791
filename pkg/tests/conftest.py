import time

import numpy as np
import pytest

from smoothinv.data import checker_backdoor, generate_synthetic_dataset, poison_dataset, split_dataset
from smoothinv.training import TrainConfig, model_init, train

TRAIN_SEED, TEST_SEED = 1, 2
POISON_SEED = 3
TARGET = 0

# Wall-clock seconds of expensive session fixtures, keyed by fixture name.
TIMINGS = {}
# Acceptance outcomes: criterion -> (passed, detail); printed after the run.
CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA, key=str):
        passed, detail = CRITERIA[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'} | {detail}")


@pytest.fixture(scope="session")
def train_set():
    return generate_synthetic_dataset(TRAIN_SEED, 10, 500)


@pytest.fixture(scope="session")
def test_set():
    return generate_synthetic_dataset(TEST_SEED, 10, 200, split="test")


@pytest.fixture(scope="session")
def eval_and_pool(test_set):
    """First 200 test images score perturbations; starting images come from the rest."""
    return split_dataset(test_set, 200)


@pytest.fixture(scope="session")
def trigger():
    return checker_backdoor(TARGET)


@pytest.fixture(scope="session")
def clean_model(train_set):
    started = time.perf_counter()
    m, _ = train(model_init(0), train_set, TrainConfig())
    TIMINGS["clean_model"] = time.perf_counter() - started
    return m


@pytest.fixture(scope="session")
def poisoned_model(train_set, trigger):
    started = time.perf_counter()
    poisoned = poison_dataset(train_set, trigger, 0.1, np.random.default_rng(POISON_SEED))
    m, _ = train(model_init(0), poisoned, TrainConfig())
    TIMINGS["poisoned_model"] = time.perf_counter() - started
    return m


@pytest.fixture(scope="session")
def start_images(eval_and_pool):
    """Ten starting images from victim classes, drawn with a fixed seed."""
    _, pool = eval_and_pool
    candidates = np.flatnonzero(pool.labels != TARGET)
    picks = np.random.default_rng(11).choice(candidates, size=10, replace=False)
    return [pool[int(i)] for i in picks]
