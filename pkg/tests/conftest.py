import time

import numpy as np
import pytest

from unlearnable.data import Dataset, synth_blobs

SESSION_START = time.monotonic()
CRITERIA_LINES = []


def pytest_collection_modifyitems(config, items):
    # the whole-suite timing criterion has to run after everything else
    last = [it for it in items if "suite_runtime" in it.name]
    rest = [it for it in items if "suite_runtime" not in it.name]
    items[:] = rest + last


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA_LINES:
            terminalreporter.write_line(line)
    terminalreporter.write_line(f"suite wall time: {time.monotonic() - SESSION_START:.1f} s")


def close_blobs(k=4, dims=16, sep=0.1, spread=0.05, n_train=200, n_test=100, seed=0):
    """Blobs whose centers sit close together, so an epsilon=0.1 class-wise
    shortcut is stronger than the true class signal."""
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((k, dims))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    centers = 0.5 + sep * dirs * np.sqrt(dims) / 2
    train = synth_blobs(k, n_train, dims, spread, seed + 1, centers, "close-train")
    test = synth_blobs(k, n_test, dims, spread, seed + 2, centers, "close-test")
    return train, test


@pytest.fixture(scope="session")
def close_blob_data():
    return close_blobs()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_images(n=6, k=3, shape=(1, 4, 4), seed=0):
    r = np.random.default_rng(seed)
    x = r.uniform(0, 1, size=(n, *shape))
    x[0, 0, 0, 0] = 0.0
    x[0, 0, 0, 1] = 1.0
    return Dataset(x, np.arange(n) % k, k, "tiny")
