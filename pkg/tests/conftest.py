import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

os.environ.setdefault("CPOOL_DATA_DIR", "/root/data/mnist")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def brute_window_max(x: np.ndarray, r: int) -> np.ndarray:
    """(2r+1)-square max filter with edge replication, one output at a time."""
    b, c, h, w = x.shape
    out = np.empty_like(x)
    for i in range(h):
        for j in range(w):
            win = x[:, :, max(i - r, 0) : i + r + 1, max(j - r, 0) : j + r + 1]
            out[:, :, i, j] = win.max(axis=(2, 3))
    return out


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, passed: bool, detail: str) -> bool:
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
