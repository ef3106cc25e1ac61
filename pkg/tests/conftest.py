import numpy as np
import pytest

from triaxbnn.datapipe import Dataset, TriaxSeries
from triaxbnn.triaxsim import make_strain_path


def make_series(rng, test_id, sigma3=100.0, e0=0.7, N=20, kind="cyclic-CU"):
    states = np.column_stack([sigma3 * (1 + 0.3 * rng.random(N + 1)),
                              sigma3 * rng.normal(size=N + 1),
                              rng.random(N + 1)])
    if kind.startswith("cyclic"):
        path = make_strain_path("cyclic", 0.01, n_cycles=max(1, N // 8), steps_per_branch=2)
        inputs = path.as_array()[:N]
        if len(inputs) < N:
            inputs = np.vstack([inputs, np.tile(inputs[-1], (N - len(inputs), 1))])
    else:
        inputs = make_strain_path("monotonic", 0.1, steps_per_branch=N).as_array()
    return TriaxSeries(test_id, kind, float(sigma3), float(e0), states, inputs)


def make_dataset(rng, M=3, N=20, sigma3s=(100.0, 200.0), kind="cyclic-CU"):
    return Dataset([make_series(rng, f"T{m}", sigma3s[m % len(sigma3s)], 0.6 + 0.05 * m, N, kind)
                    for m in range(M)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_ds(rng):
    return make_dataset(rng)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
