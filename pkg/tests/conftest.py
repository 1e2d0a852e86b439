import numpy as np
import pytest

from hawkes_gc.core import Dataset, EventSequence, HawkesParams
from hawkes_gc.likelihood import event_intensities

# Lines printed by the acceptance suite, echoed again in the terminal summary.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)


def random_dataset(rng, d, n_seq=2, max_events=30, ties=True):
    seqs = []
    for s in range(n_seq):
        horizon = float(rng.uniform(5, 20))
        n = int(rng.integers(5, max_events))
        times = np.sort(rng.uniform(0, horizon, n))
        if ties and n > 3:
            times[3] = times[2]
        seqs.append(EventSequence(str(s), horizon, times, rng.integers(0, d, n)))
    return Dataset.of(seqs, d)


def random_feasible(rng, d, negative=True, margin=0.0, n_seq=2):
    """Random (params, dataset) whose surrogate intensity exceeds `margin` at every event."""
    data = random_dataset(rng, d, n_seq)
    while True:
        lo = -0.5 if negative else 0.0
        params = HawkesParams(rng.uniform(0.1, 1.0, d), rng.uniform(lo, 0.5, (d, d)), rng.uniform(0.3, 2.0))
        if np.min(event_intensities(params, data)) > margin:
            return params, data


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def sign_example():
    mu = np.array([0.2, 0.5, 0.05])
    A = np.array([[0.1, 0.2, -0.3], [-0.1, 0.1, 0.0], [0.5, 0.0, 0.5]])
    return HawkesParams(mu, A, 0.6)
