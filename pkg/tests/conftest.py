import numpy as np
import pytest

from rfn.data import Instance

# lines reported by the acceptance suite, printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


def random_instance(rng, dim=3, n_events=5, p_obs=1.0, horizon=1.0, iid="0"):
    times = np.sort(rng.choice(np.arange(1, 200), size=n_events, replace=False)) / 200 * horizon
    values = rng.normal(size=(dim, n_events))
    mask = (rng.random((dim, n_events)) < p_obs).astype(float)
    for k in range(n_events):
        if mask[:, k].sum() == 0:
            mask[rng.integers(dim), k] = 1.0
    return Instance(times, values * mask, mask, iid)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
