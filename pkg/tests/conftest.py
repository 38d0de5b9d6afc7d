import numpy as np
import pytest

from balance_att.data_model import Dataset


def make_dataset(n=200, p=5, seed=0, signal=0.5, intercept=True):
    """Small logistic-propensity dataset with a linear outcome."""
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(n, p))
    d = (rng.random(n) < 1 / (1 + np.exp(-signal * Z[:, 0]))).astype(float)
    d[:2] = [0.0, 1.0]
    y = Z @ rng.normal(size=p) + d + rng.normal(size=n)
    if not intercept:
        return Dataset(y, d, Z, tuple(f"z{j}" for j in range(p)))
    X = np.column_stack([np.ones(n), Z])
    return Dataset(y, d, X, ("(intercept)",) + tuple(f"z{j}" for j in range(p)), 0)


def fd_max_rel_error(loss, x, h=1e-6):
    """Largest relative gap between the analytic gradient and central differences."""
    _, g = loss(x)
    worst = 0.0
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        fd = (loss(x + e)[0] - loss(x - e)[0]) / (2 * h)
        worst = max(worst, abs(fd - g[j]) / max(1.0, abs(g[j])))
    return worst


@pytest.fixture
def ds_small():
    return make_dataset()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
