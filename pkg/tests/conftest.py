import numpy as np
import pytest

from nowcasting import synthetic
from nowcasting.data import Dataset, Observation, from_matrix


def numeric_grad(fn, x, eps=1e-6, sample=None, seed=0):
    """Central differences of scalar ``fn`` with respect to array ``x`` (modified in place).

    With ``sample`` only that many random entries are differenced; the rest stay NaN.
    """
    g = np.full(x.shape, np.nan) if sample else np.zeros_like(x)
    flat = list(np.ndindex(x.shape))
    if sample and sample < len(flat):
        pick = np.random.default_rng(seed).choice(len(flat), size=sample, replace=False)
        flat = [flat[k] for k in pick]
    for i in flat:
        old = x[i]
        x[i] = old + eps
        up = fn()
        x[i] = old - eps
        down = fn()
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    keep = ~(np.isnan(a) | np.isnan(b))
    a, b = a[keep], b[keep]
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


@pytest.fixture
def curve_ds():
    """Moving-grid 1-D curves (small)."""
    ds, _ = synthetic.repo_curves(30, seed=3, n_outliers=0)
    return ds


@pytest.fixture
def grid_ds():
    rng = np.random.default_rng(0)
    grid = np.array([[u, t] for u in (1.0, 2.0, 3.0) for t in (1.0, 5.0)])
    dates = synthetic.business_days(12)
    values = 1.0 + 0.1 * rng.standard_normal((12, 6))
    return from_matrix(dates, grid, values, grid_id="g6")


def make_obs(date, coords, values, **kw):
    return Observation(date, np.asarray(coords, float).reshape(len(values), -1), np.asarray(values, float), **kw)


__all__ = ["numeric_grad", "rel_err", "make_obs", "Dataset"]


# filled by the acceptance module, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
