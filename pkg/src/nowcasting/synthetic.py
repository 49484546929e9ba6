"""Synthetic stand-ins for the three market data sets.

Each generator drives a smooth parametric shape with a few AR(1) latent
factors, so the data have a known low-dimensional structure.
"""
from __future__ import annotations

import datetime as _dt

import numpy as np

from .data import Dataset, Observation, from_matrix

SWAPTION_EXPIRIES = (1 / 12, 0.25, 0.5, 1.0, 2.0, 5.0, 7.0, 10.0, 20.0, 30.0)
SWAPTION_TENORS = (0.25, 1.0, 2.0, 5.0, 10.0, 15.0, 20.0, 30.0)
# liquid short-expiry nodes kept visible in the swaption completion exercise
SWAPTION_UNMASKED = ((1 / 12, 0.25), (1 / 12, 10.0), (1 / 12, 30.0), (0.5, 2.0),
                     (0.5, 15.0), (5.0, 1.0), (5.0, 20.0), (10.0, 5.0))


def business_days(n: int, start: str = "2015-01-02") -> list[str]:
    day = _dt.date.fromisoformat(start)
    out = []
    while len(out) < n:
        if day.weekday() < 5:
            out.append(day.isoformat())
        day += _dt.timedelta(days=1)
    return out


def ar1(n: int, k: int, rng: np.random.Generator, phi: float = 0.98) -> np.ndarray:
    """``(n, k)`` stationary AR(1) paths with unit marginal variance."""
    x = np.empty((n, k))
    x[0] = rng.standard_normal(k)
    scale = np.sqrt(1 - phi ** 2)
    for t in range(1, n):
        x[t] = phi * x[t - 1] + scale * rng.standard_normal(k)
    return x


def ssvi_vol(t, k, level, slope, rho, eta):
    """Implied volatility from an SSVI total variance slice at maturities ``t``."""
    atm = level * (1.0 + slope * (np.exp(-t / 0.5) - 0.3))
    theta = atm ** 2 * t
    phi = eta / np.sqrt(theta * (1.0 + theta))
    w = 0.5 * theta * (1 + rho * phi * k + np.sqrt((phi * k + rho) ** 2 + 1 - rho ** 2))
    return np.sqrt(w / t)


def smiles(n_days: int = 500, seed: int = 0, n_maturities: int = 7, n_strikes: int = 14,
           noise: float = 1e-4, with_forward: bool = False) -> Dataset:
    """Equity-like smiles on a moving (maturity, log-moneyness) grid.

    Maturities belong to monthly expiry cycles and shrink day by day; the
    strike range scales with the square root of maturity and jitters daily,
    so no two days share a node set.
    """
    rng = np.random.default_rng(seed)
    x = ar1(n_days, 4, rng)
    level = 0.2 * np.exp(0.2 * x[:, 0])
    slope = 0.25 * np.tanh(x[:, 1])
    rho = -0.55 + 0.25 * np.tanh(x[:, 2])
    eta = 0.9 * np.exp(0.15 * x[:, 3])
    log_fwd = np.cumsum(0.01 * rng.standard_normal(n_days))
    base_t = np.array([1, 2, 3, 6, 9, 12, 24][:n_maturities], dtype=float) / 12
    cycle = 21
    observations = []
    for day, date in enumerate(business_days(n_days)):
        t = base_t + (cycle - day % cycle) / 252.0
        u = np.linspace(-1.0, 1.0, n_strikes)
        tt, uu = np.meshgrid(t, u, indexing="ij")
        kk = 0.35 * np.sqrt(tt) * uu + 0.01 * rng.standard_normal(tt.shape)
        vol = ssvi_vol(tt, kk, level[day], slope[day], rho[day], eta[day])
        vol = vol + noise * rng.standard_normal(vol.shape)
        coords = np.column_stack([tt.ravel(), kk.ravel()])
        exog = np.full((coords.shape[0], 1), log_fwd[day]) if with_forward else None
        observations.append(Observation(date, coords, vol.ravel(), exog))
    return Dataset(tuple(observations), 2, coord_names=("c1", "c2"),
                   exog_names=("forward",) if with_forward else ())


def swaptions(n_days: int = 600, seed: int = 0, noise: float = 0.2) -> Dataset:
    """ATM normal swaption volatilities (bp) on the fixed 10 x 8 (expiry, tenor) grid.

    Each node carries the forward swap rate (in percent) as exogenous input;
    volatilities load on the forward level, so it is informative.
    """
    rng = np.random.default_rng(seed)
    x = ar1(n_days, 5, rng, phi=0.99)
    uu, tt = np.meshgrid(SWAPTION_EXPIRIES, SWAPTION_TENORS, indexing="ij")
    lu, lt = np.log1p(uu), np.log1p(tt)
    fwd_level = 1.0 + 0.8 * x[:, 4]
    fwd = fwd_level[:, None, None] + 0.08 * lt[None] * (1.0 + 0.3 * x[:, 1, None, None]) + 0.02 * lu[None]
    hump = np.exp(-((lu - 1.0) ** 2)) * np.exp(-0.3 * lt)
    vol = (70.0 * np.exp(0.15 * x[:, 0])[:, None, None]
           + 12.0 * x[:, 1, None, None] * np.exp(-lu)[None]
           + 15.0 * x[:, 2, None, None] * hump[None]
           + 6.0 * x[:, 3, None, None] * (lt / lt.max() - 0.5)[None]
           + 8.0 * fwd)
    vol = vol + noise * rng.standard_normal(vol.shape)
    grid = np.column_stack([uu.ravel(), tt.ravel()])
    return from_matrix(business_days(n_days), grid, vol.reshape(n_days, -1),
                       exog=fwd.reshape(n_days, -1, 1), grid_id="swaption10x8",
                       coord_names=("c1", "c2"), exog_names=("forward",))


def repo_curves(n_days: int = 400, seed: int = 0, n_points: int = 12, noise: float = 0.002,
                n_outliers: int = 6, spike: float = 0.15):
    """Repo-like curves on a moving time-to-expiry grid, with injected bad quotes.

    Returns ``(dataset, outlier_dates)``. An outlier day has a few quotes
    shifted by ``spike``.
    """
    rng = np.random.default_rng(seed)
    x = ar1(n_days, 4, rng)
    base = np.geomspace(7, 720, n_points) / 365.0
    dates = business_days(n_days)
    bad = set(rng.choice(np.arange(5, n_days), size=n_outliers, replace=False).tolist()) if n_outliers else set()
    observations = []
    for day, date in enumerate(dates):
        t = np.sort(base * (1 + 0.15 * rng.random(n_points)))
        lt = np.log(t / 0.1)
        y = (-0.4 + 0.15 * x[day, 0] + 0.08 * x[day, 1] * np.tanh(lt)
             + 0.05 * x[day, 2] * np.exp(-lt ** 2) + 0.03 * x[day, 3] * lt ** 2 / 10)
        y = y + noise * rng.standard_normal(n_points)
        if day in bad:
            hit = rng.choice(n_points, size=3, replace=False)
            y[hit] += spike * rng.choice([-1.0, 1.0], size=3)
        observations.append(Observation(date, t[:, None], y))
    ds = Dataset(tuple(observations), 1, coord_names=("c1",))
    return ds, sorted(dates[d] for d in bad)
