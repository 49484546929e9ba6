"""Per-surface interpolation benchmarks that ignore the historical data set.

Both work in the plane of the first two coordinates, which for implied
volatilities are maturity ``T`` and log-moneyness ``ln m``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize_scalar
from scipy.spatial import Delaunay, QhullError

from .data import Observation
from .errors import DegenerateGeometry, SingularKernel


@dataclass(frozen=True, eq=False)
class Triangulation:
    vertices: np.ndarray   # (n, 2), lexicographically sorted
    triangles: np.ndarray  # (t, 3) indices into vertices
    hull_edges: np.ndarray  # (h, 2)
    order: np.ndarray      # vertices = points[order]
    _delaunay: Delaunay
    _simplex_map: np.ndarray  # qhull simplex index -> row of ``triangles`` (-1 if dropped)

    def locate(self, queries) -> np.ndarray:
        """Triangle index per query, -1 outside the hull."""
        s = self._delaunay.find_simplex(np.atleast_2d(np.asarray(queries, dtype=float)))
        return np.where(s >= 0, self._simplex_map[s], -1)

    def barycentric(self, queries):
        """Triangle index and barycentric weights for each query (-1 and NaN outside)."""
        q = np.asarray(queries, dtype=float)
        s = self.locate(q)
        weights = np.full((len(q), 3), np.nan)
        inside = s >= 0
        tr = self.vertices[self.triangles[s[inside]]]
        a, b, c = tr[:, 0], tr[:, 1], tr[:, 2]
        v0, v1, v2 = b - a, c - a, q[inside] - a
        den = v0[:, 0] * v1[:, 1] - v1[:, 0] * v0[:, 1]
        wb = (v2[:, 0] * v1[:, 1] - v1[:, 0] * v2[:, 1]) / den
        wc = (v0[:, 0] * v2[:, 1] - v2[:, 0] * v0[:, 1]) / den
        w = np.stack([1.0 - wb - wc, wb, wc], axis=1)
        # find_simplex tolerates points a hair outside a triangle
        w = np.clip(w, 0.0, None)
        weights[inside] = w / w.sum(axis=1, keepdims=True)
        return s, weights


def triangulate(points) -> Triangulation:
    pts = np.asarray(points, dtype=float)[:, :2]
    if len(pts) < 3:
        raise DegenerateGeometry(f"need at least 3 points, got {len(pts)}")
    # sorting removes the dependence of co-circular tie breaks on input order
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]
    try:
        tri = Delaunay(pts)
    except QhullError as exc:
        raise DegenerateGeometry("points are collinear or coincident") from exc
    simplices = tri.simplices
    u = pts[simplices[:, 1]] - pts[simplices[:, 0]]
    v = pts[simplices[:, 2]] - pts[simplices[:, 0]]
    area = 0.5 * np.abs(u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])
    keep = area > 0
    if not keep.any():
        raise DegenerateGeometry("no triangle of positive area")
    remap = np.where(keep, np.cumsum(keep) - 1, -1)
    return Triangulation(pts, simplices[keep], tri.convex_hull, order, tri, remap)


def _nearest(points, values, queries):
    d2 = ((queries[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    return values[np.argmin(d2, axis=1)]


def _interp_1d(x, y, q):
    # curves: piecewise linear between sorted nodes, flat beyond the ends
    order = np.argsort(x, kind="stable")
    x, y = x[order], y[order]
    if len(x) < 2:
        raise DegenerateGeometry(f"need at least 2 points, got {len(x)}")
    return np.interp(q, x, y), (q < x[0]) | (q > x[-1])


def _outside(points, queries) -> np.ndarray:
    if points.shape[1] == 1:
        return (queries[:, 0] < points[:, 0].min()) | (queries[:, 0] > points[:, 0].max())
    return triangulate(points).locate(queries) < 0


def linear_interpolate(visible: Observation, queries):
    """Barycentric interpolation on the Delaunay triangulation of the visible points
    (plain piecewise-linear interpolation for one-dimensional curves).

    Returns ``(values, extrapolated)``; queries outside the convex hull take the
    nearest visible value and are flagged in ``extrapolated``.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=float))[:, :2]
    if visible.d == 1:
        return _interp_1d(visible.coords[:, 0], visible.values, q.reshape(len(q), -1)[:, 0])
    tri = triangulate(visible.coords)
    vals = visible.values[tri.order]
    s, w = tri.barycentric(q)
    out = np.empty(len(q))
    inside = s >= 0
    out[inside] = np.einsum("ij,ij->i", w[inside], vals[tri.triangles[s[inside]]])
    out[~inside] = _nearest(tri.vertices, vals, q[~inside])
    return out, ~inside


# --------------------------------------------------------------------------
# Gaussian process regression

JITTER_START = 1e-8
JITTER_MAX = 1e-4


@dataclass(frozen=True)
class GpHyperparams:
    sigma: float
    length: float
    jitter: float = JITTER_START

    def __post_init__(self):
        if not (self.sigma > 0 and self.length > 0):
            raise ValueError("GP hyperparameters must be positive")


def sq_dists(a, b) -> np.ndarray:
    """``(T_i - T_j)^2 + (ln m_i - ln m_j)^2`` for coordinate rows ``(T, ln m)``."""
    a = np.atleast_2d(a)[:, :2]
    b = np.atleast_2d(b)[:, :2]
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)


def kernel(a, b, sigma: float, length: float) -> np.ndarray:
    # amplitude enters linearly, as sigma * exp(-|x - x'|^2 / l^2)
    return sigma * np.exp(-sq_dists(a, b) / length ** 2)


def _cholesky(corr: np.ndarray, jitter: float):
    n = len(corr)
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return np.linalg.cholesky(corr + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise SingularKernel(f"kernel not positive definite with jitter up to {JITTER_MAX}")


def _profile_loglik(x, y, length):
    """Log marginal likelihood maximised over sigma in closed form.

    With ``K = sigma (R + jitter I)`` the optimum is ``sigma = y' (R + jI)^-1 y / n``.
    """
    n = len(y)
    corr = np.exp(-sq_dists(x, x) / length ** 2)
    chol, jitter = _cholesky(corr, JITTER_START)
    alpha = solve_triangular(chol, y, lower=True)
    quad = float(alpha @ alpha)
    sigma = max(quad / n, 1e-300)
    logdet = 2.0 * np.sum(np.log(np.diag(chol))) + n * math.log(sigma)
    ll = -0.5 * quad / sigma - 0.5 * logdet - 0.5 * n * math.log(2 * math.pi)
    return ll, sigma, jitter


def gp_fit(visible: Observation, n_grid: int = 41) -> GpHyperparams:
    """Maximum-likelihood ``(sigma, l)`` for a zero-mean GP on the visible values."""
    x = visible.coords[:, :2]
    y = visible.values
    if len(y) < 2:
        raise ValueError("GP fit needs at least 2 visible points")
    d2 = sq_dists(x, x)
    if np.any(d2[np.triu_indices(len(y), 1)] == 0):
        raise ValueError("GP fit needs distinct locations")
    diam = math.sqrt(float(d2.max()))
    lo, hi = math.log(1e-2 * diam), math.log(1e1 * diam)

    def neg(log_l):
        try:
            return -_profile_loglik(x, y, math.exp(log_l))[0]
        except SingularKernel:
            return math.inf

    grid = np.linspace(lo, hi, n_grid)
    scores = np.array([neg(g) for g in grid])
    k = int(np.argmin(scores))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, n_grid - 1)]
    best_log_l = grid[k]
    if b > a:
        res = minimize_scalar(neg, bounds=(a, b), method="bounded", options={"xatol": 1e-6})
        if res.fun < scores[k]:
            best_log_l = float(res.x)
    length = math.exp(best_log_l)
    _, sigma, jitter = _profile_loglik(x, y, length)
    return GpHyperparams(sigma, length, jitter)


def log_marginal_likelihood(hp: GpHyperparams, visible: Observation) -> float:
    x, y = visible.coords[:, :2], visible.values
    k = kernel(x, x, hp.sigma, hp.length) + hp.jitter * hp.sigma * np.eye(len(y))
    chol = np.linalg.cholesky(k)
    alpha = solve_triangular(chol, y, lower=True)
    return float(-0.5 * alpha @ alpha - np.sum(np.log(np.diag(chol))) - 0.5 * len(y) * math.log(2 * math.pi))


def gp_predict(hp: GpHyperparams, visible: Observation, queries, extrapolation: str = "gp"):
    """Posterior mean ``K(X*, X) K(X, X)^-1 Y``.

    With ``extrapolation="flat"`` queries outside the convex hull of the
    visible points take the nearest visible value instead.
    """
    if extrapolation not in ("gp", "flat"):
        raise ValueError(f"unknown extrapolation mode {extrapolation!r}")
    x, y = visible.coords[:, :2], visible.values
    q = np.atleast_2d(np.asarray(queries, dtype=float))[:, :2]
    corr = np.exp(-sq_dists(x, x) / hp.length ** 2)
    chol, _ = _cholesky(corr, hp.jitter)
    # sigma cancels between K(X*, X) and K(X, X)^-1 when the jitter scales with it
    alpha = cho_solve((chol, True), y)
    out = np.exp(-sq_dists(q, x) / hp.length ** 2) @ alpha
    if extrapolation == "flat":
        outside = _outside(x, q)
        out[outside] = _nearest(x, y, q[outside])
    return out
