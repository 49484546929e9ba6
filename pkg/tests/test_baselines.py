import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nowcasting import synthetic
from nowcasting.baselines import (
    GpHyperparams,
    gp_fit,
    gp_predict,
    kernel,
    linear_interpolate,
    log_marginal_likelihood,
    triangulate,
)
from nowcasting.errors import DegenerateGeometry

from conftest import make_obs


def _scatter(seed, n=12):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 1, (n, 2))
    vals = np.sin(3 * pts[:, 0]) + pts[:, 1] ** 2
    return make_obs("2020-01-01", pts, vals)


def test_exact_at_vertices():
    obs = _scatter(0)
    vals, outside = linear_interpolate(obs, obs.coords)
    np.testing.assert_allclose(vals, obs.values, atol=1e-12)
    assert not outside.any()


def test_triangle_centroid():
    obs = make_obs("2020-01-01", [[0, 0], [1, 0], [0, 1]], [1.0, 2.0, 3.0])
    vals, _ = linear_interpolate(obs, [[1 / 3, 1 / 3]])
    assert vals[0] == pytest.approx(2.0)


def test_outside_hull_is_nearest_and_flagged():
    obs = make_obs("2020-01-01", [[0, 0], [1, 0], [0, 1]], [1.0, 2.0, 3.0])
    vals, outside = linear_interpolate(obs, [[2.0, 0.1], [0.2, 0.2]])
    assert outside.tolist() == [True, False]
    assert vals[0] == 2.0


def test_collinear_points_raise():
    obs = make_obs("2020-01-01", [[0, 0], [1, 1], [2, 2]], [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateGeometry):
        linear_interpolate(obs, [[0.5, 0.5]])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_barycentric_properties(seed):
    obs = _scatter(seed)
    tri = triangulate(obs.coords)
    q = np.random.default_rng(seed + 1).uniform(0, 1, (20, 2))
    s, w = tri.barycentric(q)
    inside = s >= 0
    np.testing.assert_allclose(w[inside].sum(axis=1), 1.0)
    assert np.all(w[inside] >= 0)
    vals, _ = linear_interpolate(obs, q)
    vv = obs.values[tri.order][tri.triangles[s[inside]]]
    assert np.all(vals[inside] >= vv.min(axis=1) - 1e-12)
    assert np.all(vals[inside] <= vv.max(axis=1) + 1e-12)


def test_triangulation_independent_of_input_order():
    obs = _scatter(3)
    perm = np.random.default_rng(0).permutation(obs.m)
    other = make_obs(obs.date, obs.coords[perm], obs.values[perm])
    q = np.random.default_rng(1).uniform(0, 1, (30, 2))
    np.testing.assert_allclose(linear_interpolate(obs, q)[0], linear_interpolate(other, q)[0], atol=1e-14)


def test_gp_kernel_amplitude_is_unsquared():
    k = kernel(np.zeros((1, 2)), np.zeros((1, 2)), sigma=0.3, length=1.0)
    assert k[0, 0] == pytest.approx(0.3)


def test_gp_predict_matches_dense_solve():
    obs = _scatter(4, n=15)
    hp = GpHyperparams(0.7, 0.4, 1e-8)
    q = np.random.default_rng(5).uniform(0, 1, (9, 2))
    kxx = kernel(obs.coords, obs.coords, hp.sigma, hp.length) + hp.jitter * hp.sigma * np.eye(obs.m)
    ref = kernel(q, obs.coords, hp.sigma, hp.length) @ np.linalg.solve(kxx, obs.values)
    np.testing.assert_allclose(gp_predict(hp, obs, q), ref, rtol=1e-8, atol=1e-10)


def test_gp_fit_maximises_likelihood():
    obs = _scatter(6, n=20)
    hp = gp_fit(obs)
    best = log_marginal_likelihood(hp, obs)
    for f_s, f_l in [(1.3, 1.0), (0.7, 1.0), (1.0, 1.3), (1.0, 0.7)]:
        other = GpHyperparams(hp.sigma * f_s, hp.length * f_l, hp.jitter)
        assert log_marginal_likelihood(other, obs) <= best + 1e-6


def test_gp_interpolates_visible_points():
    # random values keep the fitted kernel well conditioned; for very smooth data the
    # jitter term bounds the interpolation error instead (jitter * |K^-1 y|)
    rng = np.random.default_rng(7)
    obs = make_obs("2020-01-01", rng.uniform(0, 1, (15, 2)), rng.standard_normal(15))
    hp = gp_fit(obs)
    np.testing.assert_allclose(gp_predict(hp, obs, obs.coords), obs.values, atol=1e-6)


def test_gp_long_length_scale_is_nearly_constant():
    obs = _scatter(8, n=10)
    centred = obs.with_values(obs.values - obs.values.mean())
    diam = np.sqrt(2.0)
    hp = GpHyperparams(1.0, 1e6 * diam, 1e-4)
    pred = gp_predict(hp, centred, np.random.default_rng(0).uniform(0, 1, (10, 2)))
    assert np.ptp(pred) < 1e-3


def test_gp_flat_extrapolation():
    obs = make_obs("2020-01-01", [[0, 0], [1, 0], [0, 1], [1, 1]], [1.0, 2.0, 3.0, 4.0])
    hp = GpHyperparams(1.0, 0.5)
    flat = gp_predict(hp, obs, [[3.0, 3.0], [0.5, 0.5]], extrapolation="flat")
    full = gp_predict(hp, obs, [[3.0, 3.0], [0.5, 0.5]])
    assert flat[0] == 4.0
    assert flat[1] == pytest.approx(full[1])


def test_baselines_on_smile():
    obs = synthetic.smiles(1, seed=0)[0]
    vals, _ = linear_interpolate(obs.subset(np.arange(0, obs.m, 3)), obs.coords)
    assert np.sqrt(np.mean((vals - obs.values) ** 2)) < 0.05


def test_linear_interpolation_on_curves():
    obs = make_obs("2020-01-01", [[0.5], [0.1], [1.0]], [2.0, 1.0, 3.0])
    vals, extrap = linear_interpolate(obs, np.array([[0.3], [0.75], [0.05], [2.0]]))
    np.testing.assert_allclose(vals, [1.5, 2.5, 1.0, 3.0])
    np.testing.assert_array_equal(extrap, [False, False, True, True])
    hp = GpHyperparams(1.0, 0.5)
    flat = gp_predict(hp, obs, np.array([[2.0]]), extrapolation="flat")
    assert flat[0] == 3.0
