import numpy as np
import pytest

from nowcasting import nn, synthetic
from nowcasting.data import Dataset, MaskSpec, Observation, from_matrix
from nowcasting.errors import EmptyDataset, EmptyObservation, GridMismatch, NodeSetMismatch
from nowcasting.models import (
    ConvAutoencoderSpec,
    FunctionalDecoder,
    FunctionalDecoderSpec,
    InputScaler,
    LinearProjectionSpec,
)
from nowcasting.optim import TrainConfig
from nowcasting.pipeline import (
    CompletionConfig,
    backtest,
    calendar_theta,
    calibrate_codes,
    complete,
    completion_rmse,
    compress_autoencoder,
    compress_functional,
    compress_pca,
    corruption_check,
    detect_outliers,
    lattice,
    reconstruction_errors,
    reconstruction_rmse,
    rmse,
)
from nowcasting.pipeline.reports import days_csv, summary_json, summary_table_csv

FAST = TrainConfig(learning_rate=3e-3, patience=30, max_iterations=300, batch_size=32)


@pytest.fixture(scope="module")
def repo():
    ds, bad = synthetic.repo_curves(160, seed=1, n_outliers=4, spike=0.3)
    spec = FunctionalDecoderSpec(d=1, f=4, coord_transforms=("log",))
    res = compress_functional(ds[:120], spec, TrainConfig(learning_rate=3e-3, patience=100,
                                                          max_iterations=2000, batch_size=16))
    return ds, bad, res


# ---------------------------------------------------------------- metrics

def test_rmse_basics():
    a = np.array([1.0, 2.0, 3.0])
    assert rmse(a, a) == 0.0
    assert rmse(a, a + 0.3) == pytest.approx(0.3)
    with pytest.raises(NodeSetMismatch):
        rmse(a, a[:2])


def test_completion_rmse_is_order_invariant():
    obs = synthetic.smiles(1, seed=0)[0]
    perm = np.random.default_rng(0).permutation(obs.m)
    shuffled = Observation(obs.date, obs.coords[perm], obs.values[perm] + 0.01)
    assert completion_rmse(obs, shuffled) == pytest.approx(0.01)
    with pytest.raises(NodeSetMismatch):
        completion_rmse(obs, obs.subset(np.arange(5)))


# ---------------------------------------------------------------- compression

def test_functional_compression_fits_repo_curves(repo):
    ds, _, res = repo
    values = np.concatenate([o.values for o in ds[:120]])
    assert res.mean_rmse < 0.1 * np.ptp(values)
    assert len(res.codes) == 120 and res.codes.shape[1] == 4
    assert res.dates == ds[:120].dates


def test_functional_single_observation():
    obs = synthetic.smiles(1, seed=2)[0]
    ds = Dataset((obs,), 2)
    spec = FunctionalDecoderSpec(d=2, f=2, coord_transforms=("log", "identity"))
    res = compress_functional(ds, spec, TrainConfig(learning_rate=1e-2, max_iterations=400, patience=50))
    assert len(res.codes) == 1
    # recalibrating the stored code cannot make it worse, and a cold start lands close by
    warm = complete(res.model, obs, res.codes[0], truth=obs)
    assert warm.rmse <= res.rmse[0] + 1e-12
    cold = complete(res.model, obs, np.zeros(2), truth=obs)
    assert abs(cold.rmse - res.rmse[0]) <= 0.05 * res.rmse[0]


def test_functional_accepts_incomplete_observations():
    ds = synthetic.smiles(40, seed=5)
    rng = np.random.default_rng(0)
    thinned = Dataset(tuple(o.subset(np.sort(rng.choice(o.m, 60, replace=False))) for o in ds), 2)
    spec = FunctionalDecoderSpec(d=2, f=3, coord_transforms=("log", "identity"))
    res = compress_functional(thinned, spec, TrainConfig(max_iterations=20, patience=5))
    assert np.all(np.isfinite(res.rmse))


def test_linear_autoencoder_realisable_case():
    rng = np.random.default_rng(0)
    codes = rng.standard_normal((240, 2))
    basis = rng.standard_normal((2, 6))
    values = 1.0 + codes @ basis
    ds = from_matrix(synthetic.business_days(240), np.arange(6.0), values)
    res = compress_autoencoder(ds, LinearProjectionSpec(6, 2),
                               TrainConfig(learning_rate=1e-2, patience=200, max_iterations=3000))
    assert np.sqrt(np.mean(res.rmse ** 2)) < 1e-3


def test_autoencoder_rejects_moving_grid():
    with pytest.raises(GridMismatch):
        compress_autoencoder(synthetic.smiles(10), "linear", FAST)


def test_conv_autoencoder_does_not_overfit():
    ds = synthetic.swaptions(260, seed=3)
    train, test = ds[:200], ds[200:]
    pre = TrainConfig(learning_rate=3e-3, patience=10, max_iterations=25, batch_size=32)
    res = compress_autoencoder(train, ConvAutoencoderSpec(f=8), TrainConfig(
        learning_rate=3e-3, patience=20, max_iterations=80, batch_size=32, penalty=0.1), pretrain_cfg=pre)
    assert len(res.stage_histories) == 4
    test_err = np.mean([reconstruction_rmse(o, res.model) for o in test])
    assert test_err < 3 * res.mean_rmse


def test_pca_compression():
    ds = synthetic.swaptions(50, seed=0)
    res = compress_pca(ds, 8)
    assert res.codes.shape == (50, 8)
    assert res.mean_rmse < 1.0


# ---------------------------------------------------------------- completion

def test_completion_never_worse_than_initial(repo):
    ds, _, res = repo
    rng = np.random.default_rng(1)
    partials = [o.subset(np.sort(rng.choice(o.m, 4, replace=False))) for o in ds[120:130]]
    inits = rng.standard_normal((10, 4))
    _, loss, initial, its = calibrate_codes(res.model, partials, inits)
    assert np.all(loss <= initial)
    assert np.all(its <= 1000)


def test_completion_reproduces_training_reconstruction(repo):
    ds, _, res = repo
    for i in (0, 50, 100):
        obs = ds[i]
        out = complete(res.model, obs, np.zeros(4), truth=obs)
        assert out.rmse <= 1e-6 + 1.1 * res.rmse[i]


def test_completion_warm_start_is_fixed_point(repo):
    ds, _, res = repo
    obs = ds[10]
    stored = res.model.stored_code(obs.date)
    out = complete(res.model, obs, stored, CompletionConfig(), truth=obs)
    assert out.loss <= out.initial_loss
    assert out.rmse <= res.rmse[10] + 1e-12


def test_completion_needs_points(repo):
    with pytest.raises(EmptyObservation):
        complete(repo[2].model, None)


def test_completion_decodes_on_new_lattice(repo):
    ds, _, res = repo
    obs = ds[130]
    query = Observation(obs.date, np.linspace(0.05, 1.5, 30)[:, None], np.zeros(30))
    out = complete(res.model, obs.subset([0, 3, 6, 9]), None, query=query)
    assert out.values.shape == (30,) and np.all(np.isfinite(out.values))


def test_grid_model_completion_from_visible_nodes():
    ds = synthetic.swaptions(120, seed=1)
    res = compress_pca(ds[:100], 4)
    obs = ds[110]
    vis = obs.subset(np.arange(0, 80, 4))
    out = complete(res.model, vis, res.model.encode_observation(ds[109]), truth=obs)
    assert out.values.shape == (80,)
    assert out.rmse < 5.0


# ---------------------------------------------------------------- outliers

def test_detect_flags_injected_outliers(repo):
    ds, bad, res = repo
    report = detect_outliers(ds, res.model, 0.05)
    assert report.flagged == bad
    assert sorted(report.corrected) == bad


def test_threshold_extremes(repo):
    ds, _, res = repo
    sub = ds[:15]
    errors = reconstruction_errors(sub, res.model)
    assert detect_outliers(sub, res.model, np.inf, errors=errors).flagged == []
    everything = detect_outliers(sub, res.model, 0.0, errors=errors)
    assert everything.flagged == sub.dates
    obs = sub[0]
    np.testing.assert_allclose(everything.corrected[obs.date].values,
                               res.model.decode(errors[0][1], obs.coords))
    # raw data untouched
    assert sub[0].values is obs.values
    with pytest.raises(ValueError):
        detect_outliers(sub, res.model, -1.0, errors=errors)


def test_corruption_degenerate_cases(repo):
    ds, _, res = repo
    obs = ds[140]
    same = corruption_check(res.model, obs, 4, 1.0, seed=0)
    assert same.corrupted_vs_original == 0.0
    assert same.corrected_vs_original == pytest.approx(same.reconstruction_rmse)
    none = corruption_check(res.model, obs, 0, 2.0, seed=0)
    assert none.corrected_vs_original == pytest.approx(none.reconstruction_rmse)
    assert none.corrupted_vs_corrected == pytest.approx(none.reconstruction_rmse)
    with pytest.raises(ValueError):
        corruption_check(res.model, obs, obs.m + 1, 2.0, seed=0)


# ---------------------------------------------------------------- theta

def _constant_in_t_model(sigma=0.2):
    spec = FunctionalDecoderSpec(d=2, f=1, coord_transforms=("log", "identity"))
    scaler = InputScaler.fit(np.array([[0.1, -0.5], [2.0, 0.5]]), spec.coord_transforms)
    params = nn.init_params(spec.net(), 0, "glorot_normal")
    params["hidden1.weight"][:, 1] = 0.0  # no dependence on the maturity input
    return FunctionalDecoder(spec, params, scaler, value_shift=sigma, value_scale=0.01)


def test_theta_product_rule_for_flat_term_structure():
    model = _constant_in_t_model()
    loc = lattice((0.1, 2.0), (-0.5, 0.5), 5, 5)
    res = calendar_theta(model, [0.3], loc)
    sigma = model.decode([0.3], loc)
    np.testing.assert_allclose(res.theta, sigma ** 2, rtol=1e-12)
    assert res.all_positive


# ---------------------------------------------------------------- backtest

def test_backtest_full_visibility_matches_reconstruction(repo):
    ds, _, res = repo
    rep = backtest(ds[:120], ds[120:130], {"functional": res.model}, MaskSpec("keep_fraction", 1.0))
    for d in rep.records("functional"):
        assert d.completion_rmse == pytest.approx(d.reconstruction_rmse, rel=1e-12)


def test_backtest_empty_test_set(repo):
    ds, _, res = repo
    with pytest.raises(EmptyDataset):
        backtest(ds[:120], ds[:0], {"functional": res.model}, MaskSpec("keep_fraction", 0.5))


def test_backtest_report_shape_swaption():
    ds = synthetic.swaptions(130, seed=4)
    train, test = ds[:110], ds[110:]
    tiny = TrainConfig(learning_rate=3e-3, patience=5, max_iterations=8, batch_size=32, penalty=0.1)
    fspec = FunctionalDecoderSpec(d=2, f=8, coord_transforms=("log", "log"))
    xspec = FunctionalDecoderSpec(d=2, f=8, n_exogenous=1, coord_transforms=("log", "log"))
    models = {
        "pca": compress_pca(train, 8).model,
        "linear": compress_autoencoder(train, LinearProjectionSpec(80, 8), tiny).model,
        "conv": compress_autoencoder(train, ConvAutoencoderSpec(f=8), tiny, pretrain_cfg=tiny).model,
        "functional": compress_functional(train, fspec, tiny).model,
        "functional_exog": compress_functional(train, xspec, tiny).model,
    }
    mask = MaskSpec("keep_nodes", synthetic.SWAPTION_UNMASKED)
    rep = backtest(train, test, models, mask, CompletionConfig(max_iterations=50), outlier_threshold=5.0)
    assert rep.methods == list(models)
    for name, s in rep.summaries.items():
        assert s.worst_completion_test >= s.avg_completion_test
        assert s.worst_compression_test >= s.avg_compression_test
        assert s.worst_completion_test_date in test.dates
        assert np.isfinite(s.avg_compression_train)
        assert all(d.n_visible == 8 for d in rep.records(name))
        assert rep.worst_completion[name].visible.sum() == 8
    table = summary_table_csv(rep).splitlines()
    assert table[0].split(",")[1:] == list(models)
    assert len(days_csv(rep).splitlines()) == 1 + 5 * len(test)
    assert "outlier_flags" in summary_json(rep)


def test_backtest_baselines_only(repo):
    ds = synthetic.smiles(30, seed=0)
    rep = backtest(ds[:20], ds[20:], {}, MaskSpec("keep_count_uniform", 20),
                   baselines=("linear_interpolation", "gp", "gp_flat"))
    assert rep.methods == ["linear_interpolation", "gp", "gp_flat"]
    assert all(np.isnan(d.reconstruction_rmse) for d in rep.days)


def test_backtest_is_deterministic(repo):
    ds, _, res = repo
    args = (ds[:120], ds[120:126], {"functional": res.model}, MaskSpec("keep_fraction", 0.3))
    assert days_csv(backtest(*args, seed=3)) == days_csv(backtest(*args, seed=3))
    assert days_csv(backtest(*args, seed=3)) != days_csv(backtest(*args, seed=4))
