"""Acceptance checks, one test per criterion.

Each test prints a single ``CRITERION n PASS|FAIL ...`` line with the measured
numbers; the lines are repeated in the pytest terminal summary. Run alone with

    pytest tests/test_acceptance.py -v

Criterion 6 needs the public equity data set; point NOWCAST_EQUITY_CSV at it.
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import conftest
from conftest import numeric_grad, rel_err
from nowcasting import cli, nn, synthetic
from nowcasting.baselines import GpHyperparams, gp_fit, gp_predict, kernel
from nowcasting.data import MaskSpec, from_matrix
from nowcasting.models import (
    ConvAutoencoder,
    ConvAutoencoderSpec,
    FunctionalDecoder,
    FunctionalDecoderSpec,
    InputScaler,
    LinearProjection,
    LinearProjectionSpec,
    save_model,
)
from nowcasting.optim import TrainConfig
from nowcasting.pipeline import (
    backtest,
    calendar_theta,
    compress_autoencoder,
    compress_functional,
    compress_pca,
    corruption_check,
    detect_outliers,
    lattice,
    reconstruction_errors,
    total_variance,
)
from nowcasting.pipeline.reports import TABLE_ROWS, days_csv, summary_table_csv

ROOT = Path(__file__).resolve().parents[1]


def record(n, ok, detail):
    status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
    line = f"CRITERION {n} {status} {detail}"
    print(line)
    conftest.ACCEPTANCE_LINES.append(line)
    return ok


# --------------------------------------------------------------------------
# shared smile model (criteria 5, 7, 9)

SMILE_TRAIN, SMILE_TEST = 400, 100
SMILE_CFG = TrainConfig(learning_rate=1e-3, patience=100, max_iterations=1000, batch_size=64, seed=0)


@pytest.fixture(scope="module")
def smile_model():
    ds = synthetic.smiles(SMILE_TRAIN + SMILE_TEST, seed=7)
    train, test = ds[:SMILE_TRAIN], ds[SMILE_TRAIN:]
    spec = FunctionalDecoderSpec(d=2, f=4, coord_transforms=("log", "identity"))
    t0 = time.perf_counter()
    res = compress_functional(train, spec, SMILE_CFG)
    return res, train, test, time.perf_counter() - t0


# --------------------------------------------------------------------------

def _layer_errors():
    errs = {}
    rng = np.random.default_rng(0)
    cases = [("dense_" + act, [nn.dense("d", 4, 3, act)], (3, 4)) for act in nn.ACTIVATIONS]
    cases += [("conv", [nn.conv2d("c", 2, 3, (3, 2), "softplus")], (2, 2, 5, 4)),
              ("deconv", [nn.deconv2d("t", 3, 2, (3, 2), "softplus")], (2, 3, 2, 3))]
    for name, net, shape in cases:
        params = nn.init_params(net, 1)
        params = {k: p + 0.05 * rng.standard_normal(p.shape) for k, p in params.items()}
        x = rng.standard_normal(shape)
        proj = rng.standard_normal(nn.forward(net, params, x)[0].shape)

        def loss():
            return float(np.sum(nn.forward(net, params, x)[0] * proj))

        _, tape = nn.forward(net, params, x)
        grads, gx = nn.backward(tape, proj, params)
        e = [rel_err(grads[k], numeric_grad(loss, params[k])) for k in params]
        errs[name] = max(e + [rel_err(gx, numeric_grad(loss, x))])
    return errs


def _functional_error():
    rng = np.random.default_rng(3)
    spec = FunctionalDecoderSpec(d=2, f=3, n_exogenous=1, coord_transforms=("log", "identity"))
    coords = np.column_stack([rng.uniform(0.1, 2, 8), rng.uniform(-0.3, 0.3, 8)])
    exog = rng.uniform(0, 1, (8, 1))
    scaler = InputScaler.fit(np.column_stack([coords, exog]), ("log", "identity", "identity"))
    model = FunctionalDecoder(spec, nn.init_params(spec.net(), 2, "glorot_normal"), scaler,
                              value_shift=0.2, value_scale=0.05)
    codes = rng.standard_normal((2, 3))
    owner = np.repeat([0, 1], 4)
    z, _ = model.features(coords, exog)
    proj = rng.standard_normal(8)

    def loss():
        return float(model.forward(model.params, codes, owner, z)[0] @ proj)

    _, tape = model.forward(model.params, codes, owner, z)
    grads, gc, _ = model.backward(model.params, tape, proj)
    e = [rel_err(grads[k], numeric_grad(loss, p)) for k, p in model.params.items()]
    dc = np.zeros_like(codes)
    np.add.at(dc, owner, gc)
    return max(e + [rel_err(dc, numeric_grad(loss, codes))])


def _grid_error(model, values):
    x = model._net_input(values)
    proj = np.random.default_rng(4).standard_normal(values.shape)

    def loss():
        return float(np.sum(model._net_output(nn.forward(model.net, model.params, x)[0]) * proj))

    out, tape = nn.forward(model.net, model.params, x)
    grads, _ = nn.backward(tape, (model.value_scale * proj).reshape(out.shape), model.params)
    return max(rel_err(grads[k], numeric_grad(loss, p, sample=30)) for k, p in model.params.items())


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    errs = _layer_errors()
    errs["functional"] = _functional_error()
    rng = np.random.default_rng(5)
    errs["conv_autoencoder"] = _grid_error(
        ConvAutoencoder(ConvAutoencoderSpec(f=3), seed=1, value_shift=0.5, value_scale=2.0),
        rng.standard_normal((2, 80)))
    errs["linear_projection"] = _grid_error(
        LinearProjection(LinearProjectionSpec(7, 2), seed=1, value_shift=-1.0, value_scale=0.5),
        rng.standard_normal((3, 7)))
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-4 and elapsed < 10
    assert record(1, ok, f"max rel err {errs[worst]:.2e} ({worst}) over {len(errs)} cases "
                         f"(tol 1e-4); {elapsed:.1f}s (< 10s)")


def test_criterion_2_pca_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    m, n = 20, 500
    q, _ = np.linalg.qr(rng.standard_normal((m, m)))
    y = (rng.standard_normal((n, m)) * np.geomspace(3, 0.05, m)) @ q.T + 1.0
    ds = from_matrix(synthetic.business_days(n), np.arange(m, dtype=float)[:, None], y)
    evals = np.linalg.eigvalsh(np.cov(y, rowvar=False, ddof=0))[::-1]
    pca = compress_pca(ds, 3).model
    pca_mse = float(np.mean(np.sum((pca.autoencode(y)[1] - y) ** 2, axis=1)))
    res = compress_autoencoder(ds, LinearProjectionSpec(m, 3),
                               TrainConfig(learning_rate=1e-2, patience=100, max_iterations=3000, batch_size=64))
    lin_mse = float(np.mean(np.sum((res.model.autoencode(y)[1] - y) ** 2, axis=1)))
    ratio = lin_mse / pca_mse - 1
    eig_gap = abs(pca_mse - evals[3:].sum())
    elapsed = time.perf_counter() - t0
    ok = abs(ratio) <= 0.05 and eig_gap <= 1e-8 and elapsed < 30
    assert record(2, ok, f"linear/PCA MSE rel diff {ratio:.4f} (tol 0.05); "
                         f"|PCA MSE - discarded eigenvalues| {eig_gap:.1e} (tol 1e-8); {elapsed:.1f}s")


def test_criterion_3_gp_oracle():
    t0 = time.perf_counter()
    worst_mean, worst_interp, worst_cond = 0.0, 0.0, 0.0
    for i in range(50):
        rng = np.random.default_rng(1000 + i)
        n = int(rng.integers(5, 30))
        x = np.column_stack([rng.uniform(0, 2, n), rng.uniform(-0.5, 0.5, n)])
        obs = conftest.make_obs("2020-01-01", x, rng.standard_normal(n))
        q = np.column_stack([rng.uniform(0, 2, 20), rng.uniform(-0.5, 0.5, 20)])
        # length scales below the point spread keep cond(K) small enough that the
        # comparison measures the solver and not cond(K) * machine epsilon
        hp = GpHyperparams(float(rng.uniform(0.1, 2)), float(rng.uniform(0.05, 0.5)))
        kxx = kernel(x, x, hp.sigma, hp.length) + hp.jitter * hp.sigma * np.eye(n)
        worst_cond = max(worst_cond, float(np.linalg.cond(kxx)))
        ref = kernel(q, x, hp.sigma, hp.length) @ np.linalg.solve(kxx, obs.values)
        worst_mean = max(worst_mean, rel_err(gp_predict(hp, obs, q), ref))
        fitted = gp_fit(obs)
        worst_interp = max(worst_interp, float(np.max(np.abs(gp_predict(fitted, obs, x) - obs.values))))
    elapsed = time.perf_counter() - t0
    ok = worst_mean <= 1e-8 and worst_interp <= 1e-6 and elapsed < 10
    assert record(3, ok, f"posterior mean vs dense solve {worst_mean:.1e} (tol 1e-8); "
                         f"interpolation error {worst_interp:.1e} (tol 1e-6); 50 instances, "
                         f"max cond(K) {worst_cond:.1e}; {elapsed:.1f}s")


def test_criterion_4_conv_geometry():
    spec = ConvAutoencoderSpec()
    shape, sizes = (1, 10, 8), []
    for layer in spec.encoder_convs():
        shape = nn.output_shape([layer], shape)
        sizes.append(shape[1:])
    kernels = [layer.kernel for layer in spec.encoder_convs()]
    model = ConvAutoencoder(spec, seed=0)
    pre_dense = nn.output_shape(model.convs, (1, 10, 8))
    ok = (kernels == [(5, 4), (4, 3), (3, 3)] and sizes == [(6, 5), (3, 3), (1, 1)]
          and pre_dense == (27, 1, 1) and model.enc_dense.n_in == 27
          and nn.output_shape(model.decoder_net, (spec.f,)) == (1, 10, 8))
    assert record(4, ok, f"spatial sizes {sizes}; pre-dense {pre_dense} -> {model.enc_dense.n_in} units")


def test_criterion_5_completion_vs_interpolation(smile_model):
    res, train, test, train_time = smile_model
    t0 = time.perf_counter()
    report = backtest(train, test, {"functional": res.model}, MaskSpec("keep_count_uniform", 15),
                      seed=0, baselines=("linear_interpolation",))
    s = report.summaries
    func, lin = s["functional"].avg_completion_test, s["linear_interpolation"].avg_completion_test
    ratio = func / lin
    points = np.mean([o.m for o in test])
    elapsed = train_time + time.perf_counter() - t0
    ok = ratio <= 0.6 and elapsed < 900
    assert record(5, ok, f"functional {func:.5f} vs linear interpolation {lin:.5f}: ratio {ratio:.3f} "
                         f"(tol 0.6); {points:.0f} points/day, 15 visible; {elapsed:.0f}s")


def test_criterion_6_equity_reproduction(tmp_path):
    path = os.environ.get("NOWCAST_EQUITY_CSV")
    if not path or not Path(path).exists():
        record(6, None, "equity data set not available (set NOWCAST_EQUITY_CSV)")
        pytest.skip("equity data set not available")
    doc = json.loads((ROOT / "configs" / "equity.json").read_text())
    doc["dataset"] = str(Path(path).resolve())
    doc["out"] = str(tmp_path)
    cfg_path = tmp_path / "equity.json"
    cfg_path.write_text(json.dumps(doc))
    assert cli.main(["compress", "--config", str(cfg_path)]) == 0
    rows = [line.split(",") for line in (tmp_path / "reconstruction.csv").read_text().splitlines()[1:]]
    train = np.mean([float(r[2]) for r in rows if r[1] == "train"])
    test = np.mean([float(r[2]) for r in rows if r[1] == "test"])
    worst = max(float(r[2]) for r in rows)
    assert cli.main(["backtest", "--config", str(cfg_path), "--model", str(tmp_path / "model.json")]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    completion = summary["summaries"]["functional"]["avg_completion_test"]
    ok = train <= 0.010 and test <= 0.010 and completion <= 0.012 and worst <= 0.015
    assert record(6, ok, f"compression train {train:.4f} / test {test:.4f} (tol 0.010); "
                         f"completion {completion:.4f} (tol 0.012); worst reconstruction {worst:.4f} (tol 0.015)")


def test_criterion_7_corruption(smile_model):
    res, train, test, _ = smile_model
    t0 = time.perf_counter()
    # warm start from the previous day's full code, as in the backtest
    prev = [res.codes[-1]] + [c for _, c in reconstruction_errors(test, res.model, init=res.codes[-1])][:-1]
    trials = [corruption_check(res.model, test[i % len(test)], k=4, factor=2.0, seed=i,
                               init=prev[i % len(test)]) for i in range(100)]
    wins = sum(t.success for t in trials)
    med_bad = np.median([t.corrupted_vs_original for t in trials])
    med_fix = np.median([t.corrected_vs_original for t in trials])
    elapsed = time.perf_counter() - t0
    ok = wins >= 95 and elapsed < 300
    assert record(7, ok, f"corrected beats corrupted in {wins}/100 trials (need 95); median RMSE "
                         f"corrupted {med_bad:.4f} vs corrected {med_fix:.4f}; {elapsed:.0f}s")


@pytest.fixture(scope="module")
def repo_run():
    ds, _ = synthetic.repo_curves(80, seed=4, n_outliers=4, spike=0.3)
    spec = FunctionalDecoderSpec(d=1, f=4, coord_transforms=("log",))
    cfg = TrainConfig(learning_rate=3e-3, patience=50, max_iterations=300, batch_size=16, seed=2)
    res = compress_functional(ds[:60], spec, cfg)
    return ds, res.model, reconstruction_errors(ds, res.model), spec, cfg


def _flags_for(repo_run, threshold):
    ds, model, errors, _, _ = repo_run
    return set(detect_outliers(ds, model, threshold, errors=errors).flagged)


_monotone_failures = []


@settings(max_examples=60, deadline=None)
@given(a=st.floats(0, 0.5), b=st.floats(0, 0.5))
def _check_monotone(repo_run, a, b):
    lo, hi = sorted((a, b))
    if not _flags_for(repo_run, hi) <= _flags_for(repo_run, lo):
        _monotone_failures.append((lo, hi))


def test_criterion_8_monotone_and_deterministic(repo_run, tmp_path):
    t0 = time.perf_counter()
    ds, model, errors, spec, cfg = repo_run
    _monotone_failures.clear()
    _check_monotone(repo_run)
    thresholds = np.unique(np.concatenate([[0.0], [e for e, _ in errors], [1.0]]))
    sizes = [len(_flags_for(repo_run, t)) for t in thresholds]
    monotone = not _monotone_failures and all(a >= b for a, b in zip(sizes, sizes[1:]))

    # same seed twice: model files, outlier reports and backtest tables must match byte for byte
    outputs = []
    for run in range(2):
        res = compress_functional(ds[:60], spec, cfg)
        save_model(res.model, tmp_path / f"m{run}.json")
        rep = detect_outliers(ds, res.model, 0.05)
        bt = backtest(ds[:60], ds[60:], {"functional": res.model}, MaskSpec("keep_fraction", 0.5), seed=3,
                      baselines=("linear_interpolation",))
        outputs.append(((tmp_path / f"m{run}.json").read_bytes(), rep.to_csv().encode(),
                        days_csv(bt).encode(), summary_table_csv(bt).encode()))
    identical = outputs[0] == outputs[1]
    elapsed = time.perf_counter() - t0
    ok = monotone and identical and elapsed < 60
    assert record(8, ok, f"flag counts non-increasing over {len(thresholds)} thresholds and 60 random pairs: "
                         f"{monotone}; byte-identical reruns: {identical}; {elapsed:.1f}s")


def test_criterion_9_calendar_theta(smile_model):
    res, train, test, _ = smile_model
    t0 = time.perf_counter()
    coords = np.vstack([o.coords for o in train])
    t_lo, t_hi = coords[:, 0].min(), coords[:, 0].max()
    k_lo, k_hi = np.percentile(coords[:, 1], [5, 95])
    loc = lattice((t_lo, t_hi), (k_lo, k_hi), 20, 20)
    code = res.codes[-1]
    theta = calendar_theta(res.model, code, loc)
    h = 1e-6 * loc[:, 0]
    up, down = loc.copy(), loc.copy()
    up[:, 0] += h
    down[:, 0] -= h
    fd = (total_variance(res.model, code, up) - total_variance(res.model, code, down)) / (2 * h)
    err = float(np.max(np.abs(theta.theta - fd) / np.maximum(np.abs(fd), 1e-3 * np.max(np.abs(fd)))))
    elapsed = time.perf_counter() - t0
    ok = err <= 1e-4 and elapsed < 60
    assert record(9, ok, f"reverse-mode vs finite differences max rel err {err:.1e} (tol 1e-4) on "
                         f"{len(loc)} points; all_positive={theta.all_positive} (reported only); {elapsed:.1f}s")


def test_swaption_table_shape(tmp_path):
    ds = synthetic.swaptions(100, seed=3)
    train, test = ds[:80], ds[80:]
    quick = TrainConfig(learning_rate=1e-3, patience=20, max_iterations=40, batch_size=64, penalty=0.1)
    spec8 = FunctionalDecoderSpec(d=2, f=8, coord_transforms=("identity", "identity"))
    spec8x = FunctionalDecoderSpec(d=2, f=8, n_exogenous=1, coord_transforms=("identity", "identity"))
    fits = {
        "pca": compress_pca(train, 8),
        "linear": compress_autoencoder(train, LinearProjectionSpec(80, 8), quick),
        "conv": compress_autoencoder(train, ConvAutoencoderSpec(f=8), quick, pretrain_cfg=quick),
        "functional": compress_functional(train, spec8, quick),  # ignores the forward input
        "functional_exog": compress_functional(train, spec8x, quick),
    }
    mask = MaskSpec("keep_nodes", synthetic.SWAPTION_UNMASKED)
    bt = backtest(train, test, {k: v.model for k, v in fits.items()}, mask, seed=0,
                  training_times={k: v.training_time for k, v in fits.items()})
    summaries = bt.summaries
    keys = [key for _, key, _, _ in TABLE_ROWS]
    filled = all(np.isfinite(getattr(summaries[m], key)) for m in fits for key in keys)
    ok = len(summaries) == 5 and filled
    assert record("table", ok, f"{len(summaries)} method columns x {len(keys)} rows populated: {filled}")
