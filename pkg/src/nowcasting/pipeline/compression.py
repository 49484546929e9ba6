"""Compression stage: fit decoders (and encoders) on complete training observations."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .. import nn
from ..data import Dataset
from ..errors import GridMismatch, InvalidFraction
from ..models import (
    ConvAutoencoder,
    ConvAutoencoderSpec,
    FunctionalDecoder,
    FunctionalDecoderSpec,
    InputScaler,
    LinearProjection,
    LinearProjectionSpec,
    PointSet,
    _sum_by_owner,
    pca_fit,
)
from ..optim import TrainConfig, train

log = logging.getLogger(__name__)


@dataclass
class CompressionResult:
    model: object
    dates: list[str]
    codes: np.ndarray
    rmse: np.ndarray  # per training observation
    history: list[tuple[int, float, float]]
    training_time: float
    max_iter_hit: bool = False
    stage_histories: list[list[tuple[int, float, float]]] = field(default_factory=list)

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.rmse))


def _validation_split(train_ds: Dataset, validation: Dataset | None, validation_share: float):
    if validation is not None:
        return train_ds, validation
    if len(train_ds) == 0:
        raise InvalidFraction("no training observations")
    if len(train_ds) == 1:
        # plain curve fitting: early stopping watches the training error itself
        return train_ds, train_ds
    n_valid = max(1, int(round(len(train_ds) * validation_share)))
    n_valid = min(n_valid, len(train_ds) - 1)
    return train_ds[:len(train_ds) - n_valid], train_ds[len(train_ds) - n_valid:]


def _rows_by_owner(points: PointSet):
    starts = points.starts
    ends = np.append(starts[1:], len(points.owner))
    return [np.arange(a, b) for a, b in zip(starts, ends)]


# --------------------------------------------------------------------------
# functional approach

def compress_functional(train_ds: Dataset, spec: FunctionalDecoderSpec, cfg: TrainConfig,
                        validation: Dataset | None = None,
                        validation_share: float = 0.25) -> CompressionResult:
    """Jointly fit the decoder weights and one code per training observation.

    Minimises the mean squared error over all calibration points
    ``(y - D(C_obs, n))^2`` plus ``cfg.penalty`` times the squared dense
    weights, with a single Adam instance over weights and codes. Validation
    observations get their own codes, moved by the validation-error gradient
    with the weights held fixed, so the early-stopping criterion is the
    reconstruction error of observations the weights never saw.

    Observations may have any number of points at any locations.
    """
    t0 = time.perf_counter()
    calib, valid = _validation_split(train_ds, validation, validation_share)
    shared = valid is calib
    if spec.n_exogenous and spec.n_exogenous != train_ds.n_exogenous:
        raise ValueError(f"spec expects {spec.n_exogenous} exogenous inputs, data has {train_ds.n_exogenous}")
    pc = PointSet.from_observations(calib.observations)
    pv = PointSet.from_observations(valid.observations)
    transforms = tuple(spec.coord_transforms) + ("identity",) * spec.n_exogenous
    held = [] if shared else list(valid)
    all_train = PointSet.from_observations(list(calib) + held)
    raw_all = all_train.coords if not spec.n_exogenous else np.hstack([all_train.coords, all_train.exog])
    scaler = InputScaler.fit(raw_all, transforms)
    shift, scale = _value_scaling(pc.values)
    model = FunctionalDecoder(spec, {}, scaler, value_shift=shift, value_scale=scale)
    zc, _ = model.features(pc.coords, pc.exog)
    zv, _ = model.features(pv.coords, pv.exog)
    net_params = nn.init_params(model.net, cfg.seed, "glorot_normal")
    dense_blocks = nn.dense_weight_blocks(model.net)
    rows = _rows_by_owner(pc)
    n_c, n_v = len(calib), len(held)

    params = dict(net_params)
    params["codes"] = np.zeros((n_c, spec.f))
    params["valid_codes"] = np.zeros((n_v, spec.f))

    def net_only(p):
        return {k: v for k, v in p.items() if k not in ("codes", "valid_codes")}

    def objective(p, batch):
        idx = np.concatenate([rows[i] for i in np.sort(batch)]) if batch is not None else slice(None)
        owner, z, y = pc.owner[idx], zc[idx], pc.values[idx]
        w = net_only(p)
        pred, tape = model.forward(w, p["codes"], owner, z)
        r = pred - y
        loss = float(np.mean(r * r))
        grads, gc, _ = model.backward(w, tape, 2.0 * r / len(r))
        grads["codes"] = _sum_by_owner(gc, owner, n_c)
        if cfg.penalty:
            pen, pgrad = nn.ridge_penalty(w, cfg.penalty, dense_blocks)
            loss += pen
            nn.add_into(grads, {k: pgrad[k] for k in dense_blocks})
        if shared:
            return loss, grads
        # validation codes follow their own reconstruction error, weights fixed
        pv_pred, vtape = model.forward(w, p["valid_codes"], pv.owner, zv)
        rv = pv_pred - pv.values
        _, gcv, _ = model.backward(w, vtape, 2.0 * rv / len(rv))
        grads["valid_codes"] = _sum_by_owner(gcv, pv.owner, n_v)
        return loss, grads

    def validation_error(p):
        if shared:
            pred, _ = model.forward(net_only(p), p["codes"], pc.owner, zc)
            return float(np.mean((pred - pc.values) ** 2))
        pred, _ = model.forward(net_only(p), p["valid_codes"], pv.owner, zv)
        r = pred - pv.values
        return float(np.mean(r * r))

    result = train(params, objective, validation_error, cfg, n_items=n_c)
    best = result.params
    codes = np.vstack([best["codes"], best["valid_codes"]])
    model = FunctionalDecoder(spec, net_only(best), scaler, calib.dates + [o.date for o in held], codes,
                              shift, scale)
    rmse = np.array(_functional_rmse(model, list(calib) + held, codes))
    log.info("functional compression: %d iterations, best %d, train RMSE %.5g",
             result.iterations, result.best_iteration, rmse.mean())
    return CompressionResult(model, list(model.code_dates), codes, rmse,
                             result.history, time.perf_counter() - t0, result.max_iter_hit)


def _value_scaling(values) -> tuple[float, float]:
    """Mean and standard deviation of the training values (scale 1 when constant)."""
    values = np.asarray(values, dtype=float)
    sd = float(np.std(values))
    return float(np.mean(values)), sd if sd > 0 else 1.0


def _functional_rmse(model: FunctionalDecoder, observations, codes):
    out = []
    for o, c in zip(observations, codes):
        pred = model.decode(c, o.coords, o.exog)
        out.append(float(np.sqrt(np.mean((pred - o.values) ** 2))))
    return out


# --------------------------------------------------------------------------
# autoencoders

def _grid_matrix(ds: Dataset) -> np.ndarray:
    if ds.fixed_grid is None or not ds.is_complete_grid():
        raise GridMismatch("autoencoder compression needs complete observations on a fixed grid")
    return ds.values_matrix()


def _fit_stage(model, net, trainable: list[nn.LayerSpec], vc, vv, cfg: TrainConfig,
               dense_blocks: list[str]):
    names = [f"{layer.name}.{part}" for layer in trainable for part in ("weight", "bias")]
    frozen = {k: v for k, v in model.params.items() if k not in names}
    penalised = [b for b in dense_blocks if b in names]
    xc, xv = model._net_input(vc), model._net_input(vv)

    def objective(p, batch):
        full = {**frozen, **p}
        x, y = (xc, vc) if batch is None else (xc[batch], vc[batch])
        out, tape = nn.forward(net, full, x)
        r = model._net_output(out) - y
        loss = float(np.mean(r * r))
        g = (2.0 * model.value_scale / r.size) * r
        grads, _ = nn.backward(tape, g.reshape(out.shape), full)
        grads = {k: grads[k] for k in names}
        if cfg.penalty and penalised:
            pen, pgrad = nn.ridge_penalty(p, cfg.penalty, penalised)
            loss += pen
            nn.add_into(grads, {k: pgrad[k] for k in penalised})
        return loss, grads

    def validation_error(p):
        out, _ = nn.forward(net, {**frozen, **p}, xv)
        r = model._net_output(out) - vv
        return float(np.mean(r * r))

    result = train({k: model.params[k] for k in names}, objective, validation_error, cfg,
                   n_items=len(vc))
    model.params.update(result.params)
    return result


def compress_autoencoder(train_ds: Dataset, spec, cfg: TrainConfig, validation: Dataset | None = None,
                         validation_share: float = 0.25, pretrain: bool = True,
                         pretrain_cfg: TrainConfig | None = None) -> CompressionResult:
    """Train a linear-projection or convolutional autoencoder on a fixed grid.

    ``spec`` is a :class:`LinearProjectionSpec`, a :class:`ConvAutoencoderSpec`
    or one of the strings ``"linear"`` / ``"conv"`` (grid shape and factor
    count then default from the data and spec). Convolutional models are
    pretrained greedily by conv/deconv pairs, outermost first, each stage
    training only its own pair, then all layers are fine-tuned together.
    The ridge penalty applies to the dense-layer kernels only.
    """
    t0 = time.perf_counter()
    calib, valid = _validation_split(train_ds, validation, validation_share)
    vc, vv = _grid_matrix(calib), _grid_matrix(valid)
    shift, scale = _value_scaling(vc)
    if isinstance(spec, str):
        if spec == "linear":
            spec = LinearProjectionSpec(vc.shape[1], 3)
        elif spec == "conv":
            spec = ConvAutoencoderSpec()
        else:
            raise ValueError(f"unknown autoencoder kind {spec!r}")
    if isinstance(spec, LinearProjectionSpec):
        if spec.m != vc.shape[1]:
            raise GridMismatch(f"spec has {spec.m} nodes, data {vc.shape[1]}")
        model = LinearProjection(spec, seed=cfg.seed, value_shift=shift, value_scale=scale)
    elif isinstance(spec, ConvAutoencoderSpec):
        if int(np.prod(spec.grid_shape)) != vc.shape[1]:
            raise GridMismatch(f"grid {spec.grid_shape} does not hold {vc.shape[1]} nodes")
        model = ConvAutoencoder(spec, seed=cfg.seed, value_shift=shift, value_scale=scale)
    else:
        raise TypeError(f"unsupported autoencoder spec {spec!r}")

    dense_blocks = nn.dense_weight_blocks(model.net)
    stages = []
    if isinstance(model, ConvAutoencoder) and pretrain:
        pcfg = pretrain_cfg or cfg
        for depth in range(1, len(model.convs) + 2):
            res = _fit_stage(model, model.stage_net(depth), model.stage_pair(depth), vc, vv,
                             pcfg, dense_blocks)
            log.info("pretraining stage %d: %d iterations, valid MSE %.5g",
                     depth, res.iterations, res.best_valid)
            stages.append(res.history)
    result = _fit_stage(model, model.net, model.net, vc, vv, cfg, dense_blocks)
    shared = valid is calib
    train_mat = vc if shared else np.vstack([vc, vv])
    codes, recon = model.autoencode(train_mat)
    rmse = np.sqrt(np.mean((recon - train_mat) ** 2, axis=1))
    dates = calib.dates if shared else calib.dates + valid.dates
    return CompressionResult(model, dates, codes, rmse, result.history,
                             time.perf_counter() - t0, result.max_iter_hit, stages)


def compress_pca(train_ds: Dataset, f: int) -> CompressionResult:
    """Classical PCA on the whole training block (no validation needed)."""
    t0 = time.perf_counter()
    v = _grid_matrix(train_ds)
    model = pca_fit(v, f)
    codes, recon = model.autoencode(v)
    rmse = np.sqrt(np.mean((recon - v) ** 2, axis=1))
    return CompressionResult(model, train_ds.dates, codes, rmse, [], time.perf_counter() - t0)
