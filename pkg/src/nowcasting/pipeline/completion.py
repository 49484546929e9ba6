"""Completion stage: calibrate a code on the visible points and decode everywhere."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..data import Observation
from ..errors import EmptyObservation, NonFiniteLoss
from ..models import FunctionalDecoder, GridModel, PointSet


@dataclass(frozen=True)
class CompletionConfig:
    learning_rate: float = 1e-2  # codes start far from the optimum; 1e-3 x 1000 steps is too short
    max_iterations: int = 1000
    tol: float = 1e-10  # stop once the best loss improves by less than this ...
    window: int = 50    # ... over this many iterations
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def from_dict(cls, d: dict) -> "CompletionConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown completion options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class CompletionResult:
    code: np.ndarray
    values: np.ndarray | None  # completed values at the requested locations
    loss: float                # visible-point MSE at ``code``
    initial_loss: float
    iterations: int
    rmse: float | None = None  # against ground truth, when supplied


def calibrate_codes(model, partials: Sequence[Observation], inits, cfg: CompletionConfig = CompletionConfig()):
    """Minimise each observation's visible-point squared error over its own code.

    All observations are optimised in one vectorised Adam loop; each keeps its
    own best iterate (the initial code included, so the returned loss never
    exceeds the initial one) and freezes once its best loss has improved by
    less than ``cfg.tol`` over ``cfg.window`` iterations.

    Returns ``(codes, losses, initial_losses, iterations)``.
    """
    partials = list(partials)
    if not partials:
        return np.zeros((0, model.f)), np.zeros(0), np.zeros(0), np.zeros(0, dtype=int)
    for o in partials:
        if o is None or o.m == 0:
            raise EmptyObservation("completion needs at least one visible point")
    points = PointSet.from_observations(partials)
    k = len(partials)
    counts = np.bincount(points.owner, minlength=k).astype(float)
    codes = np.array(inits, dtype=float).reshape(k, model.f)

    def loss_and_grad(c, with_grad=True):
        pred, ctx = model.predict(c, points)
        r = pred - points.values
        loss = np.bincount(points.owner, weights=r * r, minlength=k) / counts
        if not with_grad:
            return loss, None
        return loss, model.code_grad(ctx, 2.0 * r / counts[points.owner])

    loss, grad = loss_and_grad(codes)
    if not np.all(np.isfinite(loss)):
        raise NonFiniteLoss(0, float(loss[~np.isfinite(loss)][0]))
    initial = loss.copy()
    best, best_codes = loss.copy(), codes.copy()
    ref = loss.copy()
    active = np.ones(k, dtype=bool)
    iterations = np.zeros(k, dtype=int)
    m1 = np.zeros_like(codes)
    m2 = np.zeros_like(codes)
    b1, b2 = cfg.beta1, cfg.beta2
    for t in range(1, cfg.max_iterations + 1):
        m1 = np.where(active[:, None], b1 * m1 + (1 - b1) * grad, m1)
        m2 = np.where(active[:, None], b2 * m2 + (1 - b2) * grad * grad, m2)
        step = cfg.learning_rate * (m1 / (1 - b1 ** t)) / (np.sqrt(m2 / (1 - b2 ** t)) + cfg.eps)
        codes = np.where(active[:, None], codes - step, codes)
        iterations[active] = t
        loss, grad = loss_and_grad(codes)
        if not np.all(np.isfinite(loss[active])):
            raise NonFiniteLoss(t, float(loss[active][~np.isfinite(loss[active])][0]))
        better = active & (loss < best)
        best[better] = loss[better]
        best_codes[better] = codes[better]
        if t % cfg.window == 0:
            active &= (ref - best) >= cfg.tol
            ref = best.copy()
            if not active.any():
                break
    return best_codes, best, initial, iterations


def decode_at(model, code, where: Observation | None):
    """Decoded values at the points of ``where`` (the whole grid for grid models if None)."""
    code = np.asarray(code, dtype=float)
    if isinstance(model, FunctionalDecoder):
        if where is None:
            raise ValueError("functional decoding needs explicit locations")
        return model.decode(code, where.coords, where.exog)
    full = model.decode(code[None])[0]
    return full if where is None else full[where.nodes]


def default_init(model) -> np.ndarray:
    return np.zeros(model.f)


def complete(model, partial: Observation, init=None, cfg: CompletionConfig = CompletionConfig(),
             query: Observation | None = None, truth: Observation | None = None) -> CompletionResult:
    """Calibrate a code on ``partial`` and decode it at ``query`` (or ``truth``).

    ``init`` defaults to the zero code. When ``truth`` is given the completed
    values are produced at its points and the completion RMSE against it is
    reported.
    """
    if partial is None or partial.m == 0:
        raise EmptyObservation("completion needs at least one visible point")
    init = default_init(model) if init is None else init
    codes, loss, initial, its = calibrate_codes(model, [partial], [init], cfg)
    where = query if query is not None else truth
    values = None
    if where is not None or isinstance(model, GridModel):
        values = decode_at(model, codes[0], where)
    rmse = None
    if truth is not None:
        rmse = float(np.sqrt(np.mean((values - truth.values) ** 2)))
    return CompletionResult(codes[0], values, float(loss[0]), float(initial[0]), int(its[0]), rmse)


def full_code(model, obs: Observation, init=None, cfg: CompletionConfig = CompletionConfig(),
              use_stored: bool = True) -> np.ndarray:
    """Code of a fully observed observation.

    Encoder models encode directly; the functional decoder returns the stored
    training code for known dates, or calibrates one on all points.
    """
    if isinstance(model, FunctionalDecoder):
        if use_stored:
            stored = model.stored_code(obs.date)
            if stored is not None:
                return stored
        return complete(model, obs, init, cfg).code
    return model.encode_observation(obs)
