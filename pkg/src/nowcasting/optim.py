"""Adam and the early-stopping training loop used for every compression stage."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from ._io import atomic_write
from .errors import NonFiniteLoss, ShapeMismatch
from .nn import Params, copy_params


@dataclass
class AdamState:
    m: Params
    v: Params
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Params, lr: float = 1e-3, **kw) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0, lr, **kw)


def adam_step(state: AdamState, params: Params, grad: Params):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    Blocks missing from ``grad`` are treated as having zero gradient.
    """
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grad.get(k)
        if g is None:
            g = np.zeros_like(p)
        elif np.shape(g) != p.shape:
            raise ShapeMismatch(f"gradient for {k!r} has shape {np.shape(g)}, param {p.shape}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        new_p[k] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, replace(state, m=new_m, v=new_v, step=t)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    patience: int = 100
    max_iterations: int = 10_000
    batch_size: int | None = None  # None means full-batch gradients
    penalty: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.penalty < 0:
            raise ValueError("penalty must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    params: Params
    best_iteration: int
    best_valid: float
    history: list[tuple[int, float, float]] = field(default_factory=list)
    max_iter_hit: bool = False

    @property
    def iterations(self) -> int:
        return len(self.history)


Objective = Callable[[Params, "np.ndarray | None"], tuple[float, Params]]


def _batches(n_items: int | None, cfg: TrainConfig, rng: np.random.Generator):
    if n_items is None or cfg.batch_size is None or cfg.batch_size >= n_items:
        return [None]
    order = rng.permutation(n_items)
    return [order[i:i + cfg.batch_size] for i in range(0, n_items, cfg.batch_size)]


def train(params: Params, objective: Objective, validation_error: Callable[[Params], float],
          cfg: TrainConfig, n_items: int | None = None) -> TrainResult:
    """Minimise ``objective`` with Adam and early stopping on ``validation_error``.

    ``objective(params, batch)`` returns the calibration loss and its gradient;
    ``batch`` is an index array into the ``n_items`` calibration items, or None
    for a full-batch step. One iteration is one pass over the calibration set
    (a single step in full-batch mode). The validation error is evaluated after
    each iteration; training stops once it has not decreased for
    ``cfg.patience`` iterations or after ``cfg.max_iterations``, and the
    parameters with the smallest validation error are returned.
    """
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.for_params(params, lr=cfg.learning_rate)
    best = copy_params(params)
    best_valid, best_it, since = math.inf, 0, 0
    history = []
    for it in range(1, cfg.max_iterations + 1):
        losses = []
        for batch in _batches(n_items, cfg, rng):
            loss, grad = objective(params, batch)
            if not math.isfinite(loss):
                raise NonFiniteLoss(it, loss)
            params, state = adam_step(state, params, grad)
            losses.append(loss)
        valid = float(validation_error(params))
        if not math.isfinite(valid):
            raise NonFiniteLoss(it, valid)
        history.append((it, float(np.mean(losses)), valid))
        if valid < best_valid:
            best_valid, best_it, since = valid, it, 0
            best = copy_params(params)
        else:
            since += 1
            if since >= cfg.patience:
                return TrainResult(best, best_it, best_valid, history, False)
    return TrainResult(best, best_it, best_valid, history, True)


def write_history(history, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "calib_loss", "valid_loss"])
    for it, calib, valid in history:
        w.writerow([it, repr(calib), repr(valid)])
    atomic_write(path, buf.getvalue())
