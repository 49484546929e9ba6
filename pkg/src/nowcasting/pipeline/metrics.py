"""Pointwise RMSE metrics for reconstructed and completed observations."""
from __future__ import annotations

import numpy as np

from ..data import Observation
from ..errors import NodeSetMismatch
from .completion import CompletionConfig, decode_at, full_code


def rmse(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise NodeSetMismatch(f"shapes {a.shape} and {b.shape} differ")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def _aligned(obs: Observation, other: Observation):
    """Values of ``other`` reordered to the point order of ``obs``."""
    if obs.m != other.m:
        raise NodeSetMismatch(f"{obs.m} nodes versus {other.m}")
    ka = np.lexsort(obs.coords.T[::-1])
    kb = np.lexsort(other.coords.T[::-1])
    if not np.allclose(obs.coords[ka], other.coords[kb], rtol=0, atol=1e-12):
        raise NodeSetMismatch(f"{obs.date}: node sets differ")
    out = np.empty(obs.m)
    out[ka] = other.values[kb]
    return out


def completion_rmse(obs_full: Observation, completed) -> float:
    """RMSE between the true observation and a completed one over all its nodes.

    ``completed`` is an :class:`Observation` (matched by location, in any
    order) or a value array already in ``obs_full`` point order.
    """
    if isinstance(completed, Observation):
        return rmse(obs_full.values, _aligned(obs_full, completed))
    return rmse(obs_full.values, completed)


def reconstruction_rmse(obs: Observation, model, code=None, init=None,
                        cfg: CompletionConfig = CompletionConfig()) -> float:
    """RMSE of the decoded full-information code against ``obs``."""
    if code is None:
        code = full_code(model, obs, init, cfg)
    return rmse(obs.values, decode_at(model, code, obs))


def mean_level(obs: Observation) -> float:
    return float(np.mean(np.abs(obs.values)))
