"""Maturity sensitivity of implied total variance ``w(T, k) = T sigma(T, k)^2``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..models import FunctionalDecoder


@dataclass
class ThetaResult:
    locations: np.ndarray
    theta: np.ndarray

    @property
    def all_positive(self) -> bool:
        return bool(np.all(self.theta > 0))


def lattice(t_range, k_range, n_t: int = 20, n_k: int = 20) -> np.ndarray:
    tt, kk = np.meshgrid(np.linspace(*t_range, n_t), np.linspace(*k_range, n_k), indexing="ij")
    return np.column_stack([tt.ravel(), kk.ravel()])


def calendar_theta(model: FunctionalDecoder, code, locations, exog=None, maturity_axis: int = 0) -> ThetaResult:
    """``d/dT [T sigma^2] = sigma^2 + 2 T sigma dsigma/dT`` by reverse-mode differentiation.

    The derivative passes through the model's input transform (log-maturity
    and range scaling). Exogenous inputs are held fixed.
    """
    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    sigma, dloc = model.decode_with_location_grad(code, locations, exog)
    t = locations[:, maturity_axis]
    theta = sigma ** 2 + 2.0 * t * sigma * dloc[:, maturity_axis]
    return ThetaResult(locations, theta)


def total_variance(model: FunctionalDecoder, code, locations, exog=None, maturity_axis: int = 0):
    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    sigma = model.decode(code, locations, exog)
    return locations[:, maturity_axis] * sigma ** 2
