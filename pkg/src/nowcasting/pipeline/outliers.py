"""Outlier flags from reconstruction errors, corrections, and the corruption sanity check."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .._io import atomic_write
from ..data import Dataset, Observation
from .completion import CompletionConfig, complete, decode_at, full_code
from .metrics import rmse


@dataclass(frozen=True)
class OutlierRow:
    date: str
    rmse: float
    flag: bool


@dataclass
class OutlierReport:
    threshold: float
    rows: list[OutlierRow]
    corrected: dict[str, Observation] = field(default_factory=dict)

    @property
    def flagged(self) -> list[str]:
        return [r.date for r in self.rows if r.flag]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["date", "rmse", "threshold", "flag"])
        for r in self.rows:
            w.writerow([r.date, repr(r.rmse), repr(float(self.threshold)), int(r.flag)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        atomic_write(path, self.to_csv())


def reconstruction_errors(ds: Dataset, model, cfg: CompletionConfig = CompletionConfig(), init=None):
    """Per-day ``(rmse, code)``; functional codes are warm-started from the previous day."""
    out = []
    prev = init
    for obs in ds:
        code = full_code(model, obs, prev, cfg)
        out.append((rmse(obs.values, decode_at(model, code, obs)), code))
        prev = code
    return out


def detect_outliers(ds: Dataset, model, threshold: float, cfg: CompletionConfig = CompletionConfig(),
                    init=None, errors=None) -> OutlierReport:
    """Flag days whose reconstruction RMSE exceeds ``threshold``.

    Flagged days get a corrected observation: the decoded surface at the same
    locations, from the code calibrated on that day's values. The raw data are
    never modified. ``errors`` may carry precomputed :func:`reconstruction_errors`.
    """
    if threshold < 0 or np.isnan(threshold):
        raise ValueError(f"threshold must be >= 0, got {threshold}")
    errors = errors if errors is not None else reconstruction_errors(ds, model, cfg, init)
    rows, corrected = [], {}
    for obs, (err, code) in zip(ds, errors):
        flag = bool(err > threshold)
        rows.append(OutlierRow(obs.date, err, flag))
        if flag:
            corrected[obs.date] = obs.with_values(decode_at(model, code, obs))
    return OutlierReport(threshold, rows, corrected)


@dataclass
class CorruptionResult:
    corrupted_nodes: np.ndarray
    corrupted_vs_original: float
    corrupted_vs_corrected: float
    corrected_vs_original: float
    reconstruction_rmse: float  # correction of the uncorrupted observation vs itself
    corrected: Observation

    @property
    def success(self) -> bool:
        return self.corrected_vs_original < self.corrupted_vs_original


def corruption_check(model, obs: Observation, k: int, factor: float, seed: int, init=None,
                     cfg: CompletionConfig = CompletionConfig()) -> CorruptionResult:
    """Multiply ``k`` random values by ``factor``, recalibrate on all points, compare.

    The correction is the decoder output for the code calibrated on the
    corrupted observation. ``init`` defaults to the encoder output of the
    corrupted data for encoder models and to the zero code otherwise.
    """
    if not 0 <= k <= obs.m:
        raise ValueError(f"k must lie in [0, {obs.m}], got {k}")
    rng = np.random.default_rng(seed)
    nodes = np.sort(rng.choice(obs.m, size=k, replace=False)) if k else np.zeros(0, dtype=int)
    values = obs.values.copy()
    values[nodes] *= factor
    corrupted = obs.with_values(values)
    if init is None and hasattr(model, "encode_observation"):
        init = model.encode_observation(corrupted)
    fixed = complete(model, corrupted, init, cfg, truth=obs)
    clean = complete(model, obs, init, cfg, truth=obs)
    return CorruptionResult(
        corrupted_nodes=nodes,
        corrupted_vs_original=rmse(values, obs.values),
        corrupted_vs_corrected=rmse(values, fixed.values),
        corrected_vs_original=fixed.rmse,
        reconstruction_rmse=clean.rmse,
        corrected=obs.with_values(fixed.values),
    )
