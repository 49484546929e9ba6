"""Day-by-day completion backtest over a chronological test set."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .. import baselines as bl
from ..data import Dataset, MaskSpec, Observation, mask_observation
from ..errors import EmptyDataset
from .completion import CompletionConfig, calibrate_codes, decode_at, full_code
from .metrics import mean_level, rmse

log = logging.getLogger(__name__)


def _linear(visible, obs):
    return bl.linear_interpolate(visible, obs.coords)[0]


def _gp(mode):
    def run(visible, obs):
        hp = bl.gp_fit(visible)
        return bl.gp_predict(hp, visible, obs.coords, extrapolation=mode)
    return run


BASELINES: dict[str, Callable[[Observation, Observation], np.ndarray]] = {
    "linear_interpolation": _linear,
    "gp": _gp("gp"),
    "gp_flat": _gp("flat"),
}


@dataclass(frozen=True)
class DayRecord:
    date: str
    method: str
    reconstruction_rmse: float  # NaN for baselines
    completion_rmse: float
    level: float
    n_visible: int


@dataclass
class MethodSummary:
    method: str
    avg_compression_train: float = math.nan
    worst_compression_train: float = math.nan
    worst_compression_train_date: str | None = None
    avg_compression_test: float = math.nan
    worst_compression_test: float = math.nan
    worst_compression_test_date: str | None = None
    avg_completion_test: float = math.nan
    worst_completion_test: float = math.nan
    worst_completion_test_date: str | None = None
    # percentages of each day's mean absolute level, averaged over days
    avg_compression_train_pct: float = math.nan
    avg_compression_test_pct: float = math.nan
    avg_completion_test_pct: float = math.nan
    training_time: float | None = None


@dataclass
class SurfaceDump:
    observation: Observation
    completed: np.ndarray
    visible: np.ndarray  # bool mask over the observation's points


@dataclass
class BacktestReport:
    methods: list[str]
    days: list[DayRecord]
    summaries: dict[str, MethodSummary]
    factors: dict[str, list[tuple[str, np.ndarray]]] = field(default_factory=dict)
    worst_completion: dict[str, SurfaceDump] = field(default_factory=dict)
    timing: dict[str, float] = field(default_factory=dict)
    outlier_threshold: float | None = None
    outlier_flags: dict[str, list[str]] = field(default_factory=dict)  # dates with reconstruction RMSE above threshold

    def records(self, method: str) -> list[DayRecord]:
        return [d for d in self.days if d.method == method]


def _worst(values: Sequence[float], dates: Sequence[str]):
    if not len(values):
        return math.nan, None
    k = int(np.argmax(values))  # first maximum, i.e. the earliest date
    return float(values[k]), dates[k]


def mask_seed(seed: int, day_index: int) -> int:
    return int(np.random.SeedSequence([seed, day_index]).generate_state(1)[0])


def backtest(train_ds: Dataset, test_ds: Dataset, models: Mapping[str, object], mask: MaskSpec,
             cfg: CompletionConfig = CompletionConfig(), seed: int = 0,
             baselines: Sequence[str] = (), training_times: Mapping[str, float] | None = None,
             outlier_threshold: float | None = None) -> BacktestReport:
    """Complete every test day from its masked view, warm-starting from the previous day.

    Each day the code is initialised with the full-information code of the
    previous day (the last training day for the first test day), calibrated on
    the visible points, and the decoded surface is compared with the complete
    observation. The mask for a day is identical across methods.
    """
    if len(test_ds) == 0:
        raise EmptyDataset("backtest needs a non-empty test set")
    unknown = [b for b in baselines if b not in BASELINES]
    if unknown:
        raise ValueError(f"unknown baselines {unknown}; choose from {sorted(BASELINES)}")
    training_times = training_times or {}
    masks = [mask_observation(o, mask, mask_seed(seed, i), history=train_ds) for i, o in enumerate(test_ds)]
    visible_idx = []
    for obs, (vis, _) in zip(test_ds, masks):
        keep = np.zeros(obs.m, dtype=bool)
        for c in vis.coords:
            keep |= np.all(obs.coords == c, axis=1)
        visible_idx.append(keep)

    days: list[DayRecord] = []
    summaries: dict[str, MethodSummary] = {}
    factors, worst, timing = {}, {}, {}
    test_dates = test_ds.dates

    for name, model in models.items():
        t0 = time.perf_counter()
        summary = MethodSummary(name, training_time=training_times.get(name))
        train_err, train_pct, prev = [], [], np.zeros(model.f)
        for obs in train_ds:
            code = full_code(model, obs, prev, cfg)
            err = rmse(obs.values, decode_at(model, code, obs))
            train_err.append(err)
            train_pct.append(100 * err / mean_level(obs))
            prev = code
        if len(train_ds):
            summary.avg_compression_train = float(np.mean(train_err))
            summary.avg_compression_train_pct = float(np.mean(train_pct))
            summary.worst_compression_train, summary.worst_compression_train_date = _worst(train_err, train_ds.dates)
        rec, comp, series = [], [], []
        worst_dump, worst_val = None, -math.inf
        for i, obs in enumerate(test_ds):
            init = prev
            code = full_code(model, obs, init, cfg, use_stored=False)
            r_err = rmse(obs.values, decode_at(model, code, obs))
            vis = masks[i][0]
            c_code = calibrate_codes(model, [vis], [init], cfg)[0][0]
            completed = decode_at(model, c_code, obs)
            c_err = rmse(obs.values, completed)
            days.append(DayRecord(obs.date, name, r_err, c_err, mean_level(obs), vis.m))
            rec.append(r_err)
            comp.append(c_err)
            series.append((obs.date, code))
            if c_err > worst_val:
                worst_val, worst_dump = c_err, SurfaceDump(obs, completed, visible_idx[i])
            prev = code
        levels = np.array([mean_level(o) for o in test_ds])
        summary.avg_compression_test = float(np.mean(rec))
        summary.avg_compression_test_pct = float(np.mean(100 * np.array(rec) / levels))
        summary.worst_compression_test, summary.worst_compression_test_date = _worst(rec, test_dates)
        summary.avg_completion_test = float(np.mean(comp))
        summary.avg_completion_test_pct = float(np.mean(100 * np.array(comp) / levels))
        summary.worst_completion_test, summary.worst_completion_test_date = _worst(comp, test_dates)
        summaries[name] = summary
        factors[name] = series
        worst[name] = worst_dump
        timing[name] = time.perf_counter() - t0
        log.info("%s: completion RMSE %.5g (worst %.5g on %s)", name, summary.avg_completion_test,
                 summary.worst_completion_test, summary.worst_completion_test_date)

    for name in baselines:
        t0 = time.perf_counter()
        fn = BASELINES[name]
        comp = []
        worst_dump, worst_val = None, -math.inf
        for i, obs in enumerate(test_ds):
            vis = masks[i][0]
            completed = fn(vis, obs)
            c_err = rmse(obs.values, completed)
            days.append(DayRecord(obs.date, name, math.nan, c_err, mean_level(obs), vis.m))
            comp.append(c_err)
            if c_err > worst_val:
                worst_val, worst_dump = c_err, SurfaceDump(obs, completed, visible_idx[i])
        levels = np.array([mean_level(o) for o in test_ds])
        s = MethodSummary(name)
        s.avg_completion_test = float(np.mean(comp))
        s.avg_completion_test_pct = float(np.mean(100 * np.array(comp) / levels))
        s.worst_completion_test, s.worst_completion_test_date = _worst(comp, test_dates)
        summaries[name] = s
        worst[name] = worst_dump
        timing[name] = time.perf_counter() - t0

    flags = {}
    if outlier_threshold is not None:
        flags = {name: [d.date for d in days if d.method == name and d.reconstruction_rmse > outlier_threshold]
                 for name in models}
    return BacktestReport(list(models) + list(baselines), days, summaries, factors, worst, timing,
                          outlier_threshold, flags)
