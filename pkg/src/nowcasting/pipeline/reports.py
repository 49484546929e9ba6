"""Tidy CSV / JSON writers for backtests, reconstructions and surfaces."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .._io import atomic_write
from ..data import Observation
from .backtest import BacktestReport


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else repr(float(x))
    return str(x)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def days_csv(report: BacktestReport) -> str:
    return _csv(["date", "method", "reconstruction_rmse", "completion_rmse", "level", "n_visible"],
                [(d.date, d.method, d.reconstruction_rmse, d.completion_rmse, d.level, d.n_visible)
                 for d in report.days])


def factors_csv(report: BacktestReport) -> str:
    rows = []
    for method, series in report.factors.items():
        for date, code in series:
            rows.extend((date, method, k + 1, float(c)) for k, c in enumerate(code))
    return _csv(["date", "method", "factor", "value"], rows)


TABLE_ROWS = [
    ("Average compression error on training set", "avg_compression_train", None, "avg_compression_train_pct"),
    ("Average compression error on test set", "avg_compression_test", None, "avg_compression_test_pct"),
    ("Worst compression error on training set", "worst_compression_train", "worst_compression_train_date", None),
    ("Worst compression error on test set", "worst_compression_test", "worst_compression_test_date", None),
    ("Average completion error on test set", "avg_completion_test", None, "avg_completion_test_pct"),
    ("Worst completion error on test set", "worst_completion_test", "worst_completion_test_date", None),
    ("Training time in seconds", "training_time", None, None),
]


def summary_table_csv(report: BacktestReport) -> str:
    """Methods as columns and the error rows of the comparison table as rows (no timings)."""
    rows = []
    for label, key, date_key, pct_key in TABLE_ROWS[:-1]:
        row = [label]
        for m in report.methods:
            s = report.summaries[m]
            row.append(_fmt(getattr(s, key)))
        rows.append(row)
        if date_key:
            rows.append([label + " date"] + [_fmt(getattr(report.summaries[m], date_key)) for m in report.methods])
        if pct_key:
            rows.append([label + " (% of mean level)"] +
                        [_fmt(getattr(report.summaries[m], pct_key)) for m in report.methods])
    return _csv(["metric", *report.methods], rows)


def summary_json(report: BacktestReport) -> str:
    def clean(d):
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}
    doc = {"methods": report.methods,
           "summaries": {m: clean(asdict(report.summaries[m])) for m in report.methods},
           "backtest_seconds": report.timing,
           "outlier_threshold": report.outlier_threshold,
           "outlier_flags": report.outlier_flags,
           "percentages": "RMSE as a percentage of each day's mean absolute value, averaged over days"}
    return json.dumps(doc, indent=2, sort_keys=True)


def format_table(summary: dict) -> str:
    """Plain-text rendering of :func:`summary_json` output."""
    methods = summary["methods"]
    s = summary["summaries"]
    width = max(12, *(len(m) + 2 for m in methods))
    lines = [" " * 44 + "".join(m.rjust(width) for m in methods)]
    for label, key, date_key, pct_key in TABLE_ROWS:
        cells = []
        for m in methods:
            v = s[m].get(key)
            cell = "-" if v is None else f"{v:.4g}"
            if pct_key and s[m].get(pct_key) is not None:
                cell += f" ({s[m][pct_key]:.3g}%)"
            cells.append(cell.rjust(width))
        lines.append(label.ljust(44) + "".join(cells))
        if date_key:
            lines.append("".ljust(44) + "".join(str(s[m].get(date_key) or "-").rjust(width) for m in methods))
    return "\n".join(lines)


def surface_csv(obs: Observation, coord_names, completed=None, visible=None, original_label="value") -> str:
    """Long-format dump of one surface, optionally with completed values and visibility flags."""
    header = ["date", *coord_names, original_label]
    if completed is not None:
        header.append("completed")
    if visible is not None:
        header.append("visible")
    rows = []
    for j in range(obs.m):
        row = [obs.date, *(float(c) for c in obs.coords[j]), float(obs.values[j])]
        if completed is not None:
            row.append(float(completed[j]))
        if visible is not None:
            row.append(int(visible[j]))
        rows.append(row)
    return _csv(header, rows)


def write_backtest(report: BacktestReport, out_dir, coord_names) -> None:
    out = Path(out_dir)
    atomic_write(out / "backtest_days.csv", days_csv(report))
    atomic_write(out / "backtest_table.csv", summary_table_csv(report))
    atomic_write(out / "summary.json", summary_json(report))
    if report.factors:
        atomic_write(out / "factors.csv", factors_csv(report))
    for method, dump in report.worst_completion.items():
        if dump is not None:
            atomic_write(out / f"worst_completion_{method}.csv",
                         surface_csv(dump.observation, coord_names, dump.completed, dump.visible))
