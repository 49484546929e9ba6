"""Observations on fixed or moving grids: CSV ingestion, splits and masking.

An observation is one day of ``(location, value)`` points. Locations carry
``d`` real coordinates (term, or maturity and log-moneyness, or expiry and
tenor) plus optional exogenous features such as the forward at that node.

CSV files are in long format, one row per point::

    date,c1[,c2][,exo...],value

Fixed grids are declared by a sidecar file holding one node per line
(comma separated coordinates).
"""
from __future__ import annotations

import csv
import datetime as _dt
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DataError,
    EmptyDataset,
    GridMismatch,
    InvalidFraction,
    MaskInfeasible,
    ParseError,
)


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Observation:
    """One day's points.

    ``coords`` is ``(m, d)``, ``values`` is ``(m,)`` and ``exog`` is ``(m, e)``
    or None. ``nodes`` holds indices into the dataset's fixed grid when the
    observation lives on one.
    """

    date: str
    coords: np.ndarray
    values: np.ndarray
    exog: np.ndarray | None = None
    nodes: np.ndarray | None = None
    grid_id: str | None = None

    def __post_init__(self):
        coords = _frozen(self.coords)
        if coords.ndim == 1:
            coords = _frozen(coords.reshape(-1, 1))
        values = _frozen(self.values).reshape(-1)
        values.setflags(write=False)
        if len(values) == 0:
            raise DataError(f"{self.date}: observation has no points")
        if coords.shape[0] != len(values):
            raise DataError(f"{self.date}: {coords.shape[0]} locations for {len(values)} values")
        if not (np.all(np.isfinite(values)) and np.all(np.isfinite(coords))):
            raise DataError(f"{self.date}: non-finite entries")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "values", values)
        if self.exog is not None:
            exog = _frozen(self.exog).reshape(len(values), -1)
            if not np.all(np.isfinite(exog)):
                raise DataError(f"{self.date}: non-finite exogenous entries")
            object.__setattr__(self, "exog", exog)
        if self.nodes is not None:
            object.__setattr__(self, "nodes", _frozen(self.nodes, dtype=np.int64).reshape(-1))

    @property
    def m(self) -> int:
        return len(self.values)

    @property
    def d(self) -> int:
        return self.coords.shape[1]

    def subset(self, index) -> "Observation":
        index = np.asarray(index, dtype=np.int64)
        return Observation(
            date=self.date,
            coords=self.coords[index],
            values=self.values[index],
            exog=None if self.exog is None else self.exog[index],
            nodes=None if self.nodes is None else self.nodes[index],
            grid_id=self.grid_id,
        )

    def with_values(self, values) -> "Observation":
        return Observation(self.date, self.coords, values, self.exog, self.nodes, self.grid_id)


@dataclass(frozen=True, eq=False)
class Dataset:
    observations: tuple[Observation, ...]
    d: int
    fixed_grid: np.ndarray | None = None
    grid_id: str | None = None
    coord_names: tuple[str, ...] = ()
    exog_names: tuple[str, ...] = ()

    def __post_init__(self):
        obs = tuple(self.observations)
        object.__setattr__(self, "observations", obs)
        if not self.coord_names:
            object.__setattr__(self, "coord_names", tuple(f"c{i + 1}" for i in range(self.d)))
        for a, b in zip(obs, obs[1:]):
            if not a.date < b.date:
                raise DataError(f"observations not strictly increasing in date: {a.date} then {b.date}")
        for o in obs:
            if o.d != self.d:
                raise DataError(f"{o.date}: coordinate dimension {o.d} != {self.d}")
        if self.fixed_grid is not None:
            object.__setattr__(self, "fixed_grid", _frozen(self.fixed_grid).reshape(-1, self.d))
            for o in obs:
                if o.grid_id != self.grid_id or o.nodes is None:
                    raise GridMismatch(f"{o.date}: observation not on grid {self.grid_id!r}")

    def __len__(self) -> int:
        return len(self.observations)

    def __iter__(self):
        return iter(self.observations)

    def __getitem__(self, item):
        if isinstance(item, slice):
            return self._replace(self.observations[item])
        return self.observations[item]

    def _replace(self, observations) -> "Dataset":
        return Dataset(tuple(observations), self.d, self.fixed_grid, self.grid_id,
                       self.coord_names, self.exog_names)

    def select(self, indices: Iterable[int]) -> "Dataset":
        return self._replace([self.observations[i] for i in indices])

    @property
    def dates(self) -> list[str]:
        return [o.date for o in self.observations]

    @property
    def n_exogenous(self) -> int:
        return len(self.exog_names)

    @property
    def m(self) -> int | None:
        return None if self.fixed_grid is None else len(self.fixed_grid)

    def values_matrix(self) -> np.ndarray:
        """``(N, m)`` values in grid order; fixed-grid datasets only."""
        if self.fixed_grid is None:
            raise GridMismatch("dataset has no fixed grid")
        out = np.full((len(self), len(self.fixed_grid)), np.nan)
        for i, o in enumerate(self.observations):
            out[i, o.nodes] = o.values
        if np.isnan(out).any():
            raise GridMismatch("some observations do not cover the whole grid")
        return out

    def is_complete_grid(self) -> bool:
        return self.fixed_grid is not None and all(o.m == len(self.fixed_grid) for o in self)


def concat(*parts: Dataset) -> Dataset:
    first = parts[0]
    obs = [o for p in parts for o in p.observations]
    return first._replace(obs)


# --------------------------------------------------------------------------
# CSV ingestion

@dataclass(frozen=True)
class ColumnSchema:
    date: str = "date"
    coords: tuple[str, ...] = ("c1",)
    exogenous: tuple[str, ...] = ()
    value: str = "value"

    @classmethod
    def infer(cls, header: Sequence[str]) -> "ColumnSchema":
        """First column is the date, last the value, ``c<k>`` columns are coordinates."""
        header = [h.strip() for h in header]
        if len(header) < 3:
            raise DataError(f"header too short: {header}")
        middle = header[1:-1]
        coords = tuple(h for h in middle if h[:1] == "c" and h[1:].isdigit())
        exo = tuple(h for h in middle if h not in coords)
        if not coords:
            coords, exo = (middle[0],), tuple(middle[1:])
        return cls(header[0], coords, exo, header[-1])


def load_grid(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"grid file not found: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rows.append([float(x) for x in line.split(",")])
        except ValueError:
            raise ParseError(lineno, f"bad grid node {line!r}") from None
    if not rows or len({len(r) for r in rows}) != 1:
        raise DataError(f"{path}: empty or ragged grid file")
    return np.array(rows)


def save_grid(grid: np.ndarray, path) -> None:
    with open(path, "w") as fh:
        for node in np.atleast_2d(grid):
            fh.write(",".join(repr(float(x)) for x in node) + "\n")


def _parse_float(text: str, row: int, column: str) -> float:
    try:
        x = float(text)
    except (TypeError, ValueError):
        raise ParseError(row, f"column {column!r}: not a number: {text!r}") from None
    if not math.isfinite(x):
        raise ParseError(row, f"column {column!r}: non-finite value {text!r}")
    return x


def load_dataset(path, schema: ColumnSchema | None = None, grid=None,
                 grid_id: str | None = None) -> Dataset:
    """Read a long-format CSV into a date-ordered :class:`Dataset`.

    ``grid`` is either a node array or a path to a sidecar grid file; when
    given, every observation must cover exactly that node set and its points
    are reordered to grid order. Parse failures raise :class:`ParseError`
    carrying the 1-based data row index (header excluded).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDataset(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        schema = schema or ColumnSchema.infer(header)
        try:
            i_date = header.index(schema.date)
            i_coords = [header.index(c) for c in schema.coords]
            i_exo = [header.index(c) for c in schema.exogenous]
            i_val = header.index(schema.value)
        except ValueError as exc:
            raise DataError(f"{path}: missing column ({exc})") from None
        groups: dict[str, list[tuple[list[float], list[float], float]]] = {}
        for row_no, row in enumerate(reader, 1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(row_no, f"expected {len(header)} fields, got {len(row)}")
            date = row[i_date].strip()
            try:
                date = _dt.date.fromisoformat(date).isoformat()
            except ValueError:
                raise ParseError(row_no, f"bad date {date!r}") from None
            coords = [_parse_float(row[i], row_no, header[i]) for i in i_coords]
            exo = [_parse_float(row[i], row_no, header[i]) for i in i_exo]
            value = _parse_float(row[i_val], row_no, header[i_val])
            groups.setdefault(date, []).append((coords, exo, value))
    if not groups:
        raise EmptyDataset(f"{path}: no data rows")

    fixed = None
    if grid is not None:
        fixed = load_grid(grid) if isinstance(grid, (str, Path)) else np.asarray(grid, dtype=float)
        fixed = fixed.reshape(-1, len(schema.coords))
        grid_id = grid_id or (Path(grid).stem if isinstance(grid, (str, Path)) else "grid")
        key_to_node = {tuple(node): k for k, node in enumerate(fixed.tolist())}

    observations = []
    for date in sorted(groups):
        pts = groups[date]
        coords = np.array([p[0] for p in pts])
        values = np.array([p[2] for p in pts])
        exog = np.array([p[1] for p in pts]) if schema.exogenous else None
        nodes = None
        if fixed is not None:
            try:
                nodes = np.array([key_to_node[tuple(c)] for c in coords.tolist()])
            except KeyError as exc:
                raise GridMismatch(f"{date}: location {exc.args[0]} not on grid") from None
            if len(set(nodes.tolist())) != len(nodes) or len(nodes) != len(fixed):
                raise GridMismatch(f"{date}: node set differs from grid {grid_id!r}")
            order = np.argsort(nodes)
            coords, values, nodes = coords[order], values[order], nodes[order]
            exog = None if exog is None else exog[order]
        observations.append(Observation(date, coords, values, exog, nodes,
                                         grid_id if fixed is not None else None))
    return Dataset(tuple(observations), len(schema.coords), fixed,
                   grid_id if fixed is not None else None,
                   tuple(schema.coords), tuple(schema.exogenous))


def save_dataset(ds: Dataset, path) -> None:
    """Write ``ds`` in long format; floats use ``repr`` so values round-trip exactly."""
    header = ["date", *ds.coord_names, *ds.exog_names, "value"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for o in ds:
            for j in range(o.m):
                row = [o.date, *(repr(float(x)) for x in o.coords[j])]
                if o.exog is not None:
                    row += [repr(float(x)) for x in o.exog[j]]
                row.append(repr(float(o.values[j])))
                w.writerow(row)


def from_matrix(dates: Sequence[str], grid: np.ndarray, values: np.ndarray,
                exog: np.ndarray | None = None, grid_id: str = "grid",
                coord_names: tuple[str, ...] = (), exog_names: tuple[str, ...] = ()) -> Dataset:
    """Build a fixed-grid dataset from an ``(N, m)`` value matrix."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None]
    nodes = np.arange(len(grid))
    obs = []
    for i, date in enumerate(dates):
        ex = None if exog is None else np.asarray(exog[i]).reshape(len(grid), -1)
        obs.append(Observation(str(date), grid, values[i], ex, nodes, grid_id))
    if exog is not None and not exog_names:
        exog_names = tuple(f"x{k + 1}" for k in range(obs[0].exog.shape[1]))
    return Dataset(tuple(obs), grid.shape[1], grid, grid_id, coord_names, exog_names)


# --------------------------------------------------------------------------
# Splits

def chronological_split(ds: Dataset, test_fraction: float, validation_fraction: float):
    """Split into contiguous (calibration, validation, test) blocks, test last."""
    for name, frac in (("test_fraction", test_fraction), ("validation_fraction", validation_fraction)):
        if not 0.0 < frac < 1.0:
            raise InvalidFraction(f"{name} must lie in (0, 1), got {frac}")
    if test_fraction + validation_fraction >= 1.0:
        raise InvalidFraction("test_fraction + validation_fraction must be < 1")
    n = len(ds)
    n_test = int(round(n * test_fraction))
    n_valid = int(round(n * validation_fraction))
    n_calib = n - n_test - n_valid
    if min(n_test, n_valid, n_calib) < 1:
        raise InvalidFraction(f"split of {n} observations leaves an empty block")
    return ds[:n_calib], ds[n_calib:n_calib + n_valid], ds[n_calib + n_valid:]


def protocol_split(ds: Dataset, test_fraction: float = 0.2, validation_share: float = 0.25):
    """Training/test split followed by a calibration/validation split of the training block.

    ``validation_share`` is the validation part of the training block (75/25 by
    default), so an 80:20 train/test split yields 60/20/20 overall.
    """
    if not 0.0 < validation_share < 1.0:
        raise InvalidFraction(f"validation_share must lie in (0, 1), got {validation_share}")
    return chronological_split(ds, test_fraction, (1.0 - test_fraction) * validation_share)


# --------------------------------------------------------------------------
# Masking

MASK_MODES = ("keep_fraction", "keep_nodes", "keep_count_uniform", "keep_count_less_correlated")


@dataclass(frozen=True)
class MaskSpec:
    """Which points of an observation stay visible.

    ``parameter`` is a fraction for ``keep_fraction``, an ``(k, d)`` node array
    for ``keep_nodes`` and a point count for the two ``keep_count_*`` modes.
    """

    mode: str
    parameter: object = field(default=None)

    def __post_init__(self):
        if self.mode not in MASK_MODES:
            raise DataError(f"unknown mask mode {self.mode!r}; expected one of {MASK_MODES}")
        if self.mode == "keep_fraction":
            if not 0.0 < float(self.parameter) <= 1.0:
                raise DataError(f"keep_fraction must lie in (0, 1], got {self.parameter}")
        elif self.mode == "keep_nodes":
            nodes = np.atleast_2d(np.asarray(self.parameter, dtype=float))
            if nodes.size == 0:
                raise DataError("keep_nodes needs at least one node")
            object.__setattr__(self, "parameter", nodes)
        else:
            if int(self.parameter) < 1:
                raise DataError(f"{self.mode} count must be >= 1")

    @classmethod
    def parse(cls, text: str) -> "MaskSpec":
        """``keep_fraction:0.1``, ``keep_count_uniform:40`` or
        ``keep_nodes:u1,t1;u2,t2`` (``keep_nodes:@file`` reads a grid file)."""
        mode, _, arg = text.partition(":")
        mode = mode.strip()
        if mode == "keep_fraction":
            return cls(mode, float(arg))
        if mode == "keep_nodes":
            if arg.startswith("@"):
                return cls(mode, load_grid(arg[1:]))
            return cls(mode, [[float(x) for x in node.split(",")] for node in arg.split(";") if node])
        if mode in MASK_MODES:
            return cls(mode, int(arg))
        raise DataError(f"unknown mask mode {mode!r}")

    def to_json(self):
        p = self.parameter
        return {"mode": self.mode, "parameter": p.tolist() if isinstance(p, np.ndarray) else p}


def _uniform_slices(obs: Observation, count: int, rng: np.random.Generator) -> np.ndarray:
    slice_keys = np.unique(obs.coords[:, 0])
    members = [np.flatnonzero(obs.coords[:, 0] == key) for key in slice_keys]
    quota = [min(2, len(mem)) for mem in members]
    if count < sum(quota):
        raise MaskInfeasible(
            f"{obs.date}: {count} points cannot cover {len(members)} slices with 2 points each")
    extra = count - sum(quota)
    # Extra points go to the shortest slices first, one at a time.
    order = sorted(range(len(members)), key=lambda k: len(members[k]))
    while extra:
        progressed = False
        for k in order:
            mem = members[k]
            if extra and quota[k] < len(mem):
                quota[k] += 1
                extra -= 1
                progressed = True
        if not progressed:
            break
    keep = [rng.choice(mem, size=q, replace=False) for mem, q in zip(members, quota)]
    return np.sort(np.concatenate(keep))


def least_correlated_nodes(history: Dataset, count: int) -> np.ndarray:
    """Greedy farthest-point selection of grid nodes in correlation distance ``1 - |rho|``."""
    values = history.values_matrix()
    m = values.shape[1]
    if count > m:
        raise MaskInfeasible(f"cannot pick {count} of {m} nodes")
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.corrcoef(values, rowvar=False)
    rho = np.where(np.isfinite(rho), np.abs(rho), 1.0)
    dist = 1.0 - rho
    chosen = [int(np.argmin(rho.sum(axis=1)))]
    nearest = dist[chosen[0]].copy()
    while len(chosen) < count:
        nearest[chosen] = -np.inf
        nxt = int(np.argmax(nearest))
        chosen.append(nxt)
        nearest = np.minimum(nearest, dist[nxt])
    return np.sort(np.array(chosen))


def mask_observation(obs: Observation, spec: MaskSpec, rng_seed: int,
                     history: Dataset | None = None) -> tuple[Observation, Observation | None]:
    """Split ``obs`` into (visible, hidden) points; hidden is None when nothing is masked."""
    rng = np.random.default_rng(rng_seed)
    m = obs.m
    if spec.mode == "keep_fraction":
        count = max(1, int(math.floor(float(spec.parameter) * m + 0.5)))
        keep = np.sort(rng.choice(m, size=count, replace=False))
    elif spec.mode == "keep_nodes":
        nodes = spec.parameter
        if nodes.shape[1] != obs.d:
            raise MaskInfeasible(f"mask nodes have dimension {nodes.shape[1]}, observation {obs.d}")
        keep = []
        for node in nodes:
            hit = np.flatnonzero(np.all(np.isclose(obs.coords, node, rtol=0, atol=1e-9), axis=1))
            if len(hit) == 0:
                raise MaskInfeasible(f"{obs.date}: node {node.tolist()} not observed")
            keep.append(hit[0])
        keep = np.unique(keep)
    elif spec.mode == "keep_count_uniform":
        count = int(spec.parameter)
        if count > m:
            raise MaskInfeasible(f"{obs.date}: cannot keep {count} of {m} points")
        keep = _uniform_slices(obs, count, rng)
    else:
        if history is None or history.fixed_grid is None or obs.nodes is None:
            raise MaskInfeasible("less-correlated masking needs a fixed grid and a history")
        grid_nodes = least_correlated_nodes(history, int(spec.parameter))
        position = {int(n): j for j, n in enumerate(obs.nodes)}
        try:
            keep = np.sort(np.array([position[int(n)] for n in grid_nodes]))
        except KeyError:
            raise MaskInfeasible(f"{obs.date}: selected node missing from observation") from None
    hidden_idx = np.setdiff1d(np.arange(m), keep)
    hidden = obs.subset(hidden_idx) if len(hidden_idx) else None
    return obs.subset(keep), hidden
