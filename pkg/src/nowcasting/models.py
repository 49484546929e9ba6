"""Decoders that map factor codes back to curves and surfaces.

Four families share one completion interface (:meth:`predict` and
:meth:`code_grad` over a :class:`PointSet`):

* :class:`FunctionalDecoder` -- a dense tanh network ``D(c, n)`` evaluated
  point by point at arbitrary locations, so grids may move between days;
* :class:`ConvAutoencoder` -- convolutional encoder/decoder on a fixed grid;
* :class:`LinearProjection` -- linear encoder/decoder with biases;
* :class:`ClassicalPCA` -- spectral PCA of the sample covariance.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from ._io import atomic_write
from .data import Observation
from .errors import GridMismatch, RankDeficientWarning, ShapeMismatch

MODEL_FORMAT = "nowcasting.model"
MODEL_VERSION = 1


@dataclass
class PointSet:
    """Points of ``n_owners`` observations stacked row-wise, grouped by owner."""

    owner: np.ndarray
    coords: np.ndarray
    exog: np.ndarray | None
    nodes: np.ndarray | None
    values: np.ndarray | None
    n_owners: int

    @classmethod
    def from_observations(cls, observations: Sequence[Observation], with_values: bool = True):
        observations = list(observations)
        owner = np.concatenate([np.full(o.m, i) for i, o in enumerate(observations)])
        coords = np.concatenate([o.coords for o in observations])
        exog = None
        if observations[0].exog is not None:
            exog = np.concatenate([o.exog for o in observations])
        nodes = None
        if all(o.nodes is not None for o in observations):
            nodes = np.concatenate([o.nodes for o in observations])
        values = np.concatenate([o.values for o in observations]) if with_values else None
        return cls(owner, coords, exog, nodes, values, len(observations))

    @property
    def starts(self) -> np.ndarray:
        return np.searchsorted(self.owner, np.arange(self.n_owners))

    def take(self, rows) -> "PointSet":
        rows = np.asarray(rows)
        return PointSet(self.owner[rows], self.coords[rows],
                        None if self.exog is None else self.exog[rows],
                        None if self.nodes is None else self.nodes[rows],
                        None if self.values is None else self.values[rows], self.n_owners)


def _sum_by_owner(rows: np.ndarray, owner: np.ndarray, n_owners: int) -> np.ndarray:
    """Row sums grouped by a sorted ``owner`` vector; owners without rows get zero."""
    out = np.zeros((n_owners, rows.shape[1]))
    if len(owner) == 0:
        return out
    present, starts = np.unique(owner, return_index=True)
    out[present] = np.add.reduceat(rows, starts, axis=0)
    return out


# --------------------------------------------------------------------------
# functional decoder

TRANSFORMS = ("identity", "log")


@dataclass
class InputScaler:
    """Per-column transform followed by an affine map of the training range onto [-1, 1]."""

    transforms: tuple[str, ...]
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, raw: np.ndarray, transforms: Sequence[str]) -> "InputScaler":
        u = cls._transform(raw, transforms)
        return cls(tuple(transforms), u.min(axis=0), u.max(axis=0))

    @staticmethod
    def _transform(raw, transforms):
        u = np.array(raw, dtype=float, copy=True)
        for j, t in enumerate(transforms):
            if t == "log":
                if np.any(u[:, j] <= 0):
                    raise ValueError(f"log transform of non-positive input in column {j}")
                u[:, j] = np.log(u[:, j])
            elif t != "identity":
                raise ValueError(f"unknown transform {t!r}")
        return u

    @property
    def _scale(self):
        span = self.hi - self.lo
        return 2.0 / np.where(span > 0, span, 1.0)

    def apply(self, raw):
        """Scaled inputs and the elementwise derivative ``dz/draw``."""
        u = self._transform(raw, self.transforms)
        z = (u - self.lo) * self._scale - 1.0
        dz = np.broadcast_to(self._scale, u.shape).copy()
        for j, t in enumerate(self.transforms):
            if t == "log":
                dz[:, j] /= raw[:, j]
        return z, dz

    def to_json(self):
        return {"transforms": list(self.transforms), "lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_json(cls, d):
        return cls(tuple(d["transforms"]), np.array(d["lo"], dtype=float), np.array(d["hi"], dtype=float))


@dataclass(frozen=True)
class FunctionalDecoderSpec:
    d: int
    f: int
    n_exogenous: int = 0
    hidden: tuple[int, ...] = (20, 20)
    coord_transforms: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        transforms = self.coord_transforms or ("identity",) * self.d
        if len(transforms) != self.d or any(t not in TRANSFORMS for t in transforms):
            raise ValueError(f"coord_transforms must be {self.d} of {TRANSFORMS}")
        object.__setattr__(self, "coord_transforms", tuple(transforms))

    @property
    def input_width(self) -> int:
        return self.f + self.d + self.n_exogenous

    def net(self):
        layers, width = [], self.input_width
        for k, units in enumerate(self.hidden, 1):
            layers.append(nn.dense(f"hidden{k}", width, units, "tanh"))
            width = units
        layers.append(nn.dense("output", width, 1, "linear"))
        return layers


class FunctionalDecoder:
    kind = "functional"

    def __init__(self, spec: FunctionalDecoderSpec, params: nn.Params, scaler: InputScaler,
                 code_dates: Sequence[str] = (), codes: np.ndarray | None = None,
                 value_shift: float = 0.0, value_scale: float = 1.0):
        self.spec = spec
        # output is value_shift + value_scale * net(...)
        self.value_shift = float(value_shift)
        self.value_scale = float(value_scale)
        self.net = spec.net()
        self.params = params
        self.scaler = scaler
        self.code_dates = tuple(code_dates)
        self.codes = np.zeros((0, spec.f)) if codes is None else np.asarray(codes, dtype=float)

    @property
    def f(self) -> int:
        return self.spec.f

    def stored_code(self, date: str) -> np.ndarray | None:
        try:
            return self.codes[self.code_dates.index(date)]
        except ValueError:
            return None

    def features(self, coords, exog=None):
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        if coords.shape[1] != self.spec.d:
            raise ShapeMismatch(f"locations have dimension {coords.shape[1]}, model expects {self.spec.d}")
        raw = coords
        if self.spec.n_exogenous:
            if exog is None:
                raise ShapeMismatch("model needs exogenous inputs")
            exog = np.asarray(exog, dtype=float).reshape(len(coords), -1)
            if exog.shape[1] != self.spec.n_exogenous:
                raise ShapeMismatch(f"{exog.shape[1]} exogenous inputs, model expects {self.spec.n_exogenous}")
            raw = np.hstack([coords, exog])
        return self.scaler.apply(raw)

    def forward(self, params, codes, owner, z):
        x = np.hstack([codes[owner], z])
        out, tape = nn.forward(self.net, params, x)
        return self.value_shift + self.value_scale * out[:, 0], tape

    def backward(self, params, tape, g):
        grads, gx = nn.backward(tape, self.value_scale * g[:, None], params)
        return grads, gx[:, :self.f], gx[:, self.f:]

    # completion interface
    def predict(self, codes, points: PointSet):
        z, dz = self.features(points.coords, points.exog)
        pred, tape = self.forward(self.params, codes, points.owner, z)
        return pred, (tape, points)

    def code_grad(self, ctx, g):
        tape, points = ctx
        _, gc, _ = self.backward(self.params, tape, g)
        return _sum_by_owner(gc, points.owner, points.n_owners)

    def decode(self, code, coords, exog=None) -> np.ndarray:
        """Values of ``D(code, n)`` at each location ``n``."""
        code = np.asarray(code, dtype=float).reshape(1, self.f)
        z, _ = self.features(coords, exog)
        pred, _ = self.forward(self.params, code, np.zeros(len(z), dtype=int), z)
        return pred

    def decode_with_location_grad(self, code, coords, exog=None):
        """Values and ``dD/dcoords`` (``(P, d)``), through the input transforms."""
        code = np.asarray(code, dtype=float).reshape(1, self.f)
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        z, dz = self.features(coords, exog)
        pred, tape = self.forward(self.params, code, np.zeros(len(z), dtype=int), z)
        _, _, gz = self.backward(self.params, tape, np.ones(len(z)))
        return pred, (gz * dz)[:, :self.spec.d]

    def to_json(self) -> dict:
        return {"spec": asdict(self.spec), "normalization": self.scaler.to_json(),
                "params": nn.params_to_json(self.params),
                "codes": {"dates": list(self.code_dates), "values": self.codes.tolist()},
                "value_scaling": {"shift": self.value_shift, "scale": self.value_scale}}

    @classmethod
    def from_json(cls, doc: dict) -> "FunctionalDecoder":
        spec = FunctionalDecoderSpec(**{k: tuple(v) if isinstance(v, list) else v
                                        for k, v in doc["spec"].items()})
        codes = doc.get("codes") or {"dates": [], "values": []}
        values = np.array(codes["values"], dtype=float).reshape(-1, spec.f)
        vs = doc.get("value_scaling", {"shift": 0.0, "scale": 1.0})
        return cls(spec, nn.params_from_json(doc["params"]), InputScaler.from_json(doc["normalization"]),
                   codes["dates"], values, vs["shift"], vs["scale"])


# --------------------------------------------------------------------------
# fixed-grid models

class GridModel:
    """Shared plumbing for models defined on a fixed grid of ``m`` nodes."""

    m: int
    f: int
    grid_shape: tuple[int, ...]

    def _as_batch(self, values) -> tuple[np.ndarray, bool]:
        v = np.asarray(values, dtype=float)
        single = False
        if v.shape == self.grid_shape or v.shape == (self.m,):
            v, single = v.reshape(1, self.m), True
        elif v.ndim == 2 and v.shape[1] == self.m:
            pass
        elif v.ndim == 3 and v.shape[1:] == self.grid_shape:
            v = v.reshape(len(v), self.m)
        else:
            raise GridMismatch(f"values of shape {v.shape} are not on the {self.grid_shape} grid")
        return v, single

    def autoencode(self, values):
        """``(code, reconstruction)`` for one observation or an ``(N, m)`` batch."""
        v, single = self._as_batch(values)
        codes = self.encode(v)
        recon = self.decode(codes)
        return (codes[0], recon[0]) if single else (codes, recon)

    def encode_observation(self, obs: Observation) -> np.ndarray:
        if obs.nodes is None or obs.m != self.m:
            raise GridMismatch(f"{obs.date}: encoder needs a complete grid observation")
        v = np.empty(self.m)
        v[obs.nodes] = obs.values
        return self.encode(v[None])[0]

    def predict(self, codes, points: PointSet):
        if points.nodes is None:
            raise GridMismatch("grid model needs node indices")
        full, tape = self.decode_forward(codes)
        return full[points.owner, points.nodes], (tape, points, full.shape)

    def code_grad(self, ctx, g):
        tape, points, shape = ctx
        gfull = np.zeros(shape)
        np.add.at(gfull, (points.owner, points.nodes), g)
        return self.decode_backward(tape, gfull)


class _NetAutoencoder(GridModel):
    """Encoder and decoder are plain layer stacks sharing one parameter dict."""

    def __init__(self, params: nn.Params, value_shift: float = 0.0, value_scale: float = 1.0):
        self.params = params
        # the networks see (v - shift) / scale and emit shift + scale * out
        self.value_shift = float(value_shift)
        self.value_scale = float(value_scale)

    encoder_net: list
    decoder_net: list

    @property
    def net(self):
        return self.encoder_net + self.decoder_net

    def _net_input(self, v):
        return (v - self.value_shift) / self.value_scale

    def _net_output(self, out):
        return self.value_shift + self.value_scale * out.reshape(len(out), self.m)

    def encode(self, values):
        v, _ = self._as_batch(values)
        out, _ = nn.forward(self.encoder_net, self.params, self._net_input(v))
        return out.reshape(len(v), self.f)

    def decode_forward(self, codes, params=None):
        codes = np.atleast_2d(np.asarray(codes, dtype=float))
        out, tape = nn.forward(self.decoder_net, params if params is not None else self.params, codes)
        return self._net_output(out), tape

    def decode_backward(self, tape, g, params=None):
        g = self.value_scale * np.asarray(g).reshape(tape[-1][4].shape)
        _, gc = nn.backward(tape, g, params if params is not None else self.params)
        return gc.reshape(len(g), self.f)

    def decode(self, codes):
        return self.decode_forward(codes)[0]

    def to_json(self) -> dict:
        return {"spec": asdict(self.spec), "params": nn.params_to_json(self.params),
                "value_scaling": {"shift": self.value_shift, "scale": self.value_scale}}

    @staticmethod
    def _scaling(doc):
        vs = doc.get("value_scaling", {"shift": 0.0, "scale": 1.0})
        return vs["shift"], vs["scale"]


@dataclass(frozen=True)
class LinearProjectionSpec:
    m: int
    f: int


class LinearProjection(_NetAutoencoder):
    kind = "linear"

    def __init__(self, spec: LinearProjectionSpec, params: nn.Params | None = None, seed: int = 0,
                 value_shift: float = 0.0, value_scale: float = 1.0):
        self.spec = spec
        self.m, self.f = spec.m, spec.f
        self.grid_shape = (spec.m,)
        self.encoder_net = [nn.dense("encoder", spec.m, spec.f)]
        self.decoder_net = [nn.dense("decoder", spec.f, spec.m)]
        super().__init__(params if params is not None else nn.init_params(self.net, seed, "glorot_normal"),
                         value_shift, value_scale)

    @classmethod
    def from_json(cls, doc):
        return cls(LinearProjectionSpec(**doc["spec"]), nn.params_from_json(doc["params"]),
                   0, *cls._scaling(doc))


@dataclass(frozen=True)
class ConvAutoencoderSpec:
    grid_shape: tuple[int, int] = (10, 8)
    f: int = 8
    kernels: tuple[tuple[int, int], ...] = ((5, 4), (4, 3), (3, 3))
    channels: tuple[int, ...] = (3, 9, 27)

    def __post_init__(self):
        object.__setattr__(self, "grid_shape", tuple(self.grid_shape))
        object.__setattr__(self, "kernels", tuple(tuple(k) for k in self.kernels))
        object.__setattr__(self, "channels", tuple(self.channels))
        if len(self.kernels) != len(self.channels):
            raise ValueError("one channel count per convolution kernel")
        try:
            spatial = nn.output_shape(self.encoder_convs(), (1, *self.grid_shape))[1:]
        except ShapeMismatch as exc:
            raise ValueError(str(exc)) from None
        if spatial != (1, 1):
            raise ValueError(f"convolutions must reduce {self.grid_shape} to (1, 1), got {spatial}")

    def encoder_convs(self):
        layers, c_in = [], 1
        for k, (kernel, c_out) in enumerate(zip(self.kernels, self.channels), 1):
            layers.append(nn.conv2d(f"conv{k}", c_in, c_out, kernel, "softplus"))
            c_in = c_out
        return layers

    def decoder_deconvs(self):
        layers = []
        n = len(self.kernels)
        for k in range(n, 0, -1):
            c_in = self.channels[k - 1]
            c_out = self.channels[k - 2] if k > 1 else 1
            act = "softplus" if k > 1 else "linear"
            layers.append(nn.deconv2d(f"deconv{k}", c_in, c_out, self.kernels[k - 1], act))
        return layers


class ConvAutoencoder(_NetAutoencoder):
    kind = "conv"

    def __init__(self, spec: ConvAutoencoderSpec, params: nn.Params | None = None, seed: int = 0,
                 value_shift: float = 0.0, value_scale: float = 1.0):
        self.spec = spec
        self.grid_shape = spec.grid_shape
        self.m = int(np.prod(spec.grid_shape))
        self.f = spec.f
        width = spec.channels[-1]
        self.convs = spec.encoder_convs()
        self.deconvs = spec.decoder_deconvs()
        self.enc_dense = nn.dense("encoder_dense", width, spec.f)
        self.dec_dense = nn.dense("decoder_dense", spec.f, width)
        self.encoder_net = self.convs + [self.enc_dense]
        self.decoder_net = [self.dec_dense] + self.deconvs
        super().__init__(params if params is not None else nn.init_params(self.net, seed, "auto"),
                         value_shift, value_scale)

    def _net_input(self, v):
        return super()._net_input(v).reshape(len(v), 1, *self.grid_shape)

    def stage_net(self, depth: int):
        """Outer ``depth`` conv/deconv pairs only; ``depth = len(kernels) + 1`` is the full model."""
        n = len(self.convs)
        if depth > n:
            return self.net
        return self.convs[:depth] + self.deconvs[n - depth:]

    def stage_pair(self, depth: int) -> list[nn.LayerSpec]:
        n = len(self.convs)
        if depth > n:
            return [self.enc_dense, self.dec_dense]
        return [self.convs[depth - 1], self.deconvs[n - depth]]

    @classmethod
    def from_json(cls, doc):
        return cls(ConvAutoencoderSpec(**doc["spec"]), nn.params_from_json(doc["params"]),
                   0, *cls._scaling(doc))


class ClassicalPCA(GridModel):
    """Mean plus the top ``f`` eigenvectors of the sample covariance (``ddof=0``)."""

    kind = "pca"

    def __init__(self, mean, components, eigenvalues):
        self.mean = np.asarray(mean, dtype=float)
        self.components = np.atleast_2d(np.asarray(components, dtype=float))
        self.eigenvalues = np.asarray(eigenvalues, dtype=float)
        self.f, self.m = self.components.shape
        self.grid_shape = (self.m,)

    def encode(self, values):
        v, _ = self._as_batch(values)
        return (v - self.mean) @ self.components.T

    def decode(self, codes):
        return self.mean + np.atleast_2d(codes) @ self.components

    def decode_forward(self, codes):
        return self.decode(codes), None

    def decode_backward(self, tape, g):
        return g @ self.components.T

    def to_json(self):
        return {"mean": self.mean.tolist(), "components": self.components.tolist(),
                "eigenvalues": self.eigenvalues.tolist()}

    @classmethod
    def from_json(cls, doc):
        return cls(doc["mean"], doc["components"], doc["eigenvalues"])


def pca_fit(values, f: int, tol: float = 1e-12) -> ClassicalPCA:
    """Spectral PCA; components are returned in descending eigenvalue order."""
    y = np.asarray(values, dtype=float)
    if y.ndim != 2:
        raise ShapeMismatch("pca_fit expects an (N, m) matrix")
    n, m = y.shape
    if not 1 <= f <= m:
        raise ValueError(f"need 1 <= f <= {m}, got {f}")
    if n < f:
        raise ValueError(f"need at least {f} observations, got {n}")
    mean = y.mean(axis=0)
    centered = y - mean
    cov = centered.T @ centered / n
    eigval, eigvec = np.linalg.eigh(cov)
    order = np.argsort(eigval)[::-1]
    eigval, eigvec = eigval[order], eigvec[:, order]
    n_pos = int(np.sum(eigval > tol * max(eigval[0], 1e-300)))
    if n_pos < f:
        # eigh already returns a full orthonormal basis, which serves as the completion
        warnings.warn(f"only {n_pos} non-zero eigenvalues for {f} components",
                      RankDeficientWarning, stacklevel=2)
    return ClassicalPCA(mean, eigvec[:, :f].T, np.clip(eigval, 0.0, None))


# --------------------------------------------------------------------------
# model files

_KINDS = {"functional": FunctionalDecoder, "conv": ConvAutoencoder,
          "linear": LinearProjection, "pca": ClassicalPCA}


def model_to_json(model, extra: dict | None = None) -> dict:
    doc = {"format": MODEL_FORMAT, "version": MODEL_VERSION, "kind": model.kind}
    doc.update(model.to_json())
    if extra:
        doc["meta"] = extra
    return doc


def model_from_json(doc: dict):
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a model file (format={doc.get('format')!r})")
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model file version {doc.get('version')!r}")
    try:
        cls = _KINDS[doc["kind"]]
    except KeyError:
        raise ValueError(f"unknown model kind {doc.get('kind')!r}") from None
    return cls.from_json(doc)


def save_model(model, path, extra: dict | None = None) -> None:
    atomic_write(path, json.dumps(model_to_json(model, extra)))


def load_model(path):
    return model_from_json(json.loads(Path(path).read_text()))
