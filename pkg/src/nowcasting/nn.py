"""Small reverse-mode differentiation engine for dense and 2-D convolution stacks.

A network is a list of :class:`LayerSpec`; its parameters live in a plain
``dict`` mapping ``"<layer>.weight"`` / ``"<layer>.bias"`` to float64 arrays.
:func:`forward` returns the output together with a tape of cached
intermediates, and :func:`backward` replays the tape in reverse to produce
parameter gradients and the gradient with respect to the network input.

Shapes:

* dense: weight ``(n_out, n_in)``, input ``(N, n_in)``, ``y = x W^T + b``
* conv2d: weight ``(c_out, c_in, kh, kw)``, input ``(N, c_in, H, W)``, VALID
  padding, output ``(N, c_out, H - kh + 1, W - kw + 1)``
* deconv2d: transposed convolution, weight ``(c_in, c_out, kh, kw)``, output
  ``(N, c_out, H + kh - 1, W + kw - 1)``; exactly the adjoint of conv2d with
  the same kernel array.

A dense layer flattens 4-D input; a (de)convolution receiving 2-D input
treats it as ``(N, C, 1, 1)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._io import atomic_write
from .errors import ShapeMismatch

Params = dict[str, np.ndarray]

ACTIVATIONS = ("linear", "tanh", "softplus")
KINDS = ("dense", "conv2d", "deconv2d")
TRUNCATION = 2.0  # truncated normal draws are rejected beyond this many std


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    n_in: int  # input units (dense) or channels (conv kinds)
    n_out: int
    kernel: tuple[int, int] | None = None
    activation: str = "linear"
    padding: str = "valid"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.n_in < 1 or self.n_out < 1:
            raise ValueError("layer sizes must be >= 1")
        if self.kind != "dense":
            if self.kernel is None or min(self.kernel) < 1:
                raise ValueError("convolution kernels must have dims >= 1")
            if self.padding != "valid":
                raise ValueError("only VALID padding is supported")
            object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "dense":
            return (self.n_out, self.n_in)
        if self.kind == "conv2d":
            return (self.n_out, self.n_in, *self.kernel)
        return (self.n_in, self.n_out, *self.kernel)

    def to_json(self) -> dict:
        return {"name": self.name, "kind": self.kind, "n_in": self.n_in, "n_out": self.n_out,
                "kernel": list(self.kernel) if self.kernel else None,
                "activation": self.activation, "padding": self.padding}

    @classmethod
    def from_json(cls, d: dict) -> "LayerSpec":
        kernel = tuple(d["kernel"]) if d.get("kernel") else None
        return cls(d["name"], d["kind"], d["n_in"], d["n_out"], kernel,
                   d.get("activation", "linear"), d.get("padding", "valid"))


def dense(name, n_in, n_out, activation="linear") -> LayerSpec:
    return LayerSpec(name, "dense", n_in, n_out, None, activation)


def conv2d(name, c_in, c_out, kernel, activation="linear") -> LayerSpec:
    return LayerSpec(name, "conv2d", c_in, c_out, kernel, activation)


def deconv2d(name, c_in, c_out, kernel, activation="linear") -> LayerSpec:
    return LayerSpec(name, "deconv2d", c_in, c_out, kernel, activation)


# --------------------------------------------------------------------------
# activations

def softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def activate(kind: str, z):
    if kind == "linear":
        return z
    if kind == "tanh":
        return np.tanh(z)
    return softplus(z)


def activation_grad(kind: str, z, a):
    """Local derivative given pre-activation ``z`` and output ``a``."""
    if kind == "linear":
        return np.ones_like(z)
    if kind == "tanh":
        return 1.0 - a * a
    return _sigmoid(z)


# --------------------------------------------------------------------------
# convolution primitives

def conv2d_valid(x, k):
    """``(N, C, H, W) * (O, C, kh, kw) -> (N, O, H-kh+1, W-kw+1)`` cross-correlation."""
    kh, kw = k.shape[2:]
    if x.shape[2] < kh or x.shape[3] < kw:
        raise ShapeMismatch(f"input spatial dims {x.shape[2:]} smaller than kernel {(kh, kw)}")
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return np.einsum("nchwij,ocij->nohw", win, k, optimize=True)


def deconv2d_full(y, k):
    """Adjoint of :func:`conv2d_valid` in ``x``: ``(N, O, h, w) -> (N, C, h+kh-1, w+kw-1)``."""
    n, o, h, w = y.shape
    o2, c, kh, kw = k.shape
    if o != o2:
        raise ShapeMismatch(f"deconv input has {o} channels, kernel expects {o2}")
    out = np.zeros((n, c, h + kh - 1, w + kw - 1))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + h, j:j + w] += np.einsum("nohw,oc->nchw", y, k[:, :, i, j])
    return out


def conv2d_kernel_grad(x, g, kernel):
    """Gradient of ``<conv2d_valid(x, k), g>`` with respect to ``k``."""
    win = sliding_window_view(x, kernel, axis=(2, 3))
    return np.einsum("nchwij,nohw->ocij", win, g, optimize=True)


# --------------------------------------------------------------------------
# forward / backward

def _as_input(layer: LayerSpec, x):
    if layer.kind == "dense":
        x = x.reshape(x.shape[0], -1)
        if x.shape[1] != layer.n_in:
            raise ShapeMismatch(f"{layer.name}: expected {layer.n_in} inputs, got {x.shape[1]}")
        return x
    if x.ndim == 2:
        x = x.reshape(x.shape[0], x.shape[1], 1, 1)
    if x.ndim != 4 or x.shape[1] != layer.n_in:
        raise ShapeMismatch(f"{layer.name}: expected {layer.n_in} channels, got shape {x.shape}")
    return x


def forward(net, params: Params, x):
    """Evaluate ``net`` on a batch; returns ``(output, tape)``."""
    x = np.asarray(x, dtype=float)
    if x.ndim < 2:
        raise ShapeMismatch(f"input must be batched, got shape {x.shape}")
    tape = []
    for layer in net:
        xin = _as_input(layer, x)
        w = params[f"{layer.name}.weight"]
        b = params[f"{layer.name}.bias"]
        if layer.kind == "dense":
            z = xin @ w.T + b
        elif layer.kind == "conv2d":
            z = conv2d_valid(xin, w) + b[None, :, None, None]
        else:
            z = deconv2d_full(xin, w) + b[None, :, None, None]
        a = activate(layer.activation, z)
        tape.append((layer, x.shape, xin, z, a))
        x = a
    return x, tape


def backward(tape, grad_output, params: Params):
    """Reverse pass; returns ``(param_grads, input_grad)``."""
    g = np.asarray(grad_output, dtype=float)
    grads: Params = {}
    for layer, in_shape, xin, z, a in reversed(tape):
        if g.shape != a.shape:
            g = g.reshape(a.shape)
        gz = g * activation_grad(layer.activation, z, a)
        w = params[f"{layer.name}.weight"]
        if layer.kind == "dense":
            grads[f"{layer.name}.weight"] = gz.T @ xin
            grads[f"{layer.name}.bias"] = gz.sum(axis=0)
            gx = gz @ w
        elif layer.kind == "conv2d":
            grads[f"{layer.name}.weight"] = conv2d_kernel_grad(xin, gz, layer.kernel)
            grads[f"{layer.name}.bias"] = gz.sum(axis=(0, 2, 3))
            gx = deconv2d_full(gz, w)
        else:
            # deconv(y, w) = conv^T: <deconv(y, w), g> = <y, conv(g, w)>
            grads[f"{layer.name}.weight"] = conv2d_kernel_grad(gz, xin, layer.kernel)
            grads[f"{layer.name}.bias"] = gz.sum(axis=(0, 2, 3))
            gx = conv2d_valid(gz, w)
        g = gx.reshape(in_shape)
    return grads, g


def output_shape(net, input_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-sample output shape, without evaluating the network."""
    shape = tuple(input_shape)
    for layer in net:
        if layer.kind == "dense":
            shape = (layer.n_out,)
            continue
        if len(shape) == 1:
            shape = (shape[0], 1, 1)
        kh, kw = layer.kernel
        if layer.kind == "conv2d":
            h, w = shape[1] - kh + 1, shape[2] - kw + 1
            if h < 1 or w < 1:
                raise ShapeMismatch(f"{layer.name}: kernel {layer.kernel} exceeds input {shape[1:]}")
        else:
            h, w = shape[1] + kh - 1, shape[2] + kw - 1
        shape = (layer.n_out, h, w)
    return shape


# --------------------------------------------------------------------------
# initialisation and regularisation

def _truncated_normal(rng, shape, sigma):
    out = rng.normal(0.0, sigma, size=shape)
    bad = np.abs(out) > TRUNCATION * sigma
    while bad.any():
        out[bad] = rng.normal(0.0, sigma, size=int(bad.sum()))
        bad = np.abs(out) > TRUNCATION * sigma
    return out


def glorot_std(layer: LayerSpec) -> float:
    if layer.kind == "dense":
        fan_in, fan_out = layer.n_in, layer.n_out
    else:
        area = layer.kernel[0] * layer.kernel[1]
        fan_in, fan_out = layer.n_in * area, layer.n_out * area
    return float(np.sqrt(4.0 / (fan_in + fan_out)))


def init_params(net, seed: int, scheme: str = "auto", sigma: float = 0.1) -> Params:
    """Draw weights; biases start at zero.

    ``scheme`` is ``"glorot_normal"`` (std ``sqrt(4 / (n_in + n_out))``),
    ``"truncated_normal"`` (std ``sigma``, truncated at ``2 sigma``) or
    ``"auto"``: Glorot for dense layers, truncated normal for convolutions.
    """
    if scheme not in ("auto", "glorot_normal", "truncated_normal"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    params: Params = {}
    for layer in net:
        use = scheme
        if scheme == "auto":
            use = "glorot_normal" if layer.kind == "dense" else "truncated_normal"
        if use == "glorot_normal":
            w = rng.normal(0.0, glorot_std(layer), size=layer.weight_shape)
        else:
            w = _truncated_normal(rng, layer.weight_shape, sigma)
        params[f"{layer.name}.weight"] = w
        params[f"{layer.name}.bias"] = np.zeros(layer.n_out)
    return params


def dense_weight_blocks(net) -> list[str]:
    return [f"{layer.name}.weight" for layer in net if layer.kind == "dense"]


def ridge_penalty(params: Params, coefficient: float, blocks):
    """``coefficient * sum(w**2)`` over ``blocks`` and its gradient (zero elsewhere)."""
    if coefficient < 0:
        raise ValueError("penalty coefficient must be >= 0")
    blocks = set(blocks)
    value = 0.0
    grad: Params = {}
    for name, w in params.items():
        if name in blocks and coefficient:
            value += coefficient * float(np.sum(w * w))
            grad[name] = 2.0 * coefficient * w
        else:
            grad[name] = np.zeros_like(w)
    return value, grad


# --------------------------------------------------------------------------
# parameter helpers

def copy_params(params: Params) -> Params:
    return {k: np.array(v, copy=True) for k, v in params.items()}


def add_into(acc: Params, other: Params) -> Params:
    for k, v in other.items():
        acc[k] = acc[k] + v if k in acc else v
    return acc


def n_parameters(params: Params) -> int:
    return int(sum(v.size for v in params.values()))


PARAMS_FORMAT = "nowcasting.params"
PARAMS_VERSION = 1


def params_to_json(params: Params) -> dict:
    # float repr in json is shortest-roundtrip, so reloading is bit exact
    return {"format": PARAMS_FORMAT, "version": PARAMS_VERSION,
            "blocks": [{"name": k, "shape": list(v.shape), "data": v.ravel().tolist()}
                       for k, v in params.items()]}


def params_from_json(doc: dict) -> Params:
    if doc.get("format") != PARAMS_FORMAT:
        raise ValueError(f"not a parameter document: {doc.get('format')!r}")
    if doc.get("version") != PARAMS_VERSION:
        raise ValueError(f"unsupported parameter version {doc.get('version')!r}")
    return {b["name"]: np.array(b["data"], dtype=float).reshape(b["shape"]) for b in doc["blocks"]}


def save_params(params: Params, path) -> None:
    atomic_write(path, json.dumps(params_to_json(params)))


def load_params(path) -> Params:
    return params_from_json(json.loads(Path(path).read_text()))
