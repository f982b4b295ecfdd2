"""Layered rectifier/linear networks with exact backpropagation.

A network is a stack of dense layers. Each layer is a ``(fan_out, fan_in + 1)``
weight matrix whose last column is the bias, followed by a rectifier or the
identity. All parameters live in one flat float64 buffer so optimizers,
serialization and parameter Jacobians can treat the network as a vector;
``RectifierNet.weights`` exposes per-layer matrix views into that buffer.

A unit is addressed by ``(layer, index)`` where ``layer`` counts non-input
layers from 0, so the output units are ``(n_layers - 1, k)``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, InputError, ShapeError, UnknownUnitError

RECTIFIER = "rectifier"
LINEAR = "linear"
KINDS = (RECTIFIER, LINEAR)

_MAGIC = b"GPNET\x00"
_FORMAT_VERSION = 1


@dataclass(eq=False)
class RectifierNet:
    sizes: tuple[int, ...]
    kinds: tuple[str, ...]
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        self.kinds = tuple(self.kinds)
        _check_architecture(self.sizes, self.kinds)
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (count_params(self.sizes),):
            raise ShapeError(
                f"expected {count_params(self.sizes)} parameters, got {self.params.shape}"
            )
        self._sizes_arr = np.asarray(self.sizes, dtype=np.int64)
        self._relu_arr = np.asarray([k == RECTIFIER for k in self.kinds], dtype=np.uint8)

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def output_dim(self) -> int:
        return self.sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def n_params(self) -> int:
        return self.params.shape[0]

    @property
    def weights(self) -> list[np.ndarray]:
        return unflatten(self, self.params)

    def copy(self) -> "RectifierNet":
        return RectifierNet(self.sizes, self.kinds, self.params.copy())

    def units(self):
        for k in range(self.n_layers):
            for j in range(self.sizes[k + 1]):
                yield (k, j)


@dataclass
class ActivationTrace:
    """Forward-pass record for one input vector.

    ``pre[k]`` and ``gates[k]`` belong to non-input layer ``k``; ``inputs[k]``
    is what layer ``k`` received (without the constant bias input).
    """

    x: np.ndarray
    pre: list[np.ndarray]
    gates: list[np.ndarray]
    inputs: list[np.ndarray]

    @property
    def sizes(self):
        return (self.x.shape[0],) + tuple(p.shape[0] for p in self.pre)


@dataclass
class BatchTrace:
    """Forward-pass record for a batch; ``pre`` concatenates every layer."""

    X: np.ndarray
    pre: np.ndarray


def count_params(sizes) -> int:
    return int(sum(sizes[k + 1] * (sizes[k] + 1) for k in range(len(sizes) - 1)))


def _check_architecture(sizes, kinds):
    if len(sizes) < 2:
        raise ConfigError("a network needs at least an input and an output layer")
    if any(int(s) < 1 for s in sizes):
        raise ConfigError(f"layer sizes must be positive, got {sizes}")
    if len(kinds) != len(sizes) - 1:
        raise ConfigError(
            f"need one activation kind per non-input layer: {len(sizes) - 1} layers, "
            f"{len(kinds)} kinds"
        )
    for k in kinds:
        if k not in KINDS:
            raise ConfigError(f"unknown activation kind {k!r}")
    if kinds[-1] != LINEAR:
        raise ConfigError("the output layer must be linear")


def init_network(layer_sizes, kinds=None, seed=0) -> RectifierNet:
    """Uniform(-sqrt(6/fan_in), sqrt(6/fan_in)) weights, zero biases.

    ``kinds`` defaults to rectifier hidden layers and a linear output layer.
    """
    sizes = tuple(int(s) for s in layer_sizes)
    if kinds is None:
        kinds = (RECTIFIER,) * (len(sizes) - 2) + (LINEAR,)
    kinds = tuple(kinds)
    _check_architecture(sizes, kinds)
    rng = np.random.default_rng(seed)
    blocks = []
    for k in range(len(sizes) - 1):
        fi, fo = sizes[k], sizes[k + 1]
        bound = np.sqrt(6.0 / fi)
        W = np.zeros((fo, fi + 1))
        W[:, :fi] = rng.uniform(-bound, bound, size=(fo, fi))
        blocks.append(W.ravel())
    return RectifierNet(sizes, kinds, np.concatenate(blocks))


def unflatten(net: RectifierNet, vec: np.ndarray) -> list[np.ndarray]:
    """Per-layer ``(fan_out, fan_in + 1)`` views of a flat parameter-shaped vector."""
    out = []
    p = 0
    for k in range(net.n_layers):
        fi, fo = net.sizes[k], net.sizes[k + 1]
        n = fo * (fi + 1)
        out.append(vec[p:p + n].reshape(fo, fi + 1))
        p += n
    return out


def param_index(net: RectifierNet, unit, i: int) -> int:
    """Flat index of the weight from input ``i`` (``fan_in`` = bias) into ``unit``."""
    k, j = _check_unit(net, unit)
    p = sum(net.sizes[q + 1] * (net.sizes[q] + 1) for q in range(k))
    return p + j * (net.sizes[k] + 1) + i


def _check_unit(net, unit):
    try:
        k, j = unit
    except (TypeError, ValueError):
        raise UnknownUnitError(f"unit id must be (layer, index), got {unit!r}") from None
    if not (0 <= k < net.n_layers and 0 <= j < net.sizes[k + 1]):
        raise UnknownUnitError(f"network {net.sizes} has no unit {unit!r}")
    return int(k), int(j)


def _as_batch(net, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise ShapeError(f"network expects inputs of dim {net.input_dim}, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InputError("non-finite network input")
    return np.ascontiguousarray(X)


def _split_pre(net, pre_row):
    out = []
    u = 0
    for k in range(net.n_layers):
        fo = net.sizes[k + 1]
        out.append(pre_row[u:u + fo])
        u += fo
    return out


def forward_batch(net: RectifierNet, X) -> tuple[np.ndarray, BatchTrace]:
    X = _as_batch(net, X)
    pre = kernels.forward_batch(net.params, net._sizes_arr, net._relu_arr, X)
    return pre[:, pre.shape[1] - net.output_dim:].copy(), BatchTrace(X, pre)


def backward_batch(net: RectifierNet, trace: BatchTrace, G) -> np.ndarray:
    """Batch-mean of ``(dF/dW)^T g_b``: the gradient of ``mean_b <g_b, F(x_b)>``."""
    G = np.ascontiguousarray(np.atleast_2d(np.asarray(G, dtype=np.float64)))
    if G.shape != (trace.X.shape[0], net.output_dim):
        raise ShapeError(f"output gradient shape {G.shape} does not match batch output")
    if trace.pre.shape[1] != sum(net.sizes[1:]) or trace.X.shape[1] != net.input_dim:
        raise ShapeError("trace was not produced by this network")
    return kernels.backward_batch(net.params, net._sizes_arr, net._relu_arr, trace.X, trace.pre, G)


def predict(net: RectifierNet, X) -> np.ndarray:
    return forward_batch(net, X)[0]


def forward(net: RectifierNet, x) -> tuple[np.ndarray, ActivationTrace]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"forward expects a vector, got shape {x.shape}")
    Xb = _as_batch(net, x)
    pre_all = kernels.forward_batch(net.params, net._sizes_arr, net._relu_arr, Xb)[0]
    pre = _split_pre(net, pre_all)
    gates, inputs = [], []
    a = Xb[0]
    for k, z in enumerate(pre):
        inputs.append(a)
        if net.kinds[k] == RECTIFIER:
            g = (z > 0.0).astype(np.float64)
            a = z * g
        else:
            g = np.ones_like(z)
            a = z
        gates.append(g)
    return pre[-1].copy(), ActivationTrace(Xb[0].copy(), pre, gates, inputs)


def _check_trace(net, trace):
    if tuple(trace.sizes) != net.sizes:
        raise ShapeError(f"trace for sizes {trace.sizes} used with network {net.sizes}")


def influence_matrices(net: RectifierNet, trace: ActivationTrace) -> list[np.ndarray]:
    """``M[k][:, j]`` is the influence of unit ``(k, j)`` on the outputs, gates frozen."""
    _check_trace(net, trace)
    Ws = net.weights
    L = net.n_layers
    mats = [None] * L
    mats[L - 1] = np.eye(net.output_dim)
    for k in range(L - 1, 0, -1):
        fi = net.sizes[k]
        mats[k - 1] = (mats[k] * trace.gates[k]) @ Ws[k][:, :fi]
    return mats


def influence(net: RectifierNet, trace: ActivationTrace, unit) -> np.ndarray:
    k, j = _check_unit(net, unit)
    return influence_matrices(net, trace)[k][:, j].copy()


def error_signals(net: RectifierNet, trace: ActivationTrace, g) -> list[np.ndarray]:
    """Backpropagated error ``<g, influence(j)>`` for every unit, layer by layer."""
    _check_trace(net, trace)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (net.output_dim,):
        raise ShapeError(f"output gradient must have {net.output_dim} entries")
    Ws = net.weights
    L = net.n_layers
    sig = [None] * L
    sig[L - 1] = g.copy()
    for k in range(L - 1, 0, -1):
        sig[k - 1] = (sig[k] * trace.gates[k]) @ Ws[k][:, :net.sizes[k]]
    return sig


def backward(net: RectifierNet, trace: ActivationTrace, g) -> np.ndarray:
    """Gradient of ``<g, F(x)>`` with respect to the flat parameter vector."""
    grad = np.empty(net.n_params)
    blocks = unflatten(net, grad)
    for k, s in enumerate(error_signals(net, trace, g)):
        d = s * trace.gates[k]
        blocks[k][:, :-1] = np.outer(d, trace.inputs[k])
        blocks[k][:, -1] = d
    return grad


def actor_jacobian(net: RectifierNet, trace: ActivationTrace) -> np.ndarray:
    """``(n_params, output_dim)`` Jacobian of the outputs in the parameters."""
    mats = influence_matrices(net, trace)
    rows = []
    for k, M in enumerate(mats):
        phi = np.append(trace.inputs[k], 1.0)
        # (fan_out, fan_in+1, d): input times influence, zero for inactive units
        blk = (trace.gates[k][:, None, None] * phi[None, :, None]) * M.T[:, None, :]
        rows.append(blk.reshape(-1, net.output_dim))
    return np.concatenate(rows, axis=0)


def jvp_batch(net: RectifierNet, trace: BatchTrace, direction) -> np.ndarray:
    """Directional derivative of the outputs along a parameter-space direction.

    Returns ``J(x_b)^T direction`` for each batch row, shape ``(B, output_dim)``.
    """
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != (net.n_params,):
        raise ShapeError("direction must be parameter-shaped")
    Ws = net.weights
    dWs = unflatten(net, direction)
    pre = trace.pre
    B = trace.X.shape[0]
    a = trace.X
    t = np.zeros((B, net.input_dim))
    u = 0
    for k in range(net.n_layers):
        fi, fo = net.sizes[k], net.sizes[k + 1]
        z = pre[:, u:u + fo]
        t = a @ dWs[k][:, :fi].T + dWs[k][:, fi] + t @ Ws[k][:, :fi].T
        if net.kinds[k] == RECTIFIER:
            gate = z > 0.0
            t = t * gate
            a = z * gate
        else:
            a = z
        u += fo
    return t


def forward_with_gates(net: RectifierNet, x, gates, override=None) -> np.ndarray:
    """Evaluate the active linear submodel selected by ``gates``.

    ``override`` maps unit ids to forced output values (applied after gating).
    """
    override = override or {}
    a = np.asarray(x, dtype=np.float64)
    for k, W in enumerate(net.weights):
        z = W[:, :-1] @ a + W[:, -1]
        a = z * gates[k]
        for (kk, j), val in override.items():
            if kk == k:
                a[j] = val
    return a


# -- serialization -----------------------------------------------------------

def dumps_network(net: RectifierNet) -> bytes:
    header = json.dumps({"version": _FORMAT_VERSION, "sizes": list(net.sizes),
                         "kinds": list(net.kinds)}).encode()
    return (_MAGIC + struct.pack("<I", len(header)) + header
            + net.params.astype("<f8").tobytes())


def loads_network(blob: bytes) -> RectifierNet:
    if not blob.startswith(_MAGIC):
        raise InputError("not a gradprop network file")
    off = len(_MAGIC)
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    header = json.loads(blob[off:off + hlen])
    if header.get("version") != _FORMAT_VERSION:
        raise InputError(f"unsupported network file version {header.get('version')}")
    off += hlen
    params = np.frombuffer(blob[off:], dtype="<f8").astype(np.float64)
    return RectifierNet(tuple(header["sizes"]), tuple(header["kinds"]), params)


def save_network(net: RectifierNet, path) -> None:
    Path(path).write_bytes(dumps_network(net))


def load_network(path) -> RectifierNet:
    return loads_network(Path(path).read_bytes())
