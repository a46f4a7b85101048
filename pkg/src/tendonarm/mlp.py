"""Three-layer sigmoid network with backprop and an exact input Jacobian.

    y = W2 . sigmoid(W1 . x + b1) + b2

Inputs and outputs pass through a fixed affine normalization stored with the
network (``x_n = (x - in_center) / in_scale``, ``y = out_center + out_scale * y_n``),
so callers work in physical units (rad, N, mm) while the weights see values
of order one.  The identity normalization gives the bare formula above.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"TAMLP1\n"


class InputShapeError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class Network:
    W1: np.ndarray  # (hidden, in)
    b1: np.ndarray
    W2: np.ndarray  # (out, hidden)
    b2: np.ndarray
    in_center: np.ndarray = None
    in_scale: np.ndarray = None
    out_center: np.ndarray = None
    out_scale: np.ndarray = None

    def __post_init__(self):
        h, i = self.W1.shape
        o = self.W2.shape[0]
        if self.W2.shape != (o, h) or self.b1.shape != (h,) or self.b2.shape != (o,):
            raise InputShapeError("inconsistent weight shapes")
        if self.in_center is None:
            self.in_center = np.zeros(i)
        if self.in_scale is None:
            self.in_scale = np.ones(i)
        if self.out_center is None:
            self.out_center = np.zeros(o)
        if self.out_scale is None:
            self.out_scale = np.ones(o)

    @property
    def layer_dims(self) -> tuple[int, int, int]:
        return (self.W1.shape[1], self.W1.shape[0], self.W2.shape[0])

    def copy(self) -> "Network":
        return Network(*(np.array(a, copy=True) for a in self._arrays()))

    def _arrays(self):
        return (self.W1, self.b1, self.W2, self.b2,
                self.in_center, self.in_scale, self.out_center, self.out_scale)

    def params(self):
        return (self.W1, self.b1, self.W2, self.b2)

    def __call__(self, x):
        return forward(self, x)


@dataclass
class TrainBatch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if len(self.inputs) == 0:
            raise InputShapeError("empty batch")
        if len(self.inputs) != len(self.targets):
            raise InputShapeError("inputs and targets differ in count")

    def __len__(self):
        return len(self.inputs)


def init_network(layer_dims, rng, *, in_center=None, in_scale=None,
                 out_center=None, out_scale=None) -> Network:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    n_in, n_hid, n_out = layer_dims
    if min(layer_dims) < 1:
        raise ValueError("layer sizes must be positive")
    rng = np.random.default_rng(rng)
    lim1 = 1.0 / np.sqrt(n_in)
    lim2 = 1.0 / np.sqrt(n_hid)
    W1 = rng.uniform(-lim1, lim1, (n_hid, n_in))
    W2 = rng.uniform(-lim2, lim2, (n_out, n_hid))
    as_arr = lambda v, n, d: np.full(n, float(d)) if v is None else np.asarray(v, dtype=float).copy()
    return Network(W1, np.zeros(n_hid), W2, np.zeros(n_out),
                   as_arr(in_center, n_in, 0.0), as_arr(in_scale, n_in, 1.0),
                   as_arr(out_center, n_out, 0.0), as_arr(out_scale, n_out, 1.0))


def zero_network(layer_dims) -> Network:
    n_in, n_hid, n_out = layer_dims
    return Network(np.zeros((n_hid, n_in)), np.zeros(n_hid), np.zeros((n_out, n_hid)), np.zeros(n_out))


def _check_input(net: Network, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (net.W1.shape[1],) or x.ndim > 2:
        raise InputShapeError(f"expected input of size {net.W1.shape[1]}, got shape {x.shape}")
    return x


def forward(net: Network, x) -> np.ndarray:
    """Network output for one input vector or a stack of them (rows)."""
    x = _check_input(net, x)
    xn = (x - net.in_center) / net.in_scale
    h = sigmoid(xn @ net.W1.T + net.b1)
    return net.out_center + net.out_scale * (h @ net.W2.T + net.b2)


def input_jacobian(net: Network, x) -> np.ndarray:
    """dy/dx at a single input, shape (out, in), in physical units."""
    x = _check_input(net, x)
    if x.ndim != 1:
        raise InputShapeError("input_jacobian takes a single input vector")
    xn = (x - net.in_center) / net.in_scale
    h = sigmoid(net.W1 @ xn + net.b1)
    dh = h * (1.0 - h)
    return (net.out_scale[:, None] * net.W2) @ (dh[:, None] * net.W1) / net.in_scale[None, :]


def loss_and_gradients(net: Network, batch: TrainBatch):
    """Mean squared error in normalized output units, and its weight gradients."""
    X = _check_input(net, batch.inputs)
    if batch.targets.shape[1] != net.W2.shape[0]:
        raise InputShapeError(f"expected targets of size {net.W2.shape[0]}")
    xn = (X - net.in_center) / net.in_scale
    tn = (batch.targets - net.out_center) / net.out_scale
    h = sigmoid(xn @ net.W1.T + net.b1)
    err = h @ net.W2.T + net.b2 - tn
    loss = float(np.mean(err * err))
    dy = 2.0 * err / err.size
    gW2 = dy.T @ h
    gb2 = dy.sum(axis=0)
    dz = (dy @ net.W2) * h * (1.0 - h)
    gW1 = dz.T @ xn
    gb1 = dz.sum(axis=0)
    return loss, (gW1, gb1, gW2, gb2)


def train_step(net: Network, batch: TrainBatch, lr: float) -> float:
    """One plain gradient-descent step in place; returns the loss before it."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    loss, grads = loss_and_gradients(net, batch)
    if not np.isfinite(loss):
        raise TrainingDiverged("non-finite training loss")
    for p, g in zip(net.params(), grads):
        p -= lr * g
    return loss


class Adam:
    """Adam moments for one network; ``step`` updates the weights in place."""

    def __init__(self, net: Network, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in net.params()]
        self.v = [np.zeros_like(p) for p in net.params()]
        self.t = 0

    def step(self, net: Network, batch: TrainBatch) -> float:
        loss, grads = loss_and_gradients(net, batch)
        if not np.isfinite(loss):
            raise TrainingDiverged("non-finite training loss")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(net.params(), grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return loss


# ---------------------------------------------------------- serialization

def to_bytes(net: Network) -> bytes:
    """Header line (JSON: dims, dtype) then row-major little-endian float64 arrays."""
    header = {"dims": list(net.layer_dims), "dtype": "<f8",
              "arrays": ["W1", "b1", "W2", "b2", "in_center", "in_scale", "out_center", "out_scale"]}
    buf = io.BytesIO()
    buf.write(MAGIC)
    hb = json.dumps(header).encode()
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    for a in net._arrays():
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return buf.getvalue()


def from_bytes(data: bytes) -> Network:
    if not data.startswith(MAGIC):
        raise ValueError("not a network file")
    pos = len(MAGIC)
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    header = json.loads(data[pos:pos + n])
    pos += n
    i, h, o = header["dims"]
    shapes = [(h, i), (h,), (o, h), (o,), (i,), (i,), (o,), (o,)]
    arrays = []
    for shp in shapes:
        count = int(np.prod(shp))
        arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shp).astype(float))
        pos += 8 * count
    if pos != len(data):
        raise ValueError("trailing bytes in network file")
    return Network(*arrays)


def save_network(net: Network, path) -> None:
    Path(path).write_bytes(to_bytes(net))


def load_network(path) -> Network:
    return from_bytes(Path(path).read_bytes())
