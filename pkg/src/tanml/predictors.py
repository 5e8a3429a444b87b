"""Predictor families f(x, theta): a linear map and a small ReLU MLP.

Parameters are always a flat float64 vector; a :class:`LayerLayout`
describes how that vector is cut into weight matrices and bias vectors.
Every model offers single-task methods (``loss``, ``grad``, ``hvp``) and
batched counterparts that evaluate ``T`` tasks with ``T`` different
parameter vectors in one call. The single-task methods are thin wrappers
around the batched ones so both paths produce identical bits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class InvalidArgument(ValueError):
    """Raised on shape or domain violations of an input."""


@dataclass(frozen=True)
class Segment:
    offset: int
    length: int
    role: str  # "weight" or "bias"
    shape: tuple[int, int]
    layer: int


@dataclass(frozen=True)
class LayerLayout:
    segments: tuple[Segment, ...]
    total_dim: int

    def __post_init__(self):
        pos = 0
        for i, seg in enumerate(self.segments):
            if seg.offset != pos:
                raise InvalidArgument(f"segment {i} is not contiguous (offset {seg.offset}, expected {pos})")
            if seg.role not in ("weight", "bias"):
                raise InvalidArgument(f"segment {i} has unknown role {seg.role!r}")
            if seg.shape[0] * seg.shape[1] != seg.length:
                raise InvalidArgument(f"segment {i} shape {seg.shape} does not match length {seg.length}")
            if seg.role == "bias":
                prev = self.segments[i - 1] if i > 0 else None
                if prev is None or prev.role != "weight" or prev.layer != seg.layer:
                    raise InvalidArgument(f"bias segment {i} must follow the weight of its layer")
            pos += seg.length
        if pos != self.total_dim:
            raise InvalidArgument(f"segments cover {pos} entries, total_dim is {self.total_dim}")

    @classmethod
    def dense(cls, widths: Sequence[int], bias: bool = True) -> "LayerLayout":
        """Layout of a fully connected net with the given layer widths."""
        segs = []
        pos = 0
        for layer, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            segs.append(Segment(pos, fan_in * fan_out, "weight", (fan_in, fan_out), layer))
            pos += fan_in * fan_out
            if bias:
                segs.append(Segment(pos, fan_out, "bias", (1, fan_out), layer))
                pos += fan_out
        return cls(tuple(segs), pos)

    @property
    def num_layers(self) -> int:
        return len({s.layer for s in self.segments})

    def layer_slices(self) -> list[slice]:
        """One contiguous slice per layer (weight plus its bias)."""
        out = []
        for layer in sorted({s.layer for s in self.segments}):
            segs = [s for s in self.segments if s.layer == layer]
            out.append(slice(segs[0].offset, segs[-1].offset + segs[-1].length))
        return out

    def to_dict(self) -> dict:
        return {
            "total_dim": self.total_dim,
            "segments": [
                {"offset": s.offset, "length": s.length, "role": s.role, "shape": list(s.shape), "layer": s.layer}
                for s in self.segments
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerLayout":
        segs = tuple(
            Segment(s["offset"], s["length"], s["role"], tuple(s["shape"]), s["layer"]) for s in d["segments"]
        )
        return cls(segs, d["total_dim"])


@dataclass(frozen=True)
class Dataset:
    """K input/target pairs stored as ``(K, n_x)`` and ``(K, n_y)`` arrays."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if y.ndim == 1:
            y = y[:, None]
        if x.ndim != 2 or y.ndim != 2:
            raise InvalidArgument("inputs and targets must be 2-D arrays")
        if len(x) == 0 or len(x) != len(y):
            raise InvalidArgument(f"need equal, nonzero numbers of inputs and targets (got {len(x)}, {len(y)})")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    def __len__(self):
        return len(self.inputs)


def _check_theta(theta, dim):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape[-1] != dim:
        raise InvalidArgument(f"parameter vector has length {theta.shape[-1]}, layout needs {dim}")
    return theta


class _Model:
    """Shared plumbing; subclasses supply the batched primitives."""

    kind: str
    layout: LayerLayout
    input_dim: int
    output_dim: int

    @property
    def dim(self) -> int:
        return self.layout.total_dim

    def _check_batch(self, thetas, X, Y=None):
        thetas = _check_theta(thetas, self.dim)
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[-1] != self.input_dim:
            raise InvalidArgument(f"inputs must have shape (T, K, {self.input_dim}), got {X.shape}")
        if X.shape[1] == 0:
            raise InvalidArgument("empty dataset")
        if thetas.ndim != 2 or thetas.shape[0] != X.shape[0]:
            raise InvalidArgument(f"need one parameter vector per task, got {thetas.shape} for {X.shape[0]} tasks")
        if Y is not None:
            Y = np.asarray(Y, dtype=np.float64)
            if Y.shape != X.shape[:2] + (self.output_dim,):
                raise InvalidArgument(f"targets must have shape {X.shape[:2] + (self.output_dim,)}, got {Y.shape}")
        return thetas, X, Y

    # single-task API -------------------------------------------------------
    def forward(self, theta, x) -> np.ndarray:
        """Prediction for one input vector ``x`` (or a ``(K, n_x)`` stack)."""
        theta = _check_theta(theta, self.dim)
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xs = x[None, None, :] if single else x[None]
        out = self.predict_batch(theta[None], xs)[0]
        return out[0] if single else out

    def loss(self, data: Dataset, theta) -> float:
        theta = _check_theta(theta, self.dim)
        return float(self.loss_grad_batch(theta[None], data.inputs[None], data.targets[None])[0][0])

    def grad(self, data: Dataset, theta) -> np.ndarray:
        theta = _check_theta(theta, self.dim)
        return self.loss_grad_batch(theta[None], data.inputs[None], data.targets[None])[1][0]

    def hvp(self, data: Dataset, theta, v) -> np.ndarray:
        theta = _check_theta(theta, self.dim)
        v = _check_theta(v, self.dim)
        return self.hvp_batch(theta[None], data.inputs[None], data.targets[None], v[None])[0]

    # batched API -----------------------------------------------------------
    def loss_batch(self, thetas, X, Y) -> np.ndarray:
        thetas, X, Y = self._check_batch(thetas, X, Y)
        r = self.predict_batch(thetas, X) - Y
        return np.einsum("tko,tko->t", r, r)

    def hvp_batch(self, thetas, X, Y, V) -> np.ndarray:
        """Central finite differences of the gradient along each row of ``V``."""
        thetas, X, Y = self._check_batch(thetas, X, Y)
        V = _check_theta(V, self.dim)
        eps = 1e-4 * (1.0 + np.abs(thetas).max(axis=1)) / (1.0 + np.abs(V).max(axis=1))
        step = eps[:, None] * V
        _, gp = self.loss_grad_batch(thetas + step, X, Y)
        _, gm = self.loss_grad_batch(thetas - step, X, Y)
        return (gp - gm) / (2.0 * eps[:, None])


class LinearModel(_Model):
    """f(x, theta) = theta^T x, no bias."""

    kind = "linear"

    def __init__(self, input_dim: int, output_dim: int = 1):
        if input_dim < 1 or output_dim < 1:
            raise InvalidArgument("dimensions must be positive")
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.layout = LayerLayout.dense([input_dim, output_dim], bias=False)

    def _mat(self, thetas):
        return thetas.reshape(len(thetas), self.input_dim, self.output_dim)

    def predict_batch(self, thetas, X) -> np.ndarray:
        thetas, X, _ = self._check_batch(thetas, X)
        return np.matmul(X, self._mat(thetas))

    def loss_grad_batch(self, thetas, X, Y):
        thetas, X, Y = self._check_batch(thetas, X, Y)
        r = np.matmul(X, self._mat(thetas)) - Y
        losses = np.einsum("tko,tko->t", r, r)
        grads = 2.0 * np.matmul(X.transpose(0, 2, 1), r)
        return losses, grads.reshape(len(thetas), -1)

    def hvp_batch(self, thetas, X, Y, V) -> np.ndarray:
        # exact: the Hessian is 2 X^T X regardless of theta
        thetas, X, Y = self._check_batch(thetas, X, Y)
        V = _check_theta(V, self.dim)
        out = 2.0 * np.matmul(X.transpose(0, 2, 1), np.matmul(X, self._mat(V)))
        return out.reshape(len(thetas), -1)

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        return glorot_init(self.layout, rng)


class MLPModel(_Model):
    """Fully connected ReLU network; identity output layer."""

    kind = "mlp"

    def __init__(self, widths: Sequence[int] = (1, 16, 16, 1)):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or min(widths) < 1:
            raise InvalidArgument(f"bad layer widths {widths}")
        self.widths = widths
        self.input_dim = widths[0]
        self.output_dim = widths[-1]
        self.layout = LayerLayout.dense(widths, bias=True)

    def _unpack(self, thetas):
        T = len(thetas)
        layers = []
        segs = self.layout.segments
        for w, b in zip(segs[0::2], segs[1::2]):
            W = thetas[:, w.offset:w.offset + w.length].reshape(T, *w.shape)
            bias = thetas[:, b.offset:b.offset + b.length]
            layers.append((W, bias))
        return layers

    def _forward(self, thetas, X):
        layers = self._unpack(thetas)
        acts = [X]
        pre = []
        h = X
        for i, (W, b) in enumerate(layers):
            a = np.matmul(h, W) + b[:, None, :]
            if i < len(layers) - 1:
                pre.append(a)
                h = np.maximum(a, 0.0)
                acts.append(h)
            else:
                h = a
        return h, acts, pre, layers

    def predict_batch(self, thetas, X) -> np.ndarray:
        thetas, X, _ = self._check_batch(thetas, X)
        return self._forward(thetas, X)[0]

    def loss_grad_batch(self, thetas, X, Y):
        thetas, X, Y = self._check_batch(thetas, X, Y)
        out, acts, pre, layers = self._forward(thetas, X)
        r = out - Y
        losses = np.einsum("tko,tko->t", r, r)
        grads = np.empty_like(thetas)
        segs = self.layout.segments
        delta = 2.0 * r
        for i in range(len(layers) - 1, -1, -1):
            w, b = segs[2 * i], segs[2 * i + 1]
            grads[:, w.offset:w.offset + w.length] = np.matmul(acts[i].transpose(0, 2, 1), delta).reshape(len(thetas), -1)
            grads[:, b.offset:b.offset + b.length] = delta.sum(axis=1)
            if i > 0:
                # relu'(0) is taken as 0
                delta = np.matmul(delta, layers[i][0].transpose(0, 2, 1)) * (pre[i - 1] > 0.0)
        return losses, grads

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        return glorot_init(self.layout, rng)


def glorot_init(layout: LayerLayout, rng: np.random.Generator) -> np.ndarray:
    """Uniform(+-sqrt(6 / (fan_in + fan_out))) weights, zero biases."""
    theta = np.zeros(layout.total_dim)
    for seg in layout.segments:
        if seg.role == "weight":
            lim = np.sqrt(6.0 / (seg.shape[0] + seg.shape[1]))
            theta[seg.offset:seg.offset + seg.length] = rng.uniform(-lim, lim, size=seg.length)
    return theta


def make_model(kind: str, input_dim: int = 16, widths: Sequence[int] | None = None):
    if kind == "linear":
        return LinearModel(input_dim)
    if kind == "mlp":
        return MLPModel(widths if widths is not None else (1, 16, 16, 1))
    raise InvalidArgument(f"unknown model kind {kind!r}")
