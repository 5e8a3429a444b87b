"""Task descriptors and the kernels that compare them.

A task descriptor is ``[theta0; grad L(train split, theta0)]``, optionally
restricted to one layer's coordinates. Kernel evaluations here are
computed element by element (``einsum`` for dot products, ``cdist`` for
distances) rather than through BLAS ``gemm``, so that a kernel value does
not depend on which other descriptors were evaluated in the same call.
That makes a single test task's kernel vector bitwise equal to the
matching row of the training kernel matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .predictors import Dataset, InvalidArgument


class DegenerateInput(ValueError):
    """Raised when an input makes a quantity undefined (zero norm, zero energy)."""


@dataclass(frozen=True)
class KernelSpec:
    kind: str  # "gaussian" | "cosine"
    sigma2: float = 0.5

    def __post_init__(self):
        if self.kind not in ("gaussian", "cosine"):
            raise InvalidArgument(f"unknown kernel kind {self.kind!r}")
        if self.kind == "gaussian" and not self.sigma2 > 0:
            raise InvalidArgument(f"sigma2 must be positive, got {self.sigma2}")

    def to_dict(self):
        return {"kind": self.kind, "sigma2": self.sigma2}


@dataclass(frozen=True)
class TaskDescriptor:
    values: np.ndarray
    source_layer: int | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or len(v) % 2:
            raise InvalidArgument("descriptor must be a 1-D vector of even length")
        if not np.all(np.isfinite(v)):
            raise InvalidArgument("descriptor has non-finite entries")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class DescriptorBank:
    """Descriptors of all training tasks, stacked as rows of ``matrix``."""

    matrix: np.ndarray
    theta0_snapshot: np.ndarray
    source_layer: int | None = None
    grad_scale: np.ndarray | None = None  # set when descriptors are standardised

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.ndim != 2 or len(m) == 0:
            raise InvalidArgument("bank needs at least one descriptor")
        snap = np.array(self.theta0_snapshot, dtype=np.float64)
        for arr in (m, snap):
            arr.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "theta0_snapshot", snap)
        if self.grad_scale is not None:
            scale = np.array(self.grad_scale, dtype=np.float64)
            scale.setflags(write=False)
            object.__setattr__(self, "grad_scale", scale)

    @classmethod
    def from_descriptors(cls, descriptors, theta0_snapshot) -> "DescriptorBank":
        layers = {d.source_layer for d in descriptors}
        if len(layers) > 1:
            raise InvalidArgument("descriptors come from different layers")
        return cls(np.stack([d.values for d in descriptors]), theta0_snapshot, layers.pop())

    def __len__(self):
        return len(self.matrix)

    def __getitem__(self, i) -> TaskDescriptor:
        return TaskDescriptor(self.matrix[i], self.source_layer)

    @property
    def descriptors(self) -> list[TaskDescriptor]:
        return [self[i] for i in range(len(self))]


def descriptor_rows(theta0, grads, sl: slice = slice(None)) -> np.ndarray:
    """Stack ``[theta0[sl]; grads[t, sl]]`` for every task ``t``."""
    grads = np.atleast_2d(grads)
    part = theta0[sl]
    return np.concatenate([np.broadcast_to(part, (len(grads), len(part))), grads[:, sl]], axis=1)


def rms_scale(grads) -> np.ndarray:
    """Root-mean-square of each gradient coordinate over tasks; 1 where it is 0."""
    scale = np.sqrt(np.mean(grads * grads, axis=0))
    return np.where(scale > 0, scale, 1.0)


def rms_scale_backprop(grads, scale, d_scaled) -> np.ndarray:
    """Gradient w.r.t. raw ``grads`` of a loss seen through ``grads / rms_scale(grads)``."""
    u = grads / scale
    return (d_scaled - u * (np.sum(d_scaled * u, axis=0) / len(grads))) / scale


def build_descriptor(theta0, task_train: Dataset, model, layer: int | None = None) -> TaskDescriptor:
    theta0 = np.asarray(theta0, dtype=np.float64)
    g = model.grad(task_train, theta0)
    sl = slice(None) if layer is None else model.layout.layer_slices()[layer]
    return TaskDescriptor(descriptor_rows(theta0, g[None], sl)[0], layer)


def _values(z):
    return z.values if isinstance(z, TaskDescriptor) else np.asarray(z, dtype=np.float64)


def _sqnorms(Z):
    return np.einsum("id,id->i", Z, Z)


def cross_kernel(spec: KernelSpec, A, B) -> np.ndarray:
    """Kernel values between every row of ``A`` and every row of ``B``."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise InvalidArgument(f"descriptor lengths differ: {A.shape[1]} vs {B.shape[1]}")
    if spec.kind == "gaussian":
        return np.exp(-cdist(A, B, "sqeuclidean") / spec.sigma2)
    na, nb = _sqnorms(A), _sqnorms(B)
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateInput("cosine kernel is undefined for a zero descriptor")
    dots = np.einsum("id,jd->ij", A, B)
    # sqrt(a*a) == a in IEEE arithmetic, so k(z, z) is exactly 1
    return dots / np.sqrt(na[:, None] * nb[None, :])


def kernel_eval(spec: KernelSpec, z, z2) -> float:
    a, b = _values(z), _values(z2)
    if a.shape != b.shape:
        raise InvalidArgument(f"descriptor lengths differ: {a.shape} vs {b.shape}")
    return float(cross_kernel(spec, a, b)[0, 0])


def kernel_vector(spec: KernelSpec, bank: DescriptorBank, z) -> np.ndarray:
    return cross_kernel(spec, _values(z), bank.matrix)[0]


def kernel_matrix(spec: KernelSpec, bank: DescriptorBank) -> np.ndarray:
    return cross_kernel(spec, bank.matrix, bank.matrix)


def kernel_input_grads(spec: KernelSpec, z, z2) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of k(z, z2) with respect to each argument."""
    a, b = _values(z), _values(z2)
    k = kernel_eval(spec, a, b)
    if spec.kind == "gaussian":
        ga = -2.0 * (a - b) * k / spec.sigma2
        return ga, -ga
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    return b / (na * nb) - k * a / (na * na), a / (na * nb) - k * b / (nb * nb)


def kernel_matrix_backprop(spec: KernelSpec, Z, K, S) -> np.ndarray:
    """Pull a weight matrix back through ``K = k(Z, Z)``.

    Returns ``dZ`` with ``dZ[i] = sum_j S[i, j] * dk(z_i, z_j)/dz_i``. When
    ``S = G + G^T`` for an upstream gradient ``G = dJ/dK``, this is the
    gradient of ``J`` with respect to the descriptor rows.
    """
    if spec.kind == "gaussian":
        M = S * K
        return (-2.0 / spec.sigma2) * (M.sum(axis=1)[:, None] * Z - M @ Z)
    n = np.sqrt(_sqnorms(Z))
    return (S / np.outer(n, n)) @ Z - ((S * K).sum(axis=1) / (n * n))[:, None] * Z

