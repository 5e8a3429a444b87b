"""Adaptation functions and outer-loop meta-training.

Four learners share one interface:

* ``maml``     theta_i = theta0 - alpha * g_i
* ``metasgd``  theta_i = theta0 - alpha_vec * g_i            (elementwise)
* ``gmsgd``    theta_i = W1^T theta0 + W2^T g_i
* ``tanml``    theta_i = Psi^T k(z_i, bank),  z_i = [theta0; g_i]

where ``g_i`` is the gradient of task ``i``'s training loss at ``theta0``.
The outer objective is the summed test-split loss of the adapted
parameters, plus ``mu`` times a regulariser for the last two.

Outer gradients are derived by hand. In ``first-order`` mode ``g_i`` is
held constant with respect to ``theta0``; in ``exact`` mode the
dependence is followed through Hessian-vector products of the training
loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .kernels import (DescriptorBank, KernelSpec, cross_kernel, kernel_matrix_backprop,
                      rms_scale, rms_scale_backprop)
from .optim import OuterOptimizer
from .predictors import Dataset, InvalidArgument
from .taskgen import TaskBatch

log = logging.getLogger(__name__)

GRADIENT_MODES = ("first-order", "exact")
ALGORITHMS = ("maml", "metasgd", "gmsgd", "tanml-gaussian", "tanml-cosine")
DIVERGENCE_LIMIT = 1e12


class NumericalDivergence(RuntimeError):
    def __init__(self, iteration: int, message: str, trace=None):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration
        self.trace = trace or []


@dataclass
class MetaState:
    """Learned meta-parameters plus, for TANML, the descriptor banks."""

    algorithm: str
    params: dict[str, np.ndarray]
    banks: list[DescriptorBank] = field(default_factory=list)
    iteration: int = 0


def rkhs_norm(psi, K) -> float:
    """trace(Psi^T K Psi): the squared RKHS norm summed over output coordinates."""
    psi = np.atleast_2d(np.asarray(psi, dtype=np.float64))
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1] or K.shape[0] != psi.shape[0]:
        raise InvalidArgument(f"kernel matrix {K.shape} does not match coefficients {psi.shape}")
    return float(np.sum(psi * (K @ psi)))


class MetaLearner:
    name = "base"
    mu = 0.0

    def __init__(self, model):
        self.model = model

    # subclass hooks --------------------------------------------------------
    def init_params(self, rng, theta0, n_tasks) -> dict:
        raise NotImplementedError

    def _adapt(self, params, G, cache):
        """Adapted parameters from inner gradients ``G``; may stash values in ``cache``."""
        raise NotImplementedError

    def _regularizer(self, params, cache) -> float:
        return 0.0

    def _backward(self, params, G, R, cache) -> tuple[dict, np.ndarray]:
        """Gradients of the objective given ``R = dJ/dTheta``.

        Returns the per-group gradients holding ``G`` fixed, and ``B = dJ/dG``
        (one row per task) for the exact-mode correction.
        """
        raise NotImplementedError

    # shared machinery ------------------------------------------------------
    def inner_grads(self, theta0, X, Y) -> np.ndarray:
        thetas = np.broadcast_to(theta0, (len(X), len(theta0)))
        return self.model.loss_grad_batch(thetas, X, Y)[1]

    def init_state(self, rng, batch: TaskBatch, theta0=None) -> MetaState:
        if theta0 is None:
            theta0 = self.model.init_params(rng)
        params = self.init_params(rng, np.array(theta0, dtype=np.float64), len(batch))
        state = MetaState(self.name, params)
        self.refresh(state, batch)
        return state

    def refresh(self, state: MetaState, batch: TaskBatch) -> None:
        """Hook run after every parameter change (TANML rebuilds its banks)."""

    def adapt(self, state: MetaState, X, Y) -> np.ndarray:
        """Adapted parameters for a stack of tasks' training splits."""
        G = self.inner_grads(state.params["theta0"], X, Y)
        return self._adapt_with_state(state, G)

    def _adapt_with_state(self, state, G):
        return self._adapt(state.params, G, {})

    def adapt_from_grads(self, params, G) -> np.ndarray:
        """Adapted parameters given inner gradients ``G`` (one row per task)."""
        return self._adapt(params, np.atleast_2d(np.asarray(G, dtype=np.float64)), {})

    def adapt_one(self, state: MetaState, data: Dataset) -> np.ndarray:
        return self.adapt(state, data.inputs[None], data.targets[None])[0]

    def objective(self, params, batch: TaskBatch, frozen_grads=None) -> float:
        G = frozen_grads if frozen_grads is not None else self.inner_grads(params["theta0"], batch.x_train, batch.y_train)
        cache = {}
        thetas = self._adapt(params, G, cache)
        losses = self.model.loss_batch(thetas, batch.x_test, batch.y_test)
        return float(losses.sum() + self.mu * self._regularizer(params, cache))

    def gradient(self, params, batch: TaskBatch, mode: str = "first-order"):
        """Objective value and its gradient w.r.t. every parameter group."""
        if mode not in GRADIENT_MODES:
            raise InvalidArgument(f"unknown gradient mode {mode!r}")
        theta0 = params["theta0"]
        G = self.inner_grads(theta0, batch.x_train, batch.y_train)
        cache = {}
        thetas = self._adapt(params, G, cache)
        losses, R = self.model.loss_grad_batch(thetas, batch.x_test, batch.y_test)
        value = float(losses.sum() + self.mu * self._regularizer(params, cache))
        grads, B = self._backward(params, G, R, cache)
        if mode == "exact" and B is not None:
            thetas0 = np.broadcast_to(theta0, G.shape)
            grads["theta0"] = grads["theta0"] + self.model.hvp_batch(thetas0, batch.x_train, batch.y_train, B).sum(axis=0)
        return value, grads

    def hyper(self) -> dict:
        return {}


class MAML(MetaLearner):
    name = "maml"

    def __init__(self, model, alpha: float = 0.01):
        super().__init__(model)
        if not alpha > 0:
            raise InvalidArgument(f"alpha must be positive, got {alpha}")
        self.alpha = alpha

    def init_params(self, rng, theta0, n_tasks):
        return {"theta0": theta0}

    def _adapt(self, params, G, cache):
        return params["theta0"] - self.alpha * G

    def _backward(self, params, G, R, cache):
        return {"theta0": R.sum(axis=0)}, -self.alpha * R

    def hyper(self):
        return {"alpha": self.alpha}


class MetaSGD(MetaLearner):
    name = "metasgd"

    def __init__(self, model, alpha_init=(0.001, 0.01)):
        super().__init__(model)
        self.alpha_init = tuple(alpha_init)

    def init_params(self, rng, theta0, n_tasks):
        lo, hi = self.alpha_init
        return {"theta0": theta0, "alpha": rng.uniform(lo, hi, size=len(theta0))}

    def _adapt(self, params, G, cache):
        return params["theta0"] - params["alpha"] * G

    def _backward(self, params, G, R, cache):
        return {"theta0": R.sum(axis=0), "alpha": -(G * R).sum(axis=0)}, -params["alpha"] * R

    def hyper(self):
        return {"alpha_init": list(self.alpha_init)}


class GeneralizedMetaSGD(MetaLearner):
    name = "gmsgd"

    def __init__(self, model, alpha: float = 0.01, mu: float = 0.1):
        super().__init__(model)
        if mu < 0:
            raise InvalidArgument(f"mu must be >= 0, got {mu}")
        self.alpha = alpha
        self.mu = mu

    def init_params(self, rng, theta0, n_tasks):
        # start at the MAML map: W1 = I, W2 = -alpha I
        D = len(theta0)
        return {"theta0": theta0, "W1": np.eye(D), "W2": -self.alpha * np.eye(D)}

    def _adapt(self, params, G, cache):
        W1, W2 = params["W1"], params["W2"]
        D = len(params["theta0"])
        if W1.shape != (D, D) or W2.shape != (D, D):
            raise InvalidArgument(f"W blocks must be {D}x{D}, got {W1.shape} and {W2.shape}")
        return params["theta0"] @ W1 + G @ W2

    def _regularizer(self, params, cache):
        return float(np.sum(params["W1"] ** 2) + np.sum(params["W2"] ** 2))

    def _backward(self, params, G, R, cache):
        W1, W2 = params["W1"], params["W2"]
        rsum = R.sum(axis=0)
        grads = {
            "theta0": W1 @ rsum,
            "W1": np.outer(params["theta0"], rsum) + 2.0 * self.mu * W1,
            "W2": G.T @ R + 2.0 * self.mu * W2,
        }
        return grads, R @ W2.T

    def hyper(self):
        return {"alpha": self.alpha, "mu": self.mu}


class TANML(MetaLearner):
    """Kernel regression over task descriptors, optionally one kernel per layer."""

    def __init__(self, model, kernel: KernelSpec, mu: float = 0.1, per_layer: bool = False,
                 regularizer: str = "rkhs", standardize: bool = False):
        super().__init__(model)
        if mu < 0:
            raise InvalidArgument(f"mu must be >= 0, got {mu}")
        if regularizer not in ("rkhs", "l2"):
            raise InvalidArgument(f"unknown regularizer {regularizer!r}")
        self.kernel = kernel
        self.mu = mu
        self.per_layer = per_layer
        self.regularizer = regularizer
        self.standardize = standardize
        self.name = f"tanml-{kernel.kind}"
        self.blocks = model.layout.layer_slices() if per_layer else [slice(0, model.dim)]

    def init_params(self, rng, theta0, n_tasks):
        return {"theta0": theta0, "psi": rng.normal(0.0, 1.0 / n_tasks, size=(n_tasks, len(theta0)))}

    def _descriptors(self, theta0, G):
        """Per block: (slice, descriptor rows, gradient scale or None)."""
        out = []
        for s in self.blocks:
            scale = rms_scale(G[:, s]) if self.standardize else None
            Gs = G[:, s] / scale if self.standardize else G[:, s]
            out.append((s, np.concatenate([np.broadcast_to(theta0[s], Gs.shape), Gs], axis=1), scale))
        return out

    def _kernel_blocks(self, theta0, G):
        return [(s, Z, cross_kernel(self.kernel, Z, Z), scale) for s, Z, scale in self._descriptors(theta0, G)]

    def _combine(self, psi, kernels, n_query):
        thetas = np.empty((n_query, psi.shape[1]))
        for s, K in kernels:
            # einsum keeps each output row independent of the other rows
            thetas[:, s] = np.einsum("ij,jd->id", K, psi[:, s])
        return thetas

    def _adapt(self, params, G, cache):
        psi = params["psi"]
        if psi.ndim != 2 or psi.shape[1] != len(params["theta0"]):
            raise InvalidArgument(f"psi has shape {psi.shape}")
        blocks = self._kernel_blocks(params["theta0"], G)
        if len(G) != psi.shape[0]:
            raise InvalidArgument("training-task count does not match the rows of psi")
        cache["blocks"] = blocks
        return self._combine(psi, [(s, K) for s, _, K, _ in blocks], len(G))

    def _adapt_with_state(self, state, G):
        theta0 = state.params["theta0"]
        psi = state.params["psi"]
        kernels = []
        for s, bank in zip(self.blocks, state.banks):
            if not np.array_equal(bank.theta0_snapshot, theta0[s]):
                raise InvalidArgument("descriptor bank is stale: rebuild it from the current theta0")
            Gs = G[:, s] if bank.grad_scale is None else G[:, s] / bank.grad_scale
            Zq = np.concatenate([np.broadcast_to(theta0[s], Gs.shape), Gs], axis=1)
            kernels.append((s, cross_kernel(self.kernel, Zq, bank.matrix)))
        return self._combine(psi, kernels, len(G))

    def _regularizer(self, params, cache):
        psi = params["psi"]
        if self.regularizer == "l2":
            return float(np.sum(psi * psi))
        return sum(rkhs_norm(psi[:, s], K) for s, _, K, _ in cache["blocks"])

    def _backward(self, params, G, R, cache):
        psi = params["psi"]
        d_theta0 = np.zeros_like(params["theta0"])
        d_psi = np.empty_like(psi)
        B = np.empty_like(G)
        for s, Z, K, scale in cache["blocks"]:
            P, Rs = psi[:, s], R[:, s]
            # dJ/dK[i, j] for the data term and the regulariser
            W = Rs @ P.T
            if self.regularizer == "rkhs":
                d_psi[:, s] = K @ Rs + (2.0 * self.mu) * (K @ P)
                W = W + self.mu * (P @ P.T)
            else:
                d_psi[:, s] = K @ Rs + (2.0 * self.mu) * P
            dZ = kernel_matrix_backprop(self.kernel, Z, K, W + W.T)
            d = Z.shape[1] // 2
            d_theta0[s] += dZ[:, :d].sum(axis=0)
            B[:, s] = dZ[:, d:] if scale is None else rms_scale_backprop(G[:, s], scale, dZ[:, d:])
        return {"theta0": d_theta0, "psi": d_psi}, B

    def refresh(self, state, batch):
        theta0 = state.params["theta0"]
        G = self.inner_grads(theta0, batch.x_train, batch.y_train)
        state.banks = [
            DescriptorBank(Z, theta0[s], i if self.per_layer else None, scale)
            for i, (s, Z, scale) in enumerate(self._descriptors(theta0, G))
        ]

    def hyper(self):
        return {"kernel": self.kernel.to_dict(), "mu": self.mu, "per_layer": self.per_layer,
                "regularizer": self.regularizer, "standardize": self.standardize}


def make_learner(algorithm: str, model, *, alpha=0.01, alpha_init=(0.001, 0.01), mu=0.1,
                 sigma2=0.5, per_layer=False, regularizer="rkhs", standardize=False):
    if algorithm == "maml":
        return MAML(model, alpha)
    if algorithm == "metasgd":
        return MetaSGD(model, alpha_init)
    if algorithm == "gmsgd":
        return GeneralizedMetaSGD(model, alpha, mu)
    if algorithm in ("tanml-gaussian", "tanml-cosine"):
        kernel = KernelSpec(algorithm.split("-")[1], sigma2)
        return TANML(model, kernel, mu, per_layer, regularizer, standardize)
    raise InvalidArgument(f"unknown algorithm {algorithm!r}")


def outer_objective(learner: MetaLearner, params, batch: TaskBatch, frozen_grads=None) -> float:
    return learner.objective(params, batch, frozen_grads)


def outer_step(learner: MetaLearner, state: MetaState, batch: TaskBatch, optimizer: OuterOptimizer,
               mode: str = "first-order") -> dict:
    """One full-batch outer update. Returns the trace record for this iteration."""
    value, grads = learner.gradient(state.params, batch, mode)
    iteration = state.iteration + 1
    norms = {name: float(np.linalg.norm(g)) for name, g in grads.items()}
    if not np.isfinite(value) or value > DIVERGENCE_LIMIT or not all(np.isfinite(v) for v in norms.values()):
        raise NumericalDivergence(iteration, f"outer objective {value!r}, gradient norms {norms}")
    state.params = optimizer.step(state.params, grads)
    state.iteration = iteration
    learner.refresh(state, batch)
    return {"iteration": iteration, "objective": value, **{f"grad_norm_{k}": v for k, v in norms.items()}}


def meta_train(learner: MetaLearner, state: MetaState, batch: TaskBatch, optimizer: OuterOptimizer,
               n_iter: int, mode: str = "first-order", log_every: int = 0):
    """Run ``n_iter`` outer steps in place; returns ``(state, trace)``."""
    trace = []
    for _ in range(n_iter):
        try:
            rec = outer_step(learner, state, batch, optimizer, mode)
        except NumericalDivergence as exc:
            exc.trace = trace
            raise
        trace.append(rec)
        if log_every and rec["iteration"] % log_every == 0:
            log.info("%s iter %d objective %.6g", learner.name, rec["iteration"], rec["objective"])
    return state, trace


def adapt_test_task(learner: MetaLearner, state: MetaState, test_train: Dataset) -> np.ndarray:
    return learner.adapt_one(state, test_train)


def default_lrs(algorithm: str, lr_theta0: float, lr_meta: float) -> dict:
    groups = {"maml": [], "metasgd": ["alpha"], "gmsgd": ["W1", "W2"]}.get(algorithm, ["psi"])
    lrs = {"theta0": lr_theta0}
    lrs.update({g: lr_meta for g in groups})
    return lrs
