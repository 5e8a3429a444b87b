"""Finite-difference verification of the hand-derived outer gradients."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import ExperimentConfig
from .evaluation import build_learner, initial_state
from .predictors import InvalidArgument
from .taskgen import TaskBatch, gen_task_set

MAX_META_PARAMS = 2000
TOLERANCE = 1e-4


def relative_error(analytic, numeric, scale: float | None = None, floor: float = 1e-6) -> float:
    """max |a - n| divided by ``scale`` (default: the larger sup-norm of the two), never below ``floor``."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    if scale is None:
        scale = max(np.max(np.abs(n), initial=0.0), np.max(np.abs(a), initial=0.0))
    return float(np.max(np.abs(a - n), initial=0.0) / max(scale, floor))


def numeric_gradient(f, params: dict, group: str, h: float = 1e-6) -> np.ndarray:
    """Central differences of ``f(params)`` along every coordinate of one group."""
    base = params[group]
    out = np.empty(base.size)
    for j in range(base.size):
        step = h * max(1.0, abs(base.flat[j]))
        plus, minus = base.copy(), base.copy()
        plus.flat[j] += step
        minus.flat[j] -= step
        out[j] = (f({**params, group: plus}) - f({**params, group: minus})) / (2.0 * step)
    return out.reshape(base.shape)


@dataclass
class GradcheckResult:
    algorithm: str
    mode: str
    errors: dict[str, float]

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def small_config(config: ExperimentConfig, input_dim=None, t_train=None, hidden_widths=None) -> ExperimentConfig:
    """Shrink a config to a size where dense finite differences are cheap."""
    over = {"t_train": t_train or 2}
    if config.model == "linear":
        over["input_dim"] = input_dim or 2
    if hidden_widths is not None:
        over["hidden_widths"] = tuple(hidden_widths)
    return replace(config, **over)


def gradcheck(config: ExperimentConfig, algorithm: str, mode: str = "exact", perturb: float = 0.1,
              seed_offset: int = 0) -> GradcheckResult:
    """Compare ``learner.gradient`` with finite differences of the outer objective.

    In ``first-order`` mode the reference is the surrogate objective that
    holds each task's inner gradient fixed at its current value.
    Meta-parameters are jittered away from their initial values so that
    structured initialisations (identity W1, tiny Psi) do not hide errors.
    """
    tasks = gen_task_set(config.task_spec(), config.t_train, config.seed + seed_offset, 0)
    batch = TaskBatch.from_tasks(tasks)
    learner = build_learner(config, algorithm)
    state = initial_state(config, algorithm, learner, batch)
    rng = np.random.default_rng(config.seed + seed_offset)
    params = {k: v + perturb * rng.standard_normal(v.shape) * (1.0 if k == "theta0" else np.std(v) + 0.01)
              for k, v in state.params.items()}
    if algorithm == "metasgd":
        params["alpha"] = np.abs(params["alpha"])
    count = sum(v.size for v in params.values())
    if count > MAX_META_PARAMS:
        raise InvalidArgument(f"{count} meta-parameters; gradcheck is limited to {MAX_META_PARAMS}")

    _, grads = learner.gradient(params, batch, mode)
    frozen = None
    if mode == "first-order":
        frozen = learner.inner_grads(params["theta0"], batch.x_train, batch.y_train)

    def f(p):
        return learner.objective(p, batch, frozen)

    numeric = {g: numeric_gradient(f, params, g) for g in sorted(params)}
    # errors are normwise over the whole meta-gradient, so a group whose
    # gradient is ~0 is judged against the gradient's overall size
    scale = max(max(np.max(np.abs(grads[g])), np.max(np.abs(numeric[g]))) for g in numeric)
    errors = {g: relative_error(grads[g], numeric[g], scale) for g in numeric}
    return GradcheckResult(algorithm, mode, errors)
