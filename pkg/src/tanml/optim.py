"""Outer-loop optimisers with one step size per parameter group."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .predictors import InvalidArgument


@dataclass
class OuterOptimizer:
    kind: str  # "adam" | "sgd"
    lrs: dict[str, float]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise InvalidArgument(f"unknown optimizer {self.kind!r}")
        for name, lr in self.lrs.items():
            if not lr > 0:
                raise InvalidArgument(f"step size for {name!r} must be positive, got {lr}")

    def step(self, params: dict, grads: dict) -> dict:
        missing = set(grads) - set(self.lrs)
        if missing:
            raise InvalidArgument(f"no step size for parameter group(s) {sorted(missing)}")
        self.t += 1
        out = dict(params)
        for name in sorted(grads):
            g = grads[name]
            lr = self.lrs[name]
            if self.kind == "sgd":
                out[name] = params[name] - lr * g
                continue
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[name], self.v[name] = m, v
            mhat = m / (1.0 - self.beta1 ** self.t)
            vhat = v / (1.0 - self.beta2 ** self.t)
            out[name] = params[name] - lr * mhat / (np.sqrt(vhat) + self.eps)
        return out
