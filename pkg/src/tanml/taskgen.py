"""Synthetic regression task sources.

* ``linear-bimodal``: y = beta^T x + e, beta drawn from N(-4*1, I) or N(+4*1, I)
  with equal probability.
* ``sine-amplitude``: y = A sin(x), A ~ U(0, 1].
* ``sine-frequency``: y = sin(w x), w ~ U[1, 1.5].

Sine sources can mix in outlier tasks y = s x whose slope s is drawn from
the same distribution as A (or w).

Every task owns its own random stream, keyed by ``(seed, stream, index)``,
so a task set does not depend on the order in which tasks are generated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .predictors import Dataset, InvalidArgument

KINDS = ("linear-bimodal", "sine-amplitude", "sine-frequency")
_PLACEMENT_KEY = 2**31 - 1


@dataclass(frozen=True)
class TaskSourceSpec:
    kind: str = "linear-bimodal"
    shots: int = 16
    test_shots: int = 16
    noise_std: float = 1.0
    outlier_fraction: float = 0.0
    input_dim: int = 16
    x_std: float = 1.0
    mode_mean: float = 4.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgument(f"unknown task kind {self.kind!r}")
        if self.shots < 1 or self.test_shots < 1:
            raise InvalidArgument("shots and test_shots must be >= 1")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise InvalidArgument(f"outlier_fraction must be in [0, 1), got {self.outlier_fraction}")
        if self.outlier_fraction > 0 and self.kind == "linear-bimodal":
            raise InvalidArgument("outliers are only defined for sine task sources")
        if self.noise_std < 0 or self.x_std <= 0:
            raise InvalidArgument("noise_std must be >= 0 and x_std > 0")
        if self.kind != "linear-bimodal" and self.input_dim != 1:
            raise InvalidArgument("sine task sources are one-dimensional")

    @property
    def output_dim(self) -> int:
        return 1


@dataclass
class Task:
    train: Dataset
    test: Dataset
    meta: dict = field(default_factory=dict)

    @property
    def is_outlier(self) -> bool:
        return bool(self.meta.get("outlier", False))


def task_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for the stream identified by ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in keys)))


def task_function(meta: dict):
    """The noiseless generating function described by a task's meta record."""
    kind = meta["kind"]
    if kind == "linear":
        beta = np.asarray(meta["beta"], dtype=np.float64)
        return lambda x: x @ beta[:, None]
    if kind == "sine":
        a, w = meta["amplitude"], meta["frequency"]
        return lambda x: a * np.sin(w * x)
    if kind == "outlier":
        s = meta["slope"]
        return lambda x: s * x
    raise InvalidArgument(f"unknown task meta kind {kind!r}")


def _fill(spec: TaskSourceSpec, rng, meta, draw_x) -> Task:
    f = task_function(meta)
    splits = []
    for n in (spec.shots, spec.test_shots):
        x = draw_x(n)
        y = f(x)
        if spec.noise_std > 0:
            y = y + rng.normal(0.0, spec.noise_std, size=y.shape)
        splits.append(Dataset(x, y))
    return Task(splits[0], splits[1], meta)


def gen_linear_task(spec: TaskSourceSpec, rng: np.random.Generator) -> Task:
    if spec.kind != "linear-bimodal":
        raise InvalidArgument(f"gen_linear_task needs a linear-bimodal spec, got {spec.kind!r}")
    mode = 1 if rng.integers(2) else -1
    beta = rng.normal(mode * spec.mode_mean, 1.0, size=spec.input_dim)
    meta = {"kind": "linear", "mode": mode, "beta": beta.tolist(), "outlier": False}
    return _fill(spec, rng, meta, lambda n: rng.normal(0.0, spec.x_std, size=(n, spec.input_dim)))


def _draw_coefficient(spec, rng) -> float:
    if spec.kind == "sine-amplitude":
        return float(1.0 - rng.random())  # (0, 1]
    return float(rng.uniform(1.0, 1.5))


def _uniform_x(rng):
    return lambda n: rng.uniform(-1.0, 1.0, size=(n, 1))


def gen_sine_task(spec: TaskSourceSpec, rng: np.random.Generator) -> Task:
    if not spec.kind.startswith("sine"):
        raise InvalidArgument(f"gen_sine_task needs a sine spec, got {spec.kind!r}")
    c = _draw_coefficient(spec, rng)
    if spec.kind == "sine-amplitude":
        meta = {"kind": "sine", "amplitude": c, "frequency": 1.0, "outlier": False}
    else:
        meta = {"kind": "sine", "amplitude": 1.0, "frequency": c, "outlier": False}
    return _fill(spec, rng, meta, _uniform_x(rng))


def gen_outlier_task(spec: TaskSourceSpec, rng: np.random.Generator) -> Task:
    if not spec.kind.startswith("sine"):
        raise InvalidArgument(f"outlier tasks need a sine spec, got {spec.kind!r}")
    meta = {"kind": "outlier", "slope": _draw_coefficient(spec, rng), "outlier": True}
    return _fill(spec, rng, meta, _uniform_x(rng))


def outlier_count(fraction: float, count: int) -> int:
    """round(fraction * count), halves rounded up."""
    return int(np.floor(fraction * count + 0.5))


def outlier_positions(spec: TaskSourceSpec, count: int, seed: int, stream: int = 0) -> set[int]:
    n_out = outlier_count(spec.outlier_fraction, count)
    if n_out == 0:
        return set()
    perm = task_rng(seed, stream, _PLACEMENT_KEY).permutation(count)
    return set(int(i) for i in perm[:n_out])


def gen_task(spec: TaskSourceSpec, index: int, seed: int, stream: int = 0, outlier: bool = False) -> Task:
    rng = task_rng(seed, stream, index)
    if spec.kind == "linear-bimodal":
        return gen_linear_task(spec, rng)
    return gen_outlier_task(spec, rng) if outlier else gen_sine_task(spec, rng)


def gen_task_set(spec: TaskSourceSpec, count: int, seed: int, stream: int = 0) -> list[Task]:
    """``count`` tasks with exactly ``round(fraction * count)`` outliers at seeded positions."""
    if count < 1:
        raise InvalidArgument("task count must be >= 1")
    out = outlier_positions(spec, count, seed, stream)
    return [gen_task(spec, i, seed, stream, i in out) for i in range(count)]


@dataclass(frozen=True)
class TaskBatch:
    """A task set stacked into ``(T, K, n)`` arrays for vectorised evaluation."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @classmethod
    def from_tasks(cls, tasks) -> "TaskBatch":
        if not tasks:
            raise InvalidArgument("empty task list")
        try:
            return cls(
                np.stack([t.train.inputs for t in tasks]),
                np.stack([t.train.targets for t in tasks]),
                np.stack([t.test.inputs for t in tasks]),
                np.stack([t.test.targets for t in tasks]),
            )
        except ValueError as exc:
            raise InvalidArgument(f"tasks have inconsistent shapes: {exc}") from None

    def __len__(self):
        return len(self.x_train)


# line-delimited task files ------------------------------------------------

def task_to_record(task: Task) -> dict:
    return {
        "meta": task.meta,
        "train": {"x": task.train.inputs.tolist(), "y": task.train.targets.tolist()},
        "test": {"x": task.test.inputs.tolist(), "y": task.test.targets.tolist()},
    }


def task_from_record(rec: dict) -> Task:
    return Task(
        Dataset(np.array(rec["train"]["x"]), np.array(rec["train"]["y"])),
        Dataset(np.array(rec["test"]["x"]), np.array(rec["test"]["y"])),
        rec.get("meta", {}),
    )


def write_task_file(path, tasks, header: dict | None = None) -> None:
    """One JSON record per line. Python's float repr round-trips float64 exactly."""
    with open(path, "w") as fh:
        if header is not None:
            fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for t in tasks:
            fh.write(json.dumps(task_to_record(t), sort_keys=True) + "\n")


def read_task_file(path) -> list[Task]:
    tasks = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if "header" in rec:
            continue
        tasks.append(task_from_record(rec))
    return tasks


def spec_to_dict(spec: TaskSourceSpec) -> dict:
    return asdict(spec)
