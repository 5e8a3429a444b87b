"""Experiment configuration: presets, YAML parsing, validation, fingerprints."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import yaml

from .metalearners import ALGORITHMS, GRADIENT_MODES
from .predictors import make_model
from .taskgen import KINDS, TaskSourceSpec


class ConfigError(ValueError):
    """Malformed config text or a field outside its domain."""


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = "exp1"
    experiment: str = "exp1"
    algorithms: tuple[str, ...] = ("maml", "metasgd", "tanml-gaussian", "tanml-cosine")

    # predictor
    model: str = "linear"
    hidden_widths: tuple[int, ...] = (16, 16)

    # task source
    task_kind: str = "linear-bimodal"
    input_dim: int = 16
    shots: int = 16
    test_shots: int = 16
    noise_std: float = 1.0
    x_std: float = 1.0
    outlier_fraction: float = 0.0

    # counts
    t_train: int = 32
    t_test: int = 64
    n_iter: int = 10000
    mc_runs: int = 30
    seed: int = 0

    # adaptation / regularisation
    alpha: float = 0.01
    alpha_init_low: float = 0.001
    alpha_init_high: float = 0.01
    mu: float = 0.1
    sigma2: float = 0.5
    gradient_mode: str = "first-order"
    per_layer: bool = False
    standardize: bool = False
    regularizer: str = "rkhs"

    # outer optimiser
    optimizer: str = "adam"
    lr_maml_theta0: float = 5e-4
    lr_metasgd_theta0: float = 5e-4
    lr_metasgd_alpha: float = 1e-6
    lr_gmsgd_theta0: float = 5e-4
    lr_gmsgd_w: float = 1e-6
    lr_tanml_gaussian_theta0: float = 1e-3
    lr_tanml_gaussian_psi: float = 5e-5
    lr_tanml_cosine_theta0: float = 5e-4
    lr_tanml_cosine_psi: float = 1e-5

    # execution (not part of the fingerprint)
    strict: bool = True
    workers: int = 1
    out_dir: str = ""

    def __post_init__(self):
        validate(self)

    # derived objects -----------------------------------------------------
    def task_spec(self) -> TaskSourceSpec:
        return TaskSourceSpec(self.task_kind, self.shots, self.test_shots, self.noise_std,
                              self.outlier_fraction, self.input_dim, self.x_std)

    def make_model(self):
        widths = (self.input_dim, *self.hidden_widths, 1)
        return make_model(self.model, self.input_dim, widths)

    def lrs(self, algorithm: str) -> tuple[float, float | None]:
        """(theta0 step, meta-coefficient step) for ``algorithm``."""
        key = algorithm.replace("-", "_")
        meta = {"maml": None, "metasgd": "alpha", "gmsgd": "w"}.get(algorithm, "psi")
        return getattr(self, f"lr_{key}_theta0"), (getattr(self, f"lr_{key}_{meta}") if meta else None)

    def fingerprint(self) -> str:
        return _digest({k: v for k, v in self.to_dict().items() if k not in _NON_SEMANTIC})

    def setting_fingerprint(self) -> str:
        """Identifies the evaluation setting: everything but the algorithm list and its step sizes."""
        skip = _NON_SEMANTIC | {"algorithms"} | {f.name for f in fields(self) if f.name.startswith("lr_")}
        return _digest({k: v for k, v in self.to_dict().items() if k not in skip})

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


_NON_SEMANTIC = {"preset", "workers", "out_dir"}


def _digest(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def validate(cfg: ExperimentConfig) -> None:
    def bad(name, msg):
        raise ConfigError(f"{name}: {msg}")

    if not cfg.algorithms:
        bad("algorithms", "at least one algorithm is required")
    for a in cfg.algorithms:
        if a not in ALGORITHMS:
            bad("algorithms", f"unknown algorithm {a!r} (choose from {', '.join(ALGORITHMS)})")
    if cfg.model not in ("linear", "mlp"):
        bad("model", f"unknown model {cfg.model!r}")
    if cfg.task_kind not in KINDS:
        bad("task_kind", f"unknown task kind {cfg.task_kind!r}")
    if cfg.gradient_mode not in GRADIENT_MODES:
        bad("gradient_mode", f"must be one of {GRADIENT_MODES}")
    if cfg.optimizer not in ("adam", "sgd"):
        bad("optimizer", "must be 'adam' or 'sgd'")
    if cfg.regularizer not in ("rkhs", "l2"):
        bad("regularizer", "must be 'rkhs' or 'l2'")
    for name in ("input_dim", "shots", "test_shots", "t_train", "t_test", "mc_runs", "workers"):
        if getattr(cfg, name) < 1:
            bad(name, "must be >= 1")
    if cfg.n_iter < 0:
        bad("n_iter", "must be >= 0")
    if any(w < 1 for w in cfg.hidden_widths):
        bad("hidden_widths", "widths must be >= 1")
    for f in fields(cfg):
        if f.name.startswith("lr_") or f.name in ("alpha", "sigma2", "x_std"):
            if not getattr(cfg, f.name) > 0:
                bad(f.name, "must be > 0")
    if cfg.mu < 0:
        bad("mu", "must be >= 0")
    if cfg.noise_std < 0:
        bad("noise_std", "must be >= 0")
    if not 0 < cfg.alpha_init_low <= cfg.alpha_init_high:
        bad("alpha_init_low", "need 0 < alpha_init_low <= alpha_init_high")
    if not 0 <= cfg.outlier_fraction < 1:
        bad("outlier_fraction", "must be in [0, 1)")
    if cfg.outlier_fraction > 0 and cfg.task_kind == "linear-bimodal":
        bad("outlier_fraction", "outliers are only defined for sine task sources")
    if cfg.task_kind != "linear-bimodal" and cfg.input_dim != 1:
        bad("input_dim", "sine task sources are one-dimensional")


# presets ------------------------------------------------------------------

_EXP1 = dict(
    experiment="exp1", model="linear", task_kind="linear-bimodal", input_dim=16, shots=16, test_shots=16,
    noise_std=1.0, x_std=1.0, outlier_fraction=0.0, t_train=32, t_test=64, n_iter=10000, mc_runs=30,
    sigma2=10.0, per_layer=False, standardize=True,
    lr_tanml_gaussian_psi=1e-4, lr_tanml_cosine_psi=1e-4,
)


def _exp2(kind, fraction):
    return dict(
        experiment="exp2a" if kind == "sine-amplitude" else "exp2b", model="mlp", hidden_widths=(16, 16),
        task_kind=kind, input_dim=1, shots=4, test_shots=25, noise_std=0.0, outlier_fraction=fraction,
        t_train=256, t_test=100, n_iter=60000, mc_runs=100, sigma2=0.5, per_layer=True, standardize=False,
    )


PRESETS = {
    "exp1": _EXP1,
    "exp2a-10": _exp2("sine-amplitude", 0.1),
    "exp2a-20": _exp2("sine-amplitude", 0.2),
    "exp2b-10": _exp2("sine-frequency", 0.1),
    "exp2b-20": _exp2("sine-frequency", 0.2),
}


def preset_config(name: str, **overrides) -> ExperimentConfig:
    """Preset by name; ``<preset>-<algorithm>`` restricts it to one algorithm."""
    base, algorithms = name, None
    if name not in PRESETS:
        for a in ALGORITHMS:
            if name.endswith("-" + a) and name[: -len(a) - 1] in PRESETS:
                base, algorithms = name[: -len(a) - 1], (a,)
                break
        else:
            raise ConfigError(f"preset: unknown preset {name!r} (choose from {', '.join(PRESETS)}, "
                              "optionally suffixed with -<algorithm>)")
    values = dict(PRESETS[base], preset=name)
    if algorithms:
        values["algorithms"] = algorithms
    values.update(overrides)
    return _build(values)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(name, value):
    t = _FIELD_TYPES[name]
    if t.startswith("tuple"):
        items = [value] if isinstance(value, (str, int)) else value
        if not isinstance(items, (list, tuple)):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        inner = int if "int" in t else str
        if any(isinstance(x, bool) or not isinstance(x, inner) for x in items):
            raise ConfigError(f"{name}: expected a list of {inner.__name__}, got {value!r}")
        return tuple(items)
    if t == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if t == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if t == "float":
        if isinstance(value, str):
            try:
                value = float(value)  # YAML 1.1 reads "5e-4" as a string
            except ValueError:
                raise ConfigError(f"{name}: expected a number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{name}: expected a string, got {value!r}")
    return value


def _build(values: dict) -> ExperimentConfig:
    unknown = set(values) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    return ExperimentConfig(**{k: _coerce(k, v) for k, v in values.items()})


def parse_config_text(text: str, preset: str | None = None) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        # the context mark is where the broken construct starts; the problem
        # mark is where the parser noticed, which may be the end of the file
        where = [m.line + 1 for m in (exc.context_mark, exc.problem_mark) if m is not None]
        msg = f"line {where[0]}: " if where else ""
        msg += " ".join(x for x in (exc.context, exc.problem) if x)
        if len(where) == 2 and where[1] != where[0]:
            msg += f" (detected at line {where[1]})"
        raise ConfigError(msg) from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("line 1: config must be a mapping of key: value pairs")
    data = dict(data)
    name = data.pop("preset", None) or preset or "exp1"
    unknown = set(data) - set(_FIELD_TYPES)
    if unknown:
        lines = text.splitlines()
        key = sorted(unknown)[0]
        lineno = next((i + 1 for i, l in enumerate(lines) if l.split(":")[0].strip() == key), "?")
        raise ConfigError(f"line {lineno}: unknown config key {key!r}")
    base = preset_config(name)
    merged = base.to_dict()
    merged.update(data)
    merged["preset"] = name
    return _build(merged)


def parse_config(path, preset: str | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(), preset)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def with_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    clean = {k: _coerce(k, v) for k, v in overrides.items() if v is not None}
    return replace(cfg, **clean)


def config_from_dict(d: dict) -> ExperimentConfig:
    return _build(dict(d))
