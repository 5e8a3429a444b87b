"""NMSE, the Monte-Carlo comparison harness, and result tables."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .kernels import DegenerateInput
from .metalearners import ALGORITHMS, NumericalDivergence, default_lrs, make_learner, meta_train
from .optim import OuterOptimizer
from .predictors import InvalidArgument
from .taskgen import TaskBatch, gen_task_set, task_rng

log = logging.getLogger(__name__)

CSV_COLUMNS = ("algorithm", "experiment", "T_tr", "outlier_fraction", "mc_runs", "nmse_mean",
               "nmse_stderr", "n_iter", "gradient_mode", "seed")
_INIT_KEY = 2**31 - 2


# NMSE -----------------------------------------------------------------------

def nmse_components(y_true, y_pred) -> tuple[np.ndarray, np.ndarray]:
    """Per-task squared-error sums and target energies."""
    if len(y_true) != len(y_pred):
        raise InvalidArgument(f"{len(y_true)} target sets but {len(y_pred)} prediction sets")
    num, den = [], []
    for y, yh in zip(y_true, y_pred):
        y = np.asarray(y, dtype=np.float64)
        yh = np.asarray(yh, dtype=np.float64)
        if y.shape != yh.shape:
            raise InvalidArgument(f"targets {y.shape} and predictions {yh.shape} differ in shape")
        num.append(np.sum((y - yh) ** 2))
        den.append(np.sum(y * y))
    return np.array(num), np.array(den)


def nmse_from_components(num, den) -> float:
    total = float(np.sum(den))
    if total == 0.0:
        raise DegenerateInput("NMSE is undefined when every test target is zero")
    return float(np.sum(num)) / total


def nmse(y_true, y_pred) -> float:
    """Summed squared error over all tasks and shots divided by summed target energy."""
    if len(y_true) == 0:
        raise DegenerateInput("NMSE needs at least one test task")
    return nmse_from_components(*nmse_components(y_true, y_pred))


# seeding ------------------------------------------------------------------

def realization_tasks(config: ExperimentConfig, r: int):
    """Training and test task sets of Monte-Carlo realisation ``r``."""
    spec = config.task_spec()
    return (gen_task_set(spec, config.t_train, config.seed, 2 * r),
            gen_task_set(spec, config.t_test, config.seed, 2 * r + 1))


def theta0_rng(config: ExperimentConfig, r: int):
    return task_rng(config.seed, r, _INIT_KEY)


def learner_rng(config: ExperimentConfig, r: int, algorithm: str):
    return task_rng(config.seed, r, _INIT_KEY, ALGORITHMS.index(algorithm))


def build_learner(config: ExperimentConfig, algorithm: str, model=None):
    model = model if model is not None else config.make_model()
    return make_learner(algorithm, model, alpha=config.alpha,
                        alpha_init=(config.alpha_init_low, config.alpha_init_high), mu=config.mu,
                        sigma2=config.sigma2, per_layer=config.per_layer, regularizer=config.regularizer,
                        standardize=config.standardize)


def build_optimizer(config: ExperimentConfig, algorithm: str) -> OuterOptimizer:
    lr0, lr_meta = config.lrs(algorithm)
    return OuterOptimizer(config.optimizer, default_lrs(algorithm, lr0, lr_meta or lr0))


def initial_state(config: ExperimentConfig, algorithm: str, learner, batch: TaskBatch, r: int = 0):
    """Initial meta-parameters; theta0 is shared by every algorithm of a realisation."""
    theta0 = learner.model.init_params(theta0_rng(config, r))
    return learner.init_state(learner_rng(config, r, algorithm), batch, theta0)


# Monte-Carlo harness ------------------------------------------------------------

@dataclass
class AlgorithmResult:
    algorithm: str
    run_nmse: np.ndarray          # (R,), nan where the run diverged
    numerators: np.ndarray        # (R, T_v)
    denominators: np.ndarray      # (R, T_v)
    diverged_at: list             # iteration of divergence per run, or None

    def usable(self, strict: bool) -> np.ndarray:
        if strict:
            return self.run_nmse
        return self.run_nmse[[d is None for d in self.diverged_at]]


@dataclass
class EvalReport:
    config: ExperimentConfig
    results: dict[str, AlgorithmResult]
    fingerprint: str = ""

    def __post_init__(self):
        if not self.fingerprint:
            self.fingerprint = self.config.fingerprint()

    @property
    def mc_runs(self) -> int:
        return len(next(iter(self.results.values())).run_nmse)

    def nmse_mean(self, algorithm: str) -> float:
        runs = self.results[algorithm].usable(self.config.strict)
        return float(np.mean(runs)) if len(runs) else float("nan")

    def nmse_stderr(self, algorithm: str) -> float:
        runs = self.results[algorithm].usable(self.config.strict)
        if len(runs) < 2:
            return float("nan")
        return float(np.std(runs, ddof=1) / np.sqrt(len(runs)))

    def rows(self) -> list["ResultRow"]:
        c = self.config
        return [ResultRow(a, c.experiment, c.t_train, c.outlier_fraction, self.mc_runs, self.nmse_mean(a),
                          self.nmse_stderr(a), c.n_iter, c.gradient_mode, c.seed, c.setting_fingerprint())
                for a in self.results]

    def to_csv(self) -> str:
        return rows_to_csv(self.rows())


def _predict(model, thetas, x):
    return model.predict_batch(thetas, x)


def run_realization(config: ExperimentConfig, r: int, predictors=None) -> dict:
    """Meta-train every algorithm on realisation ``r`` and score it on the test tasks."""
    train_tasks, test_tasks = realization_tasks(config, r)
    batch = TaskBatch.from_tasks(train_tasks)
    test = TaskBatch.from_tasks(test_tasks)
    out = {}
    for algorithm in config.algorithms:
        learner = build_learner(config, algorithm)
        state = initial_state(config, algorithm, learner, batch, r)
        optimizer = build_optimizer(config, algorithm)
        diverged = None
        try:
            meta_train(learner, state, batch, optimizer, config.n_iter, config.gradient_mode)
            thetas = learner.adapt(state, test.x_train, test.y_train)
            preds = _predict(learner.model, thetas, test.x_test)
            num, den = nmse_components(test.y_test, preds)
            value = nmse_from_components(num, den)
        except NumericalDivergence as exc:
            log.warning("realization %d, %s diverged: %s", r, algorithm, exc)
            diverged = exc.iteration
            num = np.full(len(test_tasks), np.nan)
            den = np.array([np.sum(t.test.targets ** 2) for t in test_tasks])
            value = float("nan")
        out[algorithm] = (value, num, den, diverged)
    for name, predict in (predictors or {}).items():
        preds = [predict(t) for t in test_tasks]
        num, den = nmse_components([t.test.targets for t in test_tasks], preds)
        out[name] = (nmse_from_components(num, den), num, den, None)
    return out


def _run_one(args):
    return run_realization(*args)


def run_experiment(config: ExperimentConfig, workers: int | None = None, predictors=None) -> EvalReport:
    """Average NMSE over ``config.mc_runs`` independent realisations.

    ``predictors`` maps extra names to callables ``task -> predictions on
    task.test.inputs``; they are scored on the same test tasks. With more
    than one worker they must be picklable.
    """
    workers = workers or config.workers
    jobs = [(config, r, predictors) for r in range(config.mc_runs)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_run = list(pool.map(_run_one, jobs))
    else:
        per_run = [_run_one(j) for j in jobs]
    results = {}
    for name in per_run[0]:
        vals = [run[name] for run in per_run]  # realisation-index order
        results[name] = AlgorithmResult(name, np.array([v[0] for v in vals]), np.stack([v[1] for v in vals]),
                                        np.stack([v[2] for v in vals]), [v[3] for v in vals])
    return EvalReport(config, results)


def evaluate_state(learner, state, tasks) -> tuple[float, np.ndarray, np.ndarray]:
    """NMSE of a trained learner on ``tasks`` (adapting on each train split)."""
    test = TaskBatch.from_tasks(tasks)
    thetas = learner.adapt(state, test.x_train, test.y_train)
    num, den = nmse_components(test.y_test, _predict(learner.model, thetas, test.x_test))
    return nmse_from_components(num, den), num, den


# CSV and tables ---------------------------------------------------------------

@dataclass
class ResultRow:
    algorithm: str
    experiment: str
    T_tr: int
    outlier_fraction: float
    mc_runs: int
    nmse_mean: float
    nmse_stderr: float
    n_iter: int
    gradient_mode: str
    seed: int
    setting: str | None = field(default=None, compare=False)

    @property
    def column(self) -> tuple:
        return (self.experiment, self.T_tr, self.outlier_fraction)

    @property
    def protocol(self) -> tuple:
        return (self.mc_runs, self.n_iter, self.gradient_mode, self.seed)


def _fmt(v) -> str:
    return "%.12g" % v if isinstance(v, float) else str(v)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in rows:
        w.writerow([_fmt(getattr(row, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def rows_from_csv(text: str) -> list[ResultRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise InvalidArgument(f"unexpected CSV columns {reader.fieldnames}")
    rows = []
    for rec in reader:
        rows.append(ResultRow(rec["algorithm"], rec["experiment"], int(rec["T_tr"]),
                              float(rec["outlier_fraction"]), int(rec["mc_runs"]), float(rec["nmse_mean"]),
                              float(rec["nmse_stderr"]), int(rec["n_iter"]), rec["gradient_mode"],
                              int(rec["seed"])))
    return rows


@dataclass
class CompareTable:
    algorithms: list[str]
    columns: list[tuple]
    cells: dict  # (algorithm, column) -> (mean, stderr)

    def to_csv(self) -> str:
        rows = []
        for (a, col), (m, s) in sorted(self.cells.items(), key=lambda kv: (self.algorithms.index(kv[0][0]),
                                                                             self.columns.index(kv[0][1]))):
            rows.append([a, *col, _fmt(m), _fmt(s)])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["algorithm", "experiment", "T_tr", "outlier_fraction", "nmse_mean", "nmse_stderr"])
        w.writerows([[_fmt(x) for x in r] for r in rows])
        return buf.getvalue()

    def render(self) -> str:
        heads = ["algorithm"] + [f"{e} T_tr={t} out={f:g}" for e, t, f in self.columns]
        body = []
        for a in self.algorithms:
            line = [a]
            for col in self.columns:
                cell = self.cells.get((a, col))
                line.append("-" if cell is None else f"{cell[0]:.4f} +/- {cell[1]:.4f}")
            body.append(line)
        widths = [max(len(r[i]) for r in [heads] + body) for i in range(len(heads))]
        fmt = "  ".join("{:<%d}" % w for w in widths)
        return "\n".join(fmt.format(*r).rstrip() for r in [heads] + body)


def compare_table(reports) -> CompareTable:
    """Rows per algorithm, columns per experiment setting.

    ``reports`` may mix ``EvalReport`` objects and ``ResultRow`` lists read
    from CSV. Results placed in the same column must come from the same
    setting and protocol, and each cell may be filled only once.
    """
    rows = []
    for rep in reports:
        rows.extend(rep.rows() if isinstance(rep, EvalReport) else rep)
    if not rows:
        raise InvalidArgument("nothing to compare")
    algorithms, columns, cells, owner = [], [], {}, {}
    for row in rows:
        col = row.column
        ref = owner.setdefault(col, row)
        if ref.protocol != row.protocol or (ref.setting and row.setting and ref.setting != row.setting):
            raise InvalidArgument(f"results for {col} come from different configurations")
        if (row.algorithm, col) in cells:
            raise InvalidArgument(f"duplicate result for {row.algorithm} in {col}")
        if row.algorithm not in algorithms:
            algorithms.append(row.algorithm)
        if col not in columns:
            columns.append(col)
        cells[(row.algorithm, col)] = (row.nmse_mean, row.nmse_stderr)
    return CompareTable(algorithms, columns, cells)
