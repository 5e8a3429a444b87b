"""Command-line interface.

    tanml train      meta-train and write a checkpoint plus a per-iteration trace
    tanml eval       score a checkpoint on test tasks, write a results CSV
    tanml run        full Monte-Carlo comparison, write a results CSV
    tanml gradcheck  check outer gradients against finite differences
    tanml gen-tasks  write a task set as line-delimited JSON
    tanml compare    merge results CSVs into one table

The default output directory is ``$TANML_OUT`` (or ``./runs``).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from .checkpoint import CheckpointError, fresh_checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, dump_config, parse_config, preset_config, with_overrides
from .evaluation import (EvalReport, ResultRow, compare_table, evaluate_state, realization_tasks, rows_from_csv,
                         rows_to_csv, run_experiment)
from .gradcheck import gradcheck, small_config
from .metalearners import ALGORITHMS, GRADIENT_MODES, NumericalDivergence, meta_train
from .predictors import InvalidArgument
from .taskgen import TaskBatch, read_task_file, spec_to_dict, write_task_file

log = logging.getLogger("tanml")

EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3


def default_out() -> Path:
    return Path(os.environ.get("TANML_OUT", "runs"))


def out_file(out: str | None, name: str) -> Path:
    """--out as a file path, or a directory that receives the default file name."""
    if not out:
        return default_out() / name
    path = Path(out)
    return path / name if path.is_dir() else path


def _config_args(p: argparse.ArgumentParser, run_flags: bool = True) -> None:
    p.add_argument("--config", help="YAML config file (keys override the preset)")
    p.add_argument("--preset", help="exp1, exp2a-10, exp2a-20, exp2b-10, exp2b-20, optionally -<algorithm>")
    p.add_argument("--seed", type=int)
    p.add_argument("--algorithm", action="append", choices=ALGORITHMS,
                   help="restrict to this algorithm (repeatable)")
    p.add_argument("--gradient-mode", choices=GRADIENT_MODES)
    p.add_argument("--t-train", type=int, help="number of training tasks")
    if run_flags:
        p.add_argument("--n-iter", type=int, help="outer iterations")
        p.add_argument("--mc-runs", type=int, help="Monte-Carlo realisations")
        p.add_argument("--workers", type=int, help="parallel realisations")


def load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = parse_config(args.config, args.preset)
    else:
        cfg = preset_config(args.preset or "exp1")
    return with_overrides(
        cfg, seed=args.seed, gradient_mode=args.gradient_mode, t_train=args.t_train,
        algorithms=tuple(args.algorithm) if args.algorithm else None,
        n_iter=getattr(args, "n_iter", None), mc_runs=getattr(args, "mc_runs", None),
        workers=getattr(args, "workers", None),
    )


# trace files ----------------------------------------------------------------

def write_trace(path: Path, trace: list[dict], append: bool) -> None:
    if not trace and append:
        return
    keys = ["iteration", "objective"] + sorted(k for k in (trace[0] if trace else {}) if k.startswith("grad_norm_"))
    mode = "a" if append and path.exists() else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            w.writerow(keys)
        for rec in trace:
            w.writerow([rec[k] if k == "iteration" else repr(float(rec[k])) for k in keys])


# subcommands ------------------------------------------------------------------

def cmd_train(args) -> int:
    out = Path(args.out or default_out())
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        ck = load_checkpoint(args.resume)
        jobs = [(ck, args.n_iter or 0, True)]
    else:
        cfg = load_config(args)
        batch = TaskBatch.from_tasks(realization_tasks(cfg, 0)[0])
        jobs = [(fresh_checkpoint(cfg, a, batch), cfg.n_iter, False) for a in cfg.algorithms]
    status = 0
    for ck, n_iter, resumed in jobs:
        cfg, learner, state, opt = ck.config, ck.learner, ck.state, ck.optimizer
        batch = TaskBatch.from_tasks(realization_tasks(cfg, 0)[0])
        name = state.algorithm
        try:
            _, trace = meta_train(learner, state, batch, opt, n_iter, cfg.gradient_mode,
                                  log_every=max(1, n_iter // 10))
        except NumericalDivergence as exc:
            write_trace(out / f"{name}.trace.csv", exc.trace, resumed)
            print(f"{name}: diverged at iteration {exc.iteration}: {exc}", file=sys.stderr)
            status = EXIT_DIVERGED
            continue
        save_checkpoint(out / f"{name}.ckpt.json", cfg, learner, state, opt)
        write_trace(out / f"{name}.trace.csv", trace, resumed)
        last = f", objective {trace[-1]['objective']:.6g}" if trace else ""
        print(f"{name}: {state.iteration} iterations{last} -> {out / (name + '.ckpt.json')}")
    return status


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = ck.config
    if args.tasks:
        tasks = read_task_file(args.tasks)
    else:
        train, test = realization_tasks(cfg, 0)
        tasks = train if args.split == "train" else test
    value, _, _ = evaluate_state(ck.learner, ck.state, tasks)
    row = ResultRow(ck.state.algorithm, cfg.experiment, cfg.t_train, cfg.outlier_fraction, 1, value,
                    float("nan"), ck.state.iteration, cfg.gradient_mode, cfg.seed)
    out = out_file(args.out, f"{ck.state.algorithm}.eval.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(rows_to_csv([row]))
    print(f"{ck.state.algorithm}: NMSE {value:.6g} on {len(tasks)} tasks -> {out}")
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args)
    out = Path(args.out or default_out())
    out.mkdir(parents=True, exist_ok=True)
    report: EvalReport = run_experiment(cfg)
    (out / "results.csv").write_text(report.to_csv())
    (out / "config.yaml").write_text(dump_config(cfg))
    print(compare_table([report]).render())
    diverged = any(d is not None for r in report.results.values() for d in r.diverged_at)
    return EXIT_DIVERGED if diverged and cfg.strict else 0


def cmd_gradcheck(args) -> int:
    cfg = small_config(load_config(args), args.input_dim, args.t_train, args.hidden)
    mode = args.gradient_mode or "exact"
    algorithms = args.algorithm or list(ALGORITHMS)
    ok = True
    for a in algorithms:
        res = gradcheck(cfg, a, mode)
        ok &= res.passed
        errs = "  ".join(f"{g}={e:.2e}" for g, e in res.errors.items())
        print(f"{'PASS' if res.passed else 'FAIL'}  {a:<15} {mode:<12} {errs}")
    return 0 if ok else EXIT_FAIL


def cmd_gen_tasks(args) -> int:
    cfg = load_config(args)
    train, test = realization_tasks(cfg, args.realization)
    tasks = train if args.split == "train" else test
    out = out_file(args.out, f"tasks-{args.split}.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    header = {"spec": spec_to_dict(cfg.task_spec()), "seed": cfg.seed, "split": args.split,
              "realization": args.realization, "fingerprint": cfg.fingerprint()}
    write_task_file(out, tasks, header)
    print(f"{len(tasks)} {args.split} tasks -> {out}")
    return 0


def cmd_compare(args) -> int:
    tables = [rows_from_csv(Path(p).read_text()) for p in args.results]
    table = compare_table(tables)
    print(table.render())
    if args.out:
        Path(args.out).write_text(table.to_csv())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tanml", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="meta-train and write checkpoints")
    _config_args(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("--resume", help="continue from this checkpoint for --n-iter more iterations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", help="task file written by gen-tasks (default: regenerate from the config)")
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--out", help="CSV path or existing directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="Monte-Carlo comparison of all configured algorithms")
    _config_args(p)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gradcheck", help="compare outer gradients with finite differences")
    _config_args(p, run_flags=False)
    p.add_argument("--input-dim", type=int, help="linear models only (default 2)")
    p.add_argument("--hidden", type=int, nargs="+", help="hidden widths for MLP models")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-tasks", help="write a task set to a JSONL file")
    _config_args(p, run_flags=False)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--realization", type=int, default=0)
    p.add_argument("--out", help="JSONL path or existing directory")
    p.set_defaults(func=cmd_gen_tasks)

    p = sub.add_parser("compare", help="merge results CSVs into one table")
    p.add_argument("results", nargs="+")
    p.add_argument("--out", help="write the merged table as CSV")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, InvalidArgument, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
