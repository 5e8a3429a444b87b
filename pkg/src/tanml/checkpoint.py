"""Versioned JSON checkpoints with floats stored as hexadecimal strings.

``float.hex`` round-trips every 64-bit value exactly, and the document is
written with sorted keys, so the same state always produces the same bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_from_dict
from .evaluation import build_learner, build_optimizer, initial_state
from .kernels import DescriptorBank
from .metalearners import MetaLearner, MetaState
from .optim import OuterOptimizer
from .predictors import InvalidArgument, LayerLayout

FORMAT_VERSION = 1


class CheckpointError(InvalidArgument):
    """Unsupported version or internally inconsistent checkpoint."""


def encode_array(a) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "hex": [float(x).hex() for x in a.ravel()]}


def decode_array(d: dict) -> np.ndarray:
    return np.array([float.fromhex(x) for x in d["hex"]], dtype=np.float64).reshape(d["shape"])


@dataclass
class Checkpoint:
    config: ExperimentConfig
    learner: MetaLearner
    state: MetaState
    optimizer: OuterOptimizer


def stored_config(config: ExperimentConfig, iteration: int) -> ExperimentConfig:
    """The config as recorded: execution-only fields reset, n_iter = iterations done."""
    return replace(config, n_iter=iteration, workers=1, out_dir="")


def to_document(config: ExperimentConfig, learner: MetaLearner, state: MetaState,
                optimizer: OuterOptimizer) -> dict:
    cfg = stored_config(config, state.iteration)
    return {
        "format_version": FORMAT_VERSION,
        "algorithm": state.algorithm,
        "layout": learner.model.layout.to_dict(),
        "hyper": learner.hyper(),
        "params": {k: encode_array(v) for k, v in state.params.items()},
        "banks": [
            {"matrix": encode_array(b.matrix), "theta0_snapshot": encode_array(b.theta0_snapshot),
             "source_layer": b.source_layer,
             "grad_scale": None if b.grad_scale is None else encode_array(b.grad_scale)}
            for b in state.banks
        ],
        "optimizer": {
            "kind": optimizer.kind, "lrs": {k: float(v).hex() for k, v in optimizer.lrs.items()},
            "beta1": float(optimizer.beta1).hex(), "beta2": float(optimizer.beta2).hex(),
            "eps": float(optimizer.eps).hex(), "t": optimizer.t,
            "m": {k: encode_array(v) for k, v in optimizer.m.items()},
            "v": {k: encode_array(v) for k, v in optimizer.v.items()},
        },
        "iteration": state.iteration,
        "config": cfg.to_dict(),
        "fingerprint": cfg.fingerprint(),
    }


def dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def save_checkpoint(path, config, learner, state, optimizer) -> None:
    Path(path).write_text(dumps(to_document(config, learner, state, optimizer)))


def from_document(doc: dict) -> Checkpoint:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version!r} (expected {FORMAT_VERSION})")
    config = config_from_dict(doc["config"])
    if config.fingerprint() != doc["fingerprint"]:
        raise CheckpointError("config fingerprint does not match the stored config")
    algorithm = doc["algorithm"]
    learner = build_learner(config, algorithm)
    if LayerLayout.from_dict(doc["layout"]) != learner.model.layout:
        raise CheckpointError("stored layer layout does not match the model the config describes")
    if doc["hyper"] != json.loads(json.dumps(learner.hyper())):
        raise CheckpointError("stored learner hyperparameters do not match the config")

    params = {k: decode_array(v) for k, v in doc["params"].items()}
    D = learner.model.dim
    if params.get("theta0") is None or params["theta0"].shape != (D,):
        raise CheckpointError(f"theta0 must have shape ({D},)")
    banks = []
    for b in doc["banks"]:
        scale = b["grad_scale"]
        banks.append(DescriptorBank(decode_array(b["matrix"]), decode_array(b["theta0_snapshot"]),
                                    b["source_layer"], None if scale is None else decode_array(scale)))
    for s, bank in zip(getattr(learner, "blocks", []), banks):
        if not np.array_equal(bank.theta0_snapshot, params["theta0"][s]):
            raise CheckpointError("descriptor bank snapshot differs from the stored theta0")
    if hasattr(learner, "blocks") and len(banks) != len(learner.blocks):
        raise CheckpointError(f"expected {len(learner.blocks)} descriptor banks, found {len(banks)}")
    state = MetaState(algorithm, params, banks, doc["iteration"])

    o = doc["optimizer"]
    optimizer = OuterOptimizer(o["kind"], {k: float.fromhex(v) for k, v in o["lrs"].items()},
                               float.fromhex(o["beta1"]), float.fromhex(o["beta2"]), float.fromhex(o["eps"]),
                               o["t"], {k: decode_array(v) for k, v in o["m"].items()},
                               {k: decode_array(v) for k, v in o["v"].items()})
    for name, m in optimizer.m.items():
        if name not in params or m.shape != params[name].shape:
            raise CheckpointError(f"optimizer moment {name!r} does not match its parameter group")
    return Checkpoint(config, learner, state, optimizer)


def load_checkpoint(path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc})") from None
    return from_document(doc)


def fresh_checkpoint(config: ExperimentConfig, algorithm: str, batch, r: int = 0) -> Checkpoint:
    """Initial state for ``algorithm`` on realisation ``r``'s training tasks."""
    learner = build_learner(config, algorithm)
    state = initial_state(config, algorithm, learner, batch, r)
    return Checkpoint(config, learner, state, build_optimizer(config, algorithm))
