"""JSONL datasets and samples, JSON run configs and checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .crystal import Crystal, CrystalError
from .engine import AdamState, Model, TrainConfig, TrainState
from .network import ModelConfig
from .schedules import ScheduleConfig

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "miad-checkpoint"
CHECKPOINT_VERSION = 1


class DatasetError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# datasets -------------------------------------------------------------------


def crystal_from_record(rec):
    if not isinstance(rec, dict):
        raise CrystalError("record is not a JSON object")
    missing = [k for k in ("lattice", "frac_coords", "atom_types") if k not in rec]
    if missing:
        raise CrystalError(f"missing field(s) {missing}")
    types = rec["atom_types"]
    if any(a == 0 for a in types):
        raise CrystalError("mirage type in input")
    return Crystal(
        lattice=np.asarray(rec["lattice"], dtype=float),
        frac_coords=np.asarray(rec["frac_coords"], dtype=float).reshape(-1, 3),
        atom_types=np.asarray(types),
    )


def crystal_to_record(crystal, id=None):
    rec = {
        "lattice": crystal.lattice.tolist(),
        "frac_coords": crystal.frac_coords.tolist(),
        "atom_types": [int(a) for a in crystal.atom_types],
    }
    if id is not None:
        rec["id"] = str(id)
    return rec


def load_dataset(path):
    """Parse a JSONL file of crystals. Returns (crystals, rejections).

    Each rejection is ``(line_number, reason)``; every one is also logged.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise DatasetError(f"cannot read dataset {path}: {err}") from err
    crystals, rejected = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            crystals.append(crystal_from_record(json.loads(line)))
        except (json.JSONDecodeError, CrystalError, TypeError, ValueError) as err:
            reason = str(err)
            log.warning("%s:%d rejected: %s", path, lineno, reason)
            rejected.append((lineno, reason))
    if not crystals:
        raise DatasetError(f"no valid records in {path}")
    return crystals, rejected


def write_crystals(crystals, path, prefix="sample"):
    with open(path, "w") as fh:
        for i, c in enumerate(crystals):
            fh.write(json.dumps(crystal_to_record(c, f"{prefix}-{i}"), sort_keys=True) + "\n")


# run configuration ---------------------------------------------------------------


@dataclass
class SampleConfig:
    num: int = 100
    seed: int = 0
    chunk: int = 128


@dataclass
class EvalConfig:
    cutoff: float = 6.0
    delta_d: float = 0.05
    min_dist: float = 0.5


@dataclass
class RunConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config section(s): {sorted(unknown)}")
        schedule = ScheduleConfig(**d.get("schedule", {}))
        train = dict(d.get("train", {}))
        train.pop("schedule", None)
        return cls(
            schedule=schedule,
            model=ModelConfig(**d.get("model", {})),
            train=TrainConfig(schedule=schedule, **train),
            sample=SampleConfig(**d.get("sample", {})),
            eval=EvalConfig(**d.get("eval", {})),
        )

    def to_dict(self):
        train = self.train.to_dict()
        train.pop("schedule")
        return {
            "schedule": asdict(self.schedule),
            "model": asdict(self.model),
            "train": train,
            "sample": asdict(self.sample),
            "eval": asdict(self.eval),
        }


def load_config(path):
    with open(path) as fh:
        return RunConfig.from_dict(json.load(fh))


# checkpoints ----------------------------------------------------------------


def _encode(arrays):
    return {k: {"shape": list(v.shape), "data": np.asarray(v, float).ravel().tolist()} for k, v in arrays.items()}


def _decode(blob):
    out = {}
    for k, v in blob.items():
        arr = np.array(v["data"], dtype=float)
        if arr.size != int(np.prod(v["shape"])):
            raise CheckpointError(f"tensor {k!r}: data does not match declared shape {v['shape']}")
        out[k] = arr.reshape(v["shape"])
    return out


def save_checkpoint(model, state, path):
    """Write config, schedule tables, parameters and optimizer state as JSON.

    Floats are written with the shortest repr that round-trips, so a reload is
    bit-exact.
    """
    sched = model.schedule
    train = model.config.to_dict()
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": {"train": train, "model": asdict(model.model_config)},
        "schedule_tables": {
            "beta": sched.beta.tolist(),
            "alpha_bar": sched.alpha_bar.tolist(),
            "sigma": sched.sigma.tolist(),
            "q_beta": sched.q_beta.tolist(),
        },
        "params": _encode(state.params),
        "adam": {"m": _encode(state.adam.m), "v": _encode(state.adam.v), "step": state.adam.step},
        "step": state.step,
        "epoch": state.epoch,
        "seed": model.config.seed,
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path):
    """Returns (Model, TrainState)."""
    raw = Path(path).read_bytes()
    try:
        doc = json.loads(raw.decode("utf-8"))
    except json.JSONDecodeError as err:
        raise CheckpointError(f"{path}: invalid JSON at byte offset {err.pos}: {err.msg}") from err
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if "version" not in doc:
        raise CheckpointError(f"{path}: missing format version")
    if doc["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {doc['version']} (expected {CHECKPOINT_VERSION})")
    try:
        train = dict(doc["config"]["train"])
        train["schedule"] = ScheduleConfig(**train["schedule"])
        model = Model(TrainConfig(**train), ModelConfig(**doc["config"]["model"]))
        for name in ("beta", "alpha_bar", "sigma", "q_beta"):
            if not np.array_equal(np.array(doc["schedule_tables"][name]), getattr(model.schedule, name)):
                raise CheckpointError(f"{path}: stored {name} table disagrees with the rebuilt schedule")
        params = _decode(doc["params"])
        expected = model.network.param_shapes()
        for k, shape in expected.items():
            if k not in params or params[k].shape != tuple(shape):
                raise CheckpointError(f"{path}: parameter {k!r} missing or mis-shaped")
        adam = AdamState(_decode(doc["adam"]["m"]), _decode(doc["adam"]["v"]), int(doc["adam"]["step"]))
        state = TrainState(params, adam, int(doc["step"]), int(doc["epoch"]))
    except KeyError as err:
        raise CheckpointError(f"{path}: missing field {err}") from err
    return model, state
