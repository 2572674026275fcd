"""Run configuration: one JSON document with sections model, train, privacy, workers, dataset, output.

Sections for individual subcommands (``attack``, ``integrity``, ``infer``)
are optional. Unknown sections or keys are rejected before any work starts.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, fields

from .errors import ConfigError
from .nn import DTYPES, Model, TrainConfig
from .protocol import ProtocolConfig, WorkerProfile

SECTIONS = ("model", "train", "privacy", "workers", "dataset", "output", "attack", "integrity", "infer")

DEFAULTS = {
    "model": {"input_shape": [20], "layers": [
        {"kind": "dense", "in": 20, "out": 16}, {"kind": "relu"}, {"kind": "dense", "in": 16, "out": 2}]},
    "train": {"learning_rate": 0.05, "batch_size": 8, "epochs": 1, "steps": None, "precision": "f64",
              "seed": 0, "log_every": 1, "integrity_policy": "abort", "max_retries": 3},
    "privacy": {"K": 2, "M": 1, "E": 1, "sigma2": 1e8, "noise_mean": 0.0, "tau": None, "C_min": 0.1,
                "paper_literal": False, "offload_input_grad": True, "assignment": "identity",
                "scheme_mode": "random",
                # leakage-bound parameters for analyze-privacy
                "preset": "paper-table", "C1": 1.0, "alpha_max": 1.0, "alpha_min": 1.0, "var_sum": 0.0,
                "sigma2_values": [1.6e7, 2.5e7, 1e8, 4e8]},
    "workers": {"count": None, "faulty": [], "colluding": [], "crashed": []},
    "dataset": {"kind": "synthetic-blobs", "n": 200, "n_classes": 2, "dim": 20, "seed": 1},
    "output": {"dir": "out", "transcript": True},
    "attack": {"trials": 20, "colluders": None, "dim": 64, "input_var": 1.0,
               "sigma2_values": [1e2, 1e4, 1e6, 1e8]},
    "integrity": {"trials": 100, "perturbation_scale": 1e-2, "faulty_worker": 1, "in_features": 20,
                  "out_features": 16},
    "infer": {"count": None, "weights": None},
}

_PROTOCOL_KEYS = {f.name for f in fields(ProtocolConfig)} - {"precision", "seed", "record_digests"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path}{key!r}")
        if isinstance(base[key], dict) and key not in ("dataset",):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path}{key!r} must be an object")
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def resolve(raw: dict, seed=None, precision=None, workers=None, paper_literal=False, out=None) -> dict:
    """Defaults + file contents + command-line overrides, validated."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = dict(raw)
    dataset = raw.pop("dataset", None)
    cfg = _merge(DEFAULTS, raw)
    if dataset is not None:
        if not isinstance(dataset, dict) or "kind" not in dataset:
            raise ConfigError("dataset section needs a 'kind'")
        cfg["dataset"] = copy.deepcopy(dataset)
    if seed is not None:
        cfg["train"]["seed"] = int(seed)
    if precision is not None:
        cfg["train"]["precision"] = precision
    if workers is not None:
        cfg["workers"]["count"] = int(workers)
    if paper_literal:
        cfg["privacy"]["paper_literal"] = True
    if out is not None:
        cfg["output"]["dir"] = out
    validate(cfg)
    return cfg


def load(path, **overrides) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}") from None
    return resolve(raw, **overrides)


def validate(cfg):
    """Build every typed object once so bad values fail before any work."""
    try:
        build_model(cfg)
        train_config(cfg)
        pcfg = protocol_config(cfg)
        worker_profiles(cfg, pcfg)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    if cfg["train"]["precision"] not in DTYPES:
        raise ConfigError(f"precision must be one of {sorted(DTYPES)}")
    if cfg["train"]["integrity_policy"] not in ("abort", "retry-batch", "log-and-continue"):
        raise ConfigError("integrity_policy must be abort, retry-batch or log-and-continue")
    if cfg["privacy"]["preset"] not in ("paper-table", "direct"):
        raise ConfigError("privacy.preset must be 'paper-table' or 'direct'")
    if cfg["train"]["batch_size"] % pcfg.K:
        raise ConfigError(f"train.batch_size must be a multiple of privacy.K={pcfg.K}")
    if int(cfg["attack"]["trials"]) < 1 or int(cfg["integrity"]["trials"]) < 1:
        raise ConfigError("trial counts must be >= 1")


def build_model(cfg) -> Model:
    try:
        return Model.from_dict(cfg["model"])
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid model: {exc}") from None


def train_config(cfg) -> TrainConfig:
    t = {k: v for k, v in cfg["train"].items() if k in _TRAIN_KEYS}
    try:
        return TrainConfig(**t)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train section: {exc}") from None


def protocol_config(cfg) -> ProtocolConfig:
    p = {k: v for k, v in cfg["privacy"].items() if k in _PROTOCOL_KEYS}
    try:
        return ProtocolConfig(precision=cfg["train"]["precision"], seed=int(cfg["train"]["seed"]),
                              record_digests=bool(cfg["output"]["transcript"]), **p)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid privacy section: {exc}") from None


def worker_profiles(cfg, pcfg=None):
    """Worker list: honest by default, with faulty/colluding/crashed overrides by worker id."""
    pcfg = pcfg or protocol_config(cfg)
    w = cfg["workers"]
    count = w["count"] if w["count"] is not None else pcfg.P + pcfg.E
    if count < 1:
        raise ConfigError("workers.count must be >= 1")
    profiles = {i: WorkerProfile.honest(i) for i in range(count)}
    try:
        for f in w["faulty"]:
            profiles[_wid(f, count)] = WorkerProfile.faulty(f["worker_id"], f.get("perturbation_scale", 1e-2),
                                                            f.get("fault_probability", 1.0))
        for c in w["colluding"]:
            profiles[_wid(c, count)] = WorkerProfile.colluding(c["worker_id"], c.get("group_id", 0))
        for c in w["crashed"]:
            wid = _wid(c, count)
            profiles[wid] = WorkerProfile(wid, "crashed")
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"invalid workers section: {exc}") from None
    return [profiles[i] for i in range(count)]


def _wid(entry, count):
    wid = entry["worker_id"] if isinstance(entry, dict) else int(entry)
    if not 0 <= wid < count:
        raise ConfigError(f"worker_id {wid} outside 0..{count - 1}")
    return wid


@dataclass
class RunRecord:
    command: str
    config: dict

    def to_dict(self):
        return {"command": self.command, "seed": self.config["train"]["seed"], "config": self.config}
