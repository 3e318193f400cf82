"""Run configuration: one JSON document driving synth, train, eval and gradcheck."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

from .model import ModelConfig
from .numeric import AdamConfig
from .sampling import SplitSpec
from .synthcohort import CohortSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "model": ModelConfig().to_dict(),
    "optimizer": {"lr": 0.001, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "training": {"epochs": 50, "batch_size": 32, "loader_scheme": "uniform_random", "seed": 0, "checkpoint_every": 0},
    "data": {"path": None, "synth": CohortSpec().to_dict()},
    "split": {"train_fraction": 0.8, "seed": 0},
    "eval": {"max_T": 4, "max_sum_T_tau": 5, "checkpoint": "final"},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[k], dict) and k != "synth" and isinstance(v, dict):
            out[k] = _merge(out[k], v, where + ".")
        elif k == "synth" and isinstance(v, dict):
            out[k] = {**(out[k] or {}), **v}
        else:
            out[k] = v
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b.c=value``; the value is parsed as JSON, falling back to a plain string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(doc: dict, overrides) -> dict:
    doc = copy.deepcopy(doc)
    for text in overrides or ():
        keys, value = parse_override(text)
        node = doc
        for k in keys[:-1]:
            if not isinstance(node, dict) or k not in node:
                raise ConfigError(f"override {text!r}: unknown key {k!r}")
            if node[k] is None:
                node[k] = {}
            node = node[k]
        if not isinstance(node, dict):
            raise ConfigError(f"override {text!r}: {keys[-2]!r} is not a section")
        if keys[-1] not in node and not (len(keys) >= 2 and keys[-2] == "synth"):
            raise ConfigError(f"override {text!r}: unknown key {keys[-1]!r}")
        node[keys[-1]] = value
    return doc


@dataclass
class RunConfig:
    model: ModelConfig
    optimizer: AdamConfig
    training: TrainConfig
    data_path: str | None
    synth: CohortSpec | None
    split: SplitSpec
    eval_checkpoint: str = "final"
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, doc: dict, overrides=()) -> "RunConfig":
        merged = apply_overrides(_merge(DEFAULTS, doc or {}), overrides)
        try:
            model = ModelConfig.from_dict(merged["model"])
            opt = AdamConfig(**merged["optimizer"])
            tr = merged["training"]
            if not isinstance(tr.get("seed"), int) or isinstance(tr.get("seed"), bool):
                raise ConfigError("training.seed must be an integer (runs are always seeded)")
            training = TrainConfig(**tr)
            data = merged["data"]
            synth = CohortSpec.from_dict(data["synth"]) if data.get("synth") else None
            path = data.get("path")
            if path is None and synth is None:
                raise ConfigError("data needs either a path or a synth spec")
            split = SplitSpec(float(merged["split"]["train_fraction"]), int(merged["split"]["seed"]))
            if not 0.0 < split.train_fraction < 1.0:
                raise ConfigError(f"split.train_fraction must be in (0, 1), got {split.train_fraction}")
            ev = merged["eval"]
            if (ev["max_T"], ev["max_sum_T_tau"]) != (model.max_T, model.max_sum_T_tau):
                raise ConfigError("eval bucket domain must match model.max_T / model.max_sum_T_tau")
            if ev["checkpoint"] not in ("final", "best"):
                raise ConfigError("eval.checkpoint must be 'final' or 'best'")
            if opt.lr <= 0 or not 0 <= opt.beta1 < 1 or not 0 <= opt.beta2 < 1 or opt.eps <= 0:
                raise ConfigError("optimizer settings out of range")
            if synth is not None and path is None and synth.dims != model.input_dims:
                raise ConfigError(f"synth dims {synth.dims} do not match model input dims {model.input_dims}")
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(model, opt, training, path, synth, split, ev["checkpoint"], merged)

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        doc = {}
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    doc = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc, overrides)

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)
