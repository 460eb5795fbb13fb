"""Run configuration: a JSON document validated against a strict schema."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import jsonschema

from .ensemble import EnsembleConfig
from .model import ArchSpec
from .train import TrainConfig


class ConfigError(ValueError):
    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer or "/"
        self.message = message


_TRAIN_PROPS = {
    "epochs": {"type": "integer", "minimum": 0},
    "batch_size": {"type": "integer", "minimum": 1},
    "lr": {"type": "number", "exclusiveMinimum": 0},
    "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "weight_decay": {"type": "number", "minimum": 0},
    "milestones": {"type": "array", "items": {"type": "integer", "minimum": 0}},
    "gamma_lr": {"type": "number", "exclusiveMinimum": 0},
    "seed": {"type": "integer", "minimum": 0},
}

_FINETUNE_PROPS = dict(
    _TRAIN_PROPS,
    M={"type": "integer", "minimum": 1},
    prior_p={"type": "number", "minimum": 0, "maximum": 1},
    alpha={"type": "number", "minimum": 0},
    freeze_all_but_norm={"type": "boolean"},
    update_running_stats={"type": "boolean"},
)

_DATASET = {
    "oneOf": [
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"const": "two_moons"},
                "n": {"type": "integer", "minimum": 4},
                "noise_std": {"type": "number", "minimum": 0},
                "n_test": {"type": "integer", "minimum": 1},
                "n_ood": {"type": "integer", "minimum": 1},
                "ood_radius_factor": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"const": "blobs"},
                "k": {"type": "integer", "minimum": 2},
                "n": {"type": "integer", "minimum": 4},
                "spread": {"type": "number", "exclusiveMinimum": 0},
                "n_test": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "train_images", "train_labels", "test_images", "test_labels"],
            "properties": {
                "kind": {"const": "idx"},
                "train_images": {"type": "string"},
                "train_labels": {"type": "string"},
                "test_images": {"type": "string"},
                "test_labels": {"type": "string"},
                "holdout": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "limit_train": {"type": "integer", "minimum": 1},
                "limit_test": {"type": "integer", "minimum": 1},
            },
        },
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"const": "digits"},
                "n_train": {"type": "integer", "minimum": 4},
                "n_test": {"type": "integer", "minimum": 1},
                "holdout": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
    ]
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "arch", "pretrain", "finetune"],
    "properties": {
        "dataset": _DATASET,
        "arch": {
            "type": "object",
            "additionalProperties": False,
            "required": ["input_dim", "hidden", "num_classes"],
            "properties": {
                "input_dim": {"type": "integer", "minimum": 1},
                "num_classes": {"type": "integer", "minimum": 2},
                "hidden": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["width"],
                        "properties": {
                            "width": {"type": "integer", "minimum": 1},
                            "norm": {"enum": ["batch", "layer", "instance", None]},
                            "activation": {"enum": ["relu", "gelu", "tanh"]},
                        },
                    },
                },
            },
        },
        "pretrain": {"type": "object", "additionalProperties": False, "properties": _TRAIN_PROPS},
        "finetune": {"type": "object", "additionalProperties": False, "properties": _FINETUNE_PROPS},
        "ensemble": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"L": {"type": "integer", "minimum": 1}, "seed": {"type": "integer", "minimum": 0}},
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"ece_bins": {"type": "integer", "minimum": 1}},
        },
        "gradvar": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_steps": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 2},
                "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                "vi_sigma_init": {"type": "number", "exclusiveMinimum": 0},
                "alpha": {"type": "number", "minimum": 0},
                "along_trajectory": {"type": "boolean"},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "abnn_start": {"enum": ["checkpoint", "init"]},
            },
        },
    },
}


@dataclass(frozen=True)
class FinetuneConfig:
    train: TrainConfig
    M: int = 3
    prior_p: float = 0.5
    alpha: float = 0.01
    freeze_all_but_norm: bool = True
    update_running_stats: bool = False


@dataclass(frozen=True)
class GradVarConfig:
    n_steps: int = 20
    batch_size: int = 128
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    vi_sigma_init: float = 0.01
    alpha: float = 0.01
    along_trajectory: bool = False
    lr: float = 0.01
    abnn_start: str = "checkpoint"


@dataclass(frozen=True)
class RunConfig:
    dataset: dict
    arch: ArchSpec
    pretrain: TrainConfig
    finetune: FinetuneConfig
    ensemble: EnsembleConfig = EnsembleConfig()
    ece_bins: int = 15
    gradvar: GradVarConfig = GradVarConfig()
    document: dict = field(default_factory=dict, compare=False)

    def with_finetune(self, **changes) -> RunConfig:
        train_changes = {k: v for k, v in changes.items() if k in TrainConfig.__dataclass_fields__}
        other = {k: v for k, v in changes.items() if k not in train_changes}
        ft = replace(self.finetune, train=replace(self.finetune.train, **train_changes), **other)
        return replace(self, finetune=ft)

    def with_pretrain(self, **changes) -> RunConfig:
        return replace(self, pretrain=replace(self.pretrain, **changes))


def _pointer(path) -> str:
    return "/" + "/".join(str(p).replace("~", "~0").replace("/", "~1") for p in path)


def validate(doc: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if not errors:
        return
    err = errors[0]
    # For oneOf failures report the branch matching the declared kind.
    if err.validator == "oneOf" and isinstance(err.instance, dict):
        for sub in err.context:
            if sub.validator != "const" and sub.schema_path and _branch_matches(err, sub):
                err = sub
                break
        else:
            path = list(err.absolute_path) + ["kind"]
            raise ConfigError(_pointer(path), f"unknown kind {err.instance.get('kind')!r}")
    path = list(err.absolute_path)
    # Point at the offending key rather than its parent object.
    if err.validator == "additionalProperties":
        allowed = err.schema.get("properties", {})
        path.append(sorted(k for k in err.instance if k not in allowed)[0])
    elif err.validator == "required":
        path.append(next(k for k in err.validator_value if k not in err.instance))
    raise ConfigError(_pointer(path), err.message)


def _branch_matches(parent, sub) -> bool:
    branch = parent.validator_value[sub.schema_path[0]]
    kind = branch.get("properties", {}).get("kind", {}).get("const")
    return kind is not None and parent.instance.get("kind") == kind


def override_seed(doc: dict, seed: int) -> dict:
    doc = copy.deepcopy(doc)
    for section in ("dataset", "pretrain", "finetune", "ensemble"):
        if section in doc and (section != "dataset" or doc[section].get("kind") != "idx"):
            doc[section]["seed"] = seed
    return doc


def parse(doc: dict) -> RunConfig:
    validate(doc)
    ft_doc = dict(doc["finetune"])
    ft_extra = {k: ft_doc.pop(k) for k in list(ft_doc) if k not in _TRAIN_PROPS}
    gv = dict(doc.get("gradvar", {}))
    if "seeds" in gv:
        gv["seeds"] = tuple(gv["seeds"])
    try:
        return RunConfig(
            dataset=dict(doc["dataset"]),
            arch=ArchSpec.from_dict(doc["arch"]),
            pretrain=TrainConfig(**doc["pretrain"]),
            finetune=FinetuneConfig(TrainConfig(**ft_doc), **ft_extra),
            ensemble=EnsembleConfig(**doc.get("ensemble", {})),
            ece_bins=doc.get("eval", {}).get("ece_bins", 15),
            gradvar=GradVarConfig(**gv),
            document=copy.deepcopy(doc),
        )
    except ValueError as exc:
        raise ConfigError("/", str(exc)) from None


def load(path, seed: int | None = None) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("/", f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("/", "config must be a JSON object")
    validate(doc)
    if seed is not None:
        doc = override_seed(doc, seed)
    return parse(doc)
