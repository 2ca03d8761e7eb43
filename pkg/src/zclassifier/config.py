"""Run configuration: a JSON document validated against a closed schema."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema

from .backbone import BackboneConfig
from .gaussian_head import HEAD_KINDS, HeadKind
from .trainer import OptimizerConfig, TrainConfig

UNIT_UNIFORM = math.sqrt(3.0)


class ConfigError(ValueError):
    pass


def _obj(properties: dict, required=()) -> dict:
    return {"type": "object", "properties": properties, "required": list(required),
            "additionalProperties": False}


_NUM = {"type": "number"}
_INT = {"type": "integer"}

SCHEMA = _obj({
    "seed": {"type": "integer", "minimum": 0},
    "output_dir": {"type": "string"},
    "data": _obj({
        "source": {"enum": ["blobs", "cifar10"]},
        "blobs": _obj({
            "num_classes": {"type": "integer", "minimum": 2},
            "n_per_class": {"type": "integer", "minimum": 1},
            "test_per_class": {"type": "integer", "minimum": 1},
            "dim": {"type": "integer", "minimum": 1},
            "spread": {"type": "number", "exclusiveMinimum": 0},
            "separation": {"type": "number", "minimum": 6},
        }),
        "cifar_dir": {"type": "string"},
        "limit_train": {"type": "integer", "minimum": 1},
        "limit_test": {"type": "integer", "minimum": 1},
    }, required=["source"]),
    "model": _obj({
        "name": {"type": "string", "minLength": 1},
        "kind": {"enum": ["mlp", "conv"]},
        "widths": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "residual": {"type": "boolean"},
        "head": _obj({
            "kind": {"enum": list(HEAD_KINDS)},
            "lam": {"type": "number", "minimum": 0},
            "latent_dim": {"type": "integer", "minimum": 1},
            "samples": {"type": "integer", "minimum": 1},
            "ce_source": {"enum": ["mu", "sample"]},
        }),
    }),
    "train": _obj({
        "epochs": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "eval_every": {"type": "integer", "minimum": 1},
        "val_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "optimizer": _obj({
            "name": {"enum": ["sgd", "adam"]},
            "lr": {"type": "number", "minimum": 0},
            "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "beta1": _NUM, "beta2": _NUM, "eps": _NUM,
        }),
    }),
    "ood": _obj({
        "sources": {"type": "array", "minItems": 1, "items": _obj({
            "kind": {"enum": ["gaussian", "uniform", "shifted"]},
            "n": {"type": "integer", "minimum": 1},
            "lo": _NUM, "hi": _NUM,
            "shift": {"oneOf": [_NUM, {"type": "array", "items": _NUM}]},
        }, required=["kind"])},
        "tpr_target": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    }),
    "analyze": _obj({
        "methods": {"type": "array", "uniqueItems": True,
                    "items": {"enum": ["pca", "lda", "tsne"]}},
        "max_points": {"type": "integer", "minimum": 10},
        "sampled": {"type": "boolean"},
        "gmm": {"type": "boolean"},
        "tsne": _obj({
            "perplexity": {"type": "number", "exclusiveMinimum": 0},
            "iterations": {"type": "integer", "minimum": 1},
        }),
    }),
    "sweep": _obj({
        "stds": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
        "trials": {"type": "integer", "minimum": 1},
    }),
}, required=["data"])


@dataclass
class BlobSettings:
    num_classes: int = 10
    n_per_class: int = 200
    test_per_class: int = 100
    dim: int = 16
    spread: float = 1.0
    separation: float = 8.0


@dataclass
class DataSettings:
    source: str = "blobs"
    blobs: BlobSettings = field(default_factory=BlobSettings)
    cifar_dir: str | None = None
    limit_train: int | None = None
    limit_test: int | None = None


@dataclass
class ModelSettings:
    name: str | None = None
    kind: str = "mlp"
    widths: list[int] = field(default_factory=lambda: [64, 64])
    residual: bool = True
    head: HeadKind = field(default_factory=HeadKind)

    @property
    def display_name(self) -> str:
        return self.name or self.head.kind


@dataclass
class OodSource:
    kind: str
    n: int = 1000
    lo: float = -UNIT_UNIFORM
    hi: float = UNIT_UNIFORM
    shift: float | list[float] = 4.0

    def __post_init__(self):
        if self.kind == "uniform" and self.lo >= self.hi:
            raise ConfigError(f"ood source uniform: lo ({self.lo}) must be < hi ({self.hi})")


def _default_sources():
    return [OodSource("gaussian"), OodSource("uniform"), OodSource("shifted")]


@dataclass
class OodSettings:
    sources: list[OodSource] = field(default_factory=_default_sources)
    tpr_target: float = 0.95


@dataclass
class AnalyzeSettings:
    methods: list[str] = field(default_factory=lambda: ["pca", "lda", "tsne"])
    max_points: int = 500
    sampled: bool = False
    gmm: bool = True
    perplexity: float = 30.0
    iterations: int = 1000


@dataclass
class SweepSettings:
    stds: list[float] | None = None
    trials: int = 20


@dataclass
class RunConfig:
    data: DataSettings = field(default_factory=DataSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    ood: OodSettings = field(default_factory=OodSettings)
    analyze: AnalyzeSettings = field(default_factory=AnalyzeSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    output_dir: str = "runs/default"
    seed: int = 0

    def backbone(self, input_shape, num_classes) -> BackboneConfig:
        return BackboneConfig(self.model.kind, self.model.widths, self.model.residual,
                              tuple(input_shape), num_classes, self.model.head)

    def to_dict(self) -> dict:
        return asdict(self)


def parse_config(doc: dict) -> RunConfig:
    """Validate ``doc`` against ``SCHEMA`` and build a ``RunConfig``."""
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    try:
        data = dict(doc["data"])
        data["blobs"] = BlobSettings(**data.get("blobs", {}))
        model = dict(doc.get("model", {}))
        model["head"] = HeadKind.from_dict(model.get("head", {}))
        train = dict(doc.get("train", {}))
        train["optimizer"] = OptimizerConfig(**train.get("optimizer", {}))
        seed = doc.get("seed", 0)
        train.setdefault("seed", seed)
        ood = dict(doc.get("ood", {}))
        if "sources" in ood:
            ood["sources"] = [OodSource(**s) for s in ood["sources"]]
        analyze = dict(doc.get("analyze", {}))
        analyze.update(analyze.pop("tsne", {}))
        return RunConfig(
            data=DataSettings(**data),
            model=ModelSettings(**model),
            train=TrainConfig(**train),
            ood=OodSettings(**ood),
            analyze=AnalyzeSettings(**analyze),
            sweep=SweepSettings(**doc.get("sweep", {})),
            output_dir=os.environ.get("ZC_OUTPUT_DIR") or doc.get("output_dir", "runs/default"),
            seed=seed,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config error: {exc}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    try:
        return parse_config(doc)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
