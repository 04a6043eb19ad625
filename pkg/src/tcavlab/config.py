"""Pipeline configuration.

A config is one YAML document. Every random choice has its own seed field;
the effective seed of a step is the top-level ``seed`` plus the step's
seed, so ``--seed`` shifts the whole pipeline at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from .cav import CavTrainConfig
from .concepts import COLOR_REFERENCES, TEXTURE_KINDS
from .diffmodel import TrainConfig

CONCEPT_KINDS = ("color", "texture", "disease")
POOL_KINDS = ("grayscale_leaves", "healthy_leaves")
# pool kinds guaranteed free of each concept kind
POOL_FOR_CONCEPT = {"color": ("grayscale_leaves",), "texture": ("healthy_leaves",), "disease": ("healthy_leaves",)}


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    data_dir: str = "data/leaves"
    concepts_dir: str = "out/concepts"
    negatives_dir: str = "out/negatives"
    output_dir: str = "out"
    checkpoint: str = "out/model.cvkm"


@dataclass
class DatasetSpec:
    generate: bool = True
    count_per_class: int = 150
    size: tuple = (32, 32)
    seed: int = 11


@dataclass
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1
    seed: int = 1


@dataclass
class ModelSpec:
    seed: int = 3
    zero_head: bool = False


@dataclass
class ConceptSpec:
    name: str
    kind: str
    count: int = 100
    seed: int = 0
    size: tuple = (32, 32)
    negatives: str = "grayscale_leaves"


@dataclass
class PoolSpec:
    name: str
    kind: str
    count: int = 300
    seed: int = 0
    size: tuple = (32, 32)


@dataclass
class ExperimentSpec:
    layers: list = field(default_factory=lambda: ["relu3"])
    classes: list = field(default_factory=list)  # class names; empty = last class
    concepts: list = field(default_factory=list)  # empty = whole roster
    n_runs: int = 10
    negatives_per_run: int = 100
    alpha: float = 0.05
    m: int = 2
    seed: int = 0
    test: str = "welch"
    inputs: str = "test"  # which split supplies the class inputs: train, val, test or all


@dataclass
class ReportSpec:
    emit_svg: bool = True
    emit_csv: bool = True


def _default_concepts() -> list:
    return [ConceptSpec(c, "color", 100, seed=100 + i) for i, c in enumerate(COLOR_REFERENCES)]


def _default_pools() -> list:
    return [PoolSpec("grayscale_leaves", "grayscale_leaves", 300, seed=200)]


@dataclass
class PipelineConfig:
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    split: SplitSpec = field(default_factory=SplitSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    cav: CavTrainConfig = field(default_factory=CavTrainConfig)
    concepts: list = field(default_factory=_default_concepts)
    negatives: list = field(default_factory=_default_pools)
    experiment: ExperimentSpec = field(default_factory=ExperimentSpec)
    report: ReportSpec = field(default_factory=ReportSpec)
    base_dir: Path = field(default_factory=Path.cwd, repr=False)

    def path(self, key: str) -> Path:
        p = Path(getattr(self.paths, key))
        return p if p.is_absolute() else self.base_dir / p

    def effective(self, seed: int) -> int:
        return self.seed + seed

    def pool_spec(self, name: str) -> PoolSpec:
        for p in self.negatives:
            if p.name == name:
                return p
        raise ConfigError(f"no negative pool named {name!r}")

    def validate(self) -> "PipelineConfig":
        names = [c.name for c in self.concepts]
        if len(set(names)) != len(names):
            raise ConfigError("concept names must be unique")
        for c in self.concepts:
            if c.kind not in CONCEPT_KINDS:
                raise ConfigError(f"concept {c.name!r}: unknown kind {c.kind!r}")
            if c.kind == "color" and c.name not in COLOR_REFERENCES:
                raise ConfigError(f"color concept {c.name!r} must be one of {sorted(COLOR_REFERENCES)}")
            if c.kind == "texture" and c.name not in TEXTURE_KINDS:
                raise ConfigError(f"texture concept {c.name!r} must be one of {list(TEXTURE_KINDS)}")
            if c.count < 1:
                raise ConfigError(f"concept {c.name!r}: count must be positive")
            pool = self.pool_spec(c.negatives)
            if pool.kind not in POOL_FOR_CONCEPT[c.kind]:
                raise ConfigError(
                    f"concept {c.name!r} ({c.kind}) cannot use negative pool {pool.name!r} ({pool.kind}): "
                    f"it may contain the concept"
                )
        for p in self.negatives:
            if p.kind not in POOL_KINDS:
                raise ConfigError(f"negative pool {p.name!r}: unknown kind {p.kind!r}")
        for name in self.experiment.concepts:
            if name not in names:
                raise ConfigError(f"experiment concept {name!r} is not in the roster")
        if self.experiment.inputs not in ("train", "val", "test", "all"):
            raise ConfigError(f"experiment.inputs must be train, val, test or all")
        return self


def _build(cls, data: Any, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {', '.join(unknown)}")
    kwargs = {k: tuple(v) if k == "size" else v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(doc: Optional[dict], base_dir=None) -> PipelineConfig:
    doc = dict(doc or {})
    known = {f.name for f in fields(PipelineConfig)} - {"base_dir"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
    cfg = PipelineConfig(base_dir=Path(base_dir) if base_dir else Path.cwd())
    if "seed" in doc:
        if not isinstance(doc["seed"], int):
            raise ConfigError("seed must be an integer")
        cfg.seed = doc["seed"]
    singles = {
        "paths": Paths, "dataset": DatasetSpec, "split": SplitSpec, "model": ModelSpec,
        "train": TrainConfig, "cav": CavTrainConfig, "experiment": ExperimentSpec, "report": ReportSpec,
    }
    for key, cls in singles.items():
        if key in doc:
            setattr(cfg, key, _build(cls, doc[key], key))
    if "concepts" in doc:
        if not isinstance(doc["concepts"], list):
            raise ConfigError("concepts must be a list")
        cfg.concepts = [_build(ConceptSpec, c, f"concepts[{i}]") for i, c in enumerate(doc["concepts"])]
    if "negatives" in doc:
        if not isinstance(doc["negatives"], list):
            raise ConfigError("negatives must be a list")
        cfg.negatives = [_build(PoolSpec, p, f"negatives[{i}]") for i, p in enumerate(doc["negatives"])]
    return cfg.validate()


def load_config(path=None, seed: Optional[int] = None) -> PipelineConfig:
    if path is None:
        cfg = config_from_dict({})
    else:
        path = Path(path)
        try:
            doc = yaml.safe_load(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
        cfg = config_from_dict(doc, base_dir=path.parent)
    if seed is not None:
        cfg.seed = seed
    return cfg
