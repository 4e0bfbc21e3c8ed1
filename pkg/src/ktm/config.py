"""Run configuration: one YAML/JSON file with one section per concern.

Unknown keys are rejected (fail-closed) with the offending dotted key name.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class ModelSection:
    embed_dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 512
    dropout_p: float = 0.0


@dataclass
class MergeSection:
    k: int = 4
    enabled: bool = True  # false: uncompressed baseline
    hidden: int | None = None  # encoder width, default 4 * embed_dim
    strategy: str = "average"
    keep_mean: bool | None = None
    keep_last: int = 0


@dataclass
class LoraSection:
    rank: int = 4
    alpha: float = 16.0
    dropout: float = 0.05
    full_finetune: bool = False


@dataclass
class StageSection:
    n_nodes: list = field(default_factory=lambda: [5, 5])
    threshold: float = 0.97
    max_epochs: int = 20
    n_train: int = 2048
    n_val: int = 512


@dataclass
class TrainSection:
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 8
    grad_clip: float | None = 1.0
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    stages: list = field(default_factory=lambda: [StageSection()])
    stop_at_threshold: bool = True
    epochs: int | None = None  # overrides every stage's max_epochs; jsonl epoch count
    base_checkpoint: str | None = None
    base_epochs: int = 12
    base_lr: float = 1e-3
    base_batch_size: int = 32
    base_seed: int = 0
    base_n_train: int = 4096
    out_dir: str = "runs/default"


@dataclass
class DataSection:
    task: str = "tree"  # "tree" or "jsonl"
    n_nodes: list = field(default_factory=lambda: [5, 5])
    n_samples: int = 1000
    seed: int = 0
    train_path: str | None = None
    val_path: str | None = None


@dataclass
class EvalSection:
    metric: str = "accuracy"
    label_tokens: list = field(default_factory=lambda: ["true", "false"])
    ppl_min: float | None = None
    n_generated: int = 0


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    merge: MergeSection = field(default_factory=MergeSection)
    lora: LoraSection = field(default_factory=LoraSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self, check_paths: bool = False) -> "RunConfig":
        if self.merge.k < 1:
            raise ConfigError(f"merge.k must be >= 1, got {self.merge.k}")
        if not self.train.seeds:
            raise ConfigError("train.seeds must be nonempty")
        if self.merge.strategy not in ("average", "random"):
            raise ConfigError(f"merge.strategy must be 'average' or 'random', got {self.merge.strategy!r}")
        if self.data.task not in ("tree", "jsonl"):
            raise ConfigError(f"data.task must be 'tree' or 'jsonl', got {self.data.task!r}")
        if self.eval.metric not in ("accuracy", "perplexity"):
            raise ConfigError(f"eval.metric must be 'accuracy' or 'perplexity', got {self.eval.metric!r}")
        if self.model.embed_dim % self.model.n_heads:
            raise ConfigError("model.embed_dim must be divisible by model.n_heads")
        if check_paths:
            for key in ("train.base_checkpoint", "data.train_path", "data.val_path"):
                section, name = key.split(".")
                value = getattr(getattr(self, section), name)
                if value is not None and not Path(value).exists():
                    raise ConfigError(f"{key}: path {value!r} does not exist")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}


def _build(cls, values: dict, prefix: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{prefix}: expected a mapping, got {type(values).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key '{prefix}.{key}'")
    kwargs = dict(values)
    if cls is TrainSection and "stages" in kwargs:
        kwargs["stages"] = [
            _build(StageSection, s, f"{prefix}.stages[{i}]") for i, s in enumerate(kwargs["stages"])
        ]
    return cls(**kwargs)


def from_dict(raw: dict | None) -> RunConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    sections = {}
    for name, value in raw.items():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown config key '{name}'")
        cls = type(_SECTIONS[name]())
        sections[name] = _build(cls, value or {}, name)
    return RunConfig(**sections).validate()


def load_config(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot parse config ({exc})") from exc
    return from_dict(raw)


def apply_override(cfg: RunConfig, dotted: str, value) -> RunConfig:
    """Set ``section.key`` (value parsed as YAML scalar/list when given as str)."""
    parts = dotted.split(".")
    if len(parts) != 2 or parts[0] not in _SECTIONS:
        raise ConfigError(f"unknown config key '{dotted}'")
    section = getattr(cfg, parts[0])
    if parts[1] not in {f.name for f in dataclasses.fields(section)}:
        raise ConfigError(f"unknown config key '{dotted}'")
    if isinstance(value, str):
        value = yaml.safe_load(value)
    if parts == ["train", "stages"]:
        value = [_build(StageSection, s, f"train.stages[{i}]") for i, s in enumerate(value)]
    setattr(section, parts[1], value)
    return cfg.validate()
