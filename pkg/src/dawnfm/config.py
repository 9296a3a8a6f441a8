"""JSON experiment configuration."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .inference import InferenceConfig
from .model import ModelConfig
from .training import TrainConfig

TASKS = ("deblur", "tomo", "duathlon")
DATASETS = ("synthetic-phantoms", "idx", "duathlon-prior")


def _strict(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class DatasetConfig:
    kind: str = "synthetic-phantoms"
    side: int = 16
    channels: int = 1
    n_train: int = 500
    n_test: int = 100
    seed: int = 0
    train_path: str | None = None
    test_path: str | None = None

    def __post_init__(self):
        if self.kind not in DATASETS:
            raise ConfigError(f"dataset.kind must be one of {DATASETS}")
        if self.channels not in (1, 3):
            raise ConfigError("dataset.channels must be 1 or 3")
        if self.side < 1 or self.n_train < 1 or self.n_test < 1:
            raise ConfigError("dataset.side, n_train and n_test must be positive")


@dataclass
class OperatorConfig:
    sigma_x: float = 3.0
    sigma_y: float = 3.0
    n_angles: int = 360


@dataclass
class ExperimentConfig:
    task: str = "deblur"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    operator: OperatorConfig = field(default_factory=OperatorConfig)
    model: ModelConfig | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.task == "duathlon":
            if self.dataset.kind != "duathlon-prior":
                raise ConfigError("dataset.kind: the duathlon task needs 'duathlon-prior'")
            if self.model is None:
                self.model = ModelConfig.default_for((2,), "mlp")
            if self.model.input_shape != (2,):
                raise ConfigError("model.input_shape must be [2] for the duathlon task")
            return
        if self.dataset.kind == "duathlon-prior":
            raise ConfigError("dataset.kind: 'duathlon-prior' only fits the duathlon task")
        if self.dataset.kind == "idx" and not self.dataset.train_path:
            raise ConfigError("dataset.train_path is required for idx datasets")
        shape = (self.dataset.channels, self.dataset.side, self.dataset.side)
        if self.model is None:
            self.model = ModelConfig.default_for(shape)
        if self.model.input_shape != shape:
            raise ConfigError(f"model.input_shape {list(self.model.input_shape)} does not match "
                              f"dataset side/channels {list(shape)}")

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "dataset": asdict(self.dataset),
            "operator": asdict(self.operator),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "inference": asdict(self.inference),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be an object")
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown keys {unknown}")
        kw = {k: d[k] for k in ("task", "output_dir") if k in d}
        if "dataset" in d:
            kw["dataset"] = _strict(DatasetConfig, d["dataset"], "dataset")
        if "operator" in d:
            kw["operator"] = _strict(OperatorConfig, d["operator"], "operator")
        if "model" in d:
            kw["model"] = _strict(ModelConfig, d["model"], "model")
        if "train" in d:
            kw["train"] = _strict(TrainConfig, d["train"], "train")
        if "inference" in d:
            kw["inference"] = _strict(InferenceConfig, d["inference"], "inference")
        return cls(**kw)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())
