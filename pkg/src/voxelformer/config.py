"""Run configuration files: JSON documents with model / loss / data / train
sections mirroring the corresponding dataclasses. Unknown fields and
cross-section inconsistencies are rejected by name."""

import json
from dataclasses import dataclass, field, fields
from typing import Optional, Tuple

from .losses import LossConfig
from .model import ConfigError, ModelConfig
from .synthetic import SyntheticTaskConfig


@dataclass
class TrainSettings:
    steps: int = 300
    batch_size: int = 4
    base_lr: float = 2e-4
    min_lr: float = 1e-9
    weight_decay: float = 1e-5
    betas: Tuple[float, float] = (0.9, 0.999)
    warmup_steps: Optional[int] = None     # default: 5 desk-scale epochs
    schedule_steps: Optional[int] = None   # default: 100 epochs, at least the run length
    val_every: int = 10
    augment: bool = True
    augment_noise_std: float = 0.05
    early_stop_dice: Optional[float] = None  # mean foreground Dice on the train split
    freeze_prefixes: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"train.steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.val_every < 1:
            raise ConfigError(f"train.val_every must be >= 1, got {self.val_every}")
        self.betas = tuple(self.betas)
        self.freeze_prefixes = tuple(self.freeze_prefixes)

    def resolved_warmup(self, steps_per_epoch: int) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return 5 * steps_per_epoch

    def resolved_schedule(self, steps_per_epoch: int) -> int:
        if self.schedule_steps is not None:
            return self.schedule_steps
        return max(100 * steps_per_epoch, self.steps)


def _build_section(cls, data: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown fields in config section {section!r}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"config section {section!r}: {exc}") from exc


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=lambda: LossConfig(num_classes=4))
    data: SyntheticTaskConfig = field(
        default_factory=lambda: SyntheticTaskConfig(num_classes=4, in_channels=4))
    train: TrainSettings = field(default_factory=TrainSettings)

    def validate(self) -> None:
        self.model.validate()
        if self.loss.num_classes != self.model.num_classes:
            raise ConfigError(
                f"loss.num_classes ({self.loss.num_classes}) != "
                f"model.num_classes ({self.model.num_classes})")
        if self.data.num_classes != self.model.num_classes:
            raise ConfigError(
                f"data.num_classes ({self.data.num_classes}) != "
                f"model.num_classes ({self.model.num_classes})")
        if self.data.in_channels != self.model.in_channels:
            raise ConfigError(
                f"data.in_channels ({self.data.in_channels}) != "
                f"model.in_channels ({self.model.in_channels})")
        if self.data.volume_size % 16 != 0:
            raise ConfigError(
                f"data.volume_size ({self.data.volume_size}) must be a multiple of 16")
        if self.train.batch_size > self.data.num_train:
            raise ConfigError(
                f"train.batch_size ({self.train.batch_size}) exceeds "
                f"data.num_train ({self.data.num_train})")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {"model", "loss", "data", "train"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        model = ModelConfig.from_dict(data.get("model", {}))
        loss_section = dict(data.get("loss", {}))
        loss_section.setdefault("num_classes", model.num_classes)
        data_section = dict(data.get("data", {}))
        data_section.setdefault("num_classes", model.num_classes)
        data_section.setdefault("in_channels", model.in_channels)
        run = cls(
            model=model,
            loss=_build_section(LossConfig, loss_section, "loss"),
            data=_build_section(SyntheticTaskConfig, data_section, "data"),
            train=_build_section(TrainSettings, dict(data.get("train", {})), "train"),
        )
        run.validate()
        return run


def load_run_config(path: str) -> RunConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object with config sections")
    return RunConfig.from_dict(raw)
