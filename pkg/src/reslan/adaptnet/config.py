"""Declarative configuration for the model, sensor encoder and training."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path

from ..depthio import AugmentConfig
from ..errors import ConfigError
from ..geometry import LidarSpec
from ..lidarfilter import Identity, parse_filter_spec
from ..metrics import LossConfig
from ..tensorcore import AdamConfig


class Mode(str, Enum):
    ADAPTIVE = "adaptive"  # fusion weights from the sensor encoder
    FIXED = "fixed"  # learned constant fusion weights
    RGB_ONLY = "rgb"  # no depth branch at all


@dataclass(frozen=True)
class SensorEncoderConfig:
    channels: tuple[int, ...] = (8, 16, 32)
    pool_size: int = 2
    hidden: int = 64
    max_grid: int = 8
    # one (w, b) pair per level instead of per feature channel
    scalar_weights: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels or min(self.channels) < 1:
            raise ConfigError("sensor encoder needs at least one conv block with positive width")
        if self.pool_size < 1 or self.hidden < 1 or self.max_grid < 1:
            raise ConfigError("sensor encoder sizes must be positive")


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple[int, ...] = (16, 32, 64)
    width: int = 96
    height: int = 32
    mode: Mode = Mode.ADAPTIVE
    max_depth: float = 80.0
    init_depth: float = 20.0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "mode", Mode(self.mode))
        if not self.channels or min(self.channels) < 1:
            raise ConfigError("need at least one level with positive channel count")
        step = 2 ** (self.levels - 1)
        if self.width % step or self.height % step:
            raise ConfigError(f"input size {self.width}x{self.height} must be divisible by {step}")
        if not 0 < self.init_depth <= self.max_depth:
            raise ConfigError("init_depth must lie in (0, max_depth]")

    @property
    def levels(self) -> int:
        return len(self.channels)


@dataclass(frozen=True)
class TrainSchedule:
    stage1_epochs: int = 10
    stage2_epochs: int = 10
    freeze_rgb_encoder_in_stage2: bool = True
    tasks: tuple = (Identity(),)
    batch_size: int = 8
    augment: AugmentConfig | None = None

    def __post_init__(self):
        tasks = tuple(parse_filter_spec(t) if isinstance(t, str) else t for t in self.tasks)
        object.__setattr__(self, "tasks", tasks)
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.stage2_epochs > 0 and not tasks:
            raise ConfigError("stage 2 needs a non-empty task list")
        if self.batch_size < 1:
            raise ConfigError("batch size must be positive")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    encoder: SensorEncoderConfig = field(default_factory=SensorEncoderConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    lidar: LidarSpec = field(default_factory=LidarSpec)
    seed: int = 0


def _build(cls, doc, section):
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ConfigError(f"bad {section!r} section: {exc}") from exc


def config_from_dict(doc: dict) -> TrainConfig:
    allowed = {"model", "sensor_encoder", "schedule", "loss", "optimizer", "lidar", "seed"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    sched = dict(doc.get("schedule") or {})
    if sched.get("augment") is not None:
        aug = dict(sched["augment"])
        for key in ("crop_size", "brightness", "contrast", "saturation"):
            if aug.get(key) is not None:
                aug[key] = tuple(aug[key])
        sched["augment"] = _build(AugmentConfig, aug, "schedule.augment")
    loss = doc.get("loss")
    if loss is not None and "lambda" in loss:
        loss = {"lam": loss["lambda"], **{k: v for k, v in loss.items() if k != "lambda"}}
    return TrainConfig(
        model=_build(ModelConfig, doc.get("model"), "model"),
        encoder=_build(SensorEncoderConfig, doc.get("sensor_encoder"), "sensor_encoder"),
        schedule=_build(TrainSchedule, sched, "schedule"),
        loss=_build(LossConfig, loss, "loss"),
        optimizer=_build(AdamConfig, doc.get("optimizer"), "optimizer"),
        lidar=_build(LidarSpec, doc.get("lidar"), "lidar"),
        seed=int(doc.get("seed", 0)),
    )


def config_to_dict(cfg: TrainConfig) -> dict:
    model = asdict(cfg.model)
    model["mode"] = cfg.model.mode.value
    model["channels"] = list(cfg.model.channels)
    sched = asdict(cfg.schedule)
    sched["tasks"] = [str(t) for t in cfg.schedule.tasks]
    return {
        "model": model,
        "sensor_encoder": {**asdict(cfg.encoder), "channels": list(cfg.encoder.channels)},
        "schedule": sched,
        "loss": {"lambda": cfg.loss.lam},
        "optimizer": asdict(cfg.optimizer),
        "lidar": asdict(cfg.lidar),
        "seed": cfg.seed,
    }


def load_config(path) -> TrainConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(doc)
