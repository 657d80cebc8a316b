"""Toy-scale comparison of adaptive and fixed fusion on synthetic scenes."""
from __future__ import annotations

from dataclasses import dataclass

from ..lidarfilter import parse_filter_spec
from ..lidarsim import toy_dataset
from ..metrics import EvalResult
from ..tensorcore import AdamConfig
from .config import Mode, ModelConfig, SensorEncoderConfig, TrainSchedule
from .model import AdaptiveDepthModel
from .train import infer_and_eval, train


@dataclass(frozen=True)
class ComparisonConfig:
    # sparsest pattern last; several sensors so a single fixed fusion must compromise
    tasks: tuple[str, ...] = ("id", "sparse:2", "sparse:4", "sparse:8")
    n_train: int = 16
    n_test: int = 16
    stage1_epochs: int = 10
    stage2_epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    width: int = 96
    height: int = 32
    channels: tuple[int, ...] = (16, 32, 64)


@dataclass(frozen=True)
class ComparisonResult:
    seed: int
    tasks: tuple[str, ...]
    scores: dict  # mode value -> {task: EvalResult}

    def mae(self, mode: Mode, task: str) -> float:
        return self.scores[mode.value][task].mae


def compare_fusion(seed: int, cfg: ComparisonConfig = ComparisonConfig(), modes=(Mode.ADAPTIVE, Mode.FIXED)):
    """Train one model per mode on identical data and schedule; score on held-out scenes.

    Training and test scenes are drawn from disjoint seed streams.
    """
    tasks = tuple(parse_filter_spec(t) for t in cfg.tasks)
    train_set = toy_dataset(cfg.n_train, 1000 + seed, cfg.width, cfg.height, prefix="train")
    test_set = toy_dataset(cfg.n_test, 5000 + seed, cfg.width, cfg.height, prefix="test")
    schedule = TrainSchedule(
        stage1_epochs=cfg.stage1_epochs, stage2_epochs=cfg.stage2_epochs, tasks=tasks, batch_size=cfg.batch_size
    )
    scores: dict[str, dict[str, EvalResult]] = {}
    for mode in modes:
        model = AdaptiveDepthModel(
            ModelConfig(channels=cfg.channels, width=cfg.width, height=cfg.height, mode=mode), SensorEncoderConfig(), seed
        )
        train(train_set, schedule, model, seed, opt_cfg=AdamConfig(lr=cfg.lr))
        scores[Mode(mode).value] = {str(t): infer_and_eval(test_set, t, model) for t in tasks}
    return ComparisonResult(seed, tuple(str(t) for t in tasks), scores)
