"""Two-stage training and filtered evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .. import tensorcore as tc
from ..depthio import DepthImage, Sample, augment
from ..errors import DivergenceError, EmptyEvaluationError
from ..geometry import ChannelMap, LidarSpec, label_channels
from ..lidarfilter import FilterSpec, apply_filter
from ..metrics import ErrorAccumulator, EvalResult, LossConfig, si_loss_tensor
from ..tensorcore import Adam, AdamConfig, Tape
from .config import Mode, TrainConfig, TrainSchedule
from .model import AdaptiveDepthModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Instance:
    """One training pair: a sample index and the filter applied to it."""

    sample: int
    task: int


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    epoch_losses: list[tuple[int, int, float]] = field(default_factory=list)  # (stage, epoch, loss)
    step_losses: list[tuple[int, int, float]] = field(default_factory=list)  # (stage, step, loss)

    @property
    def stage2_steps(self) -> int:
        return sum(1 for s, _, _ in self.step_losses if s == 2)


def stage2_instances(n_samples: int, tasks: Sequence) -> list[Instance]:
    """Every sample once per task, so all tasks get equal weight and count."""
    return [Instance(s, t) for s in range(n_samples) for t in range(len(tasks))]


def filtered_depth(sample: Sample, spec: FilterSpec, lidar: LidarSpec = LidarSpec(), channels: ChannelMap | None = None) -> DepthImage:
    if channels is None:
        channels = label_channels(sample.sparse_depth, sample.intrinsics, lidar)
    return apply_filter(sample.sparse_depth, channels, spec)


class _Dataset:
    """Per-task filtered inputs precomputed as (N, C, H, W) arrays."""

    def __init__(self, samples: Sequence[Sample], tasks: Sequence, lidar: LidarSpec):
        if not samples:
            raise EmptyEvaluationError("training set is empty")
        self.samples = list(samples)
        self.tasks = list(tasks)
        self.rgb = np.stack([s.rgb.values.transpose(2, 0, 1) for s in samples])
        self.gt = np.stack([s.gt_depth.values[None] for s in samples])
        self.depth = []
        for s in samples:
            cm = label_channels(s.sparse_depth, s.intrinsics, lidar)
            self.depth.append([apply_filter(s.sparse_depth, cm, t) for t in self.tasks])

    def batch(self, items: Sequence[Instance], aug_cfg=None, aug_seed: int = 0):
        rgb, depth, gt = [], [], []
        for j, inst in enumerate(items):
            s = self.samples[inst.sample]
            if aug_cfg is None:
                rgb.append(self.rgb[inst.sample])
                gt.append(self.gt[inst.sample])
                depth.append(self.depth[inst.sample][inst.task].values[None] if self.tasks else None)
            else:
                sparse = self.depth[inst.sample][inst.task] if self.tasks else s.sparse_depth
                a = augment(replace(s, sparse_depth=sparse), aug_cfg, aug_seed * 100003 + j)
                rgb.append(a.rgb.values.transpose(2, 0, 1))
                gt.append(a.gt_depth.values[None])
                depth.append(a.sparse_depth.values[None])
        depth_arr = None if depth[0] is None else np.stack(depth)
        return np.stack(rgb), depth_arr, np.stack(gt)


def _run_stage(
    model: AdaptiveDepthModel,
    data: _Dataset,
    instances: list[Instance],
    params: list,
    epochs: int,
    stage: int,
    schedule: TrainSchedule,
    loss_cfg: LossConfig,
    opt_cfg: AdamConfig,
    rng: np.random.Generator,
    result: TrainResult,
    on_step: Callable | None,
):
    opt = Adam(params, opt_cfg)
    use_depth = stage == 2
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(instances))
        losses = []
        for start in range(0, len(order), schedule.batch_size):
            items = [instances[k] for k in order[start : start + schedule.batch_size]]
            aug_seed = int(rng.integers(2**31)) if schedule.augment is not None else 0
            rgb, depth, gt = data.batch(items, schedule.augment, aug_seed)
            opt.zero_grad()
            with Tape() as tape:
                loss = si_loss_tensor(model.forward(rgb, depth if use_depth else None, use_depth=use_depth), gt, loss_cfg)
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceError(f"stage {stage}: non-finite loss", step=step)
                tape.backward(loss)
            try:
                opt.step()
            except DivergenceError as exc:
                raise DivergenceError(f"stage {stage}: non-finite gradient", step=step) from exc
            losses.append(value)
            result.step_losses.append((stage, step, value))
            if on_step is not None:
                on_step(stage, step, value)
            step += 1
        mean_loss = float(np.mean(losses))
        result.epoch_losses.append((stage, epoch, mean_loss))
        log.info("stage %d epoch %d loss %.5f", stage, epoch, mean_loss)


def train(
    samples: Sequence[Sample],
    schedule: TrainSchedule,
    model: AdaptiveDepthModel,
    seed: int = 0,
    loss_cfg: LossConfig = LossConfig(),
    opt_cfg: AdamConfig = AdamConfig(),
    lidar: LidarSpec = LidarSpec(),
    on_step: Callable | None = None,
) -> TrainResult:
    """Stage 1 fits the RGB-only path; stage 2 trains depth fusion on all tasks.

    ``model`` is updated in place; the returned params are a copy.
    """
    rng = np.random.default_rng(seed)
    data = _Dataset(samples, schedule.tasks, lidar)
    result = TrainResult(params={})

    stage1 = model.group("rgb") + model.group("decoder")
    _run_stage(
        model, data, [Instance(i, 0) for i in range(len(samples))], stage1,
        schedule.stage1_epochs, 1, schedule, loss_cfg, opt_cfg, rng, result, on_step,
    )

    if model.cfg.mode is Mode.RGB_ONLY:
        stage2 = model.group("decoder")
    else:
        adaptive = "sensor" if model.cfg.mode is Mode.ADAPTIVE else "fusion"
        stage2 = model.group("decoder") + model.group("depth") + model.group(adaptive)
    if not schedule.freeze_rgb_encoder_in_stage2:
        stage2 = model.group("rgb") + stage2
    _run_stage(
        model, data, stage2_instances(len(samples), schedule.tasks), stage2,
        schedule.stage2_epochs, 2, schedule, loss_cfg, opt_cfg, rng, result, on_step,
    )
    result.params = model.state_dict()
    return result


def train_from_config(samples: Sequence[Sample], cfg: TrainConfig, on_step=None):
    model = AdaptiveDepthModel(cfg.model, cfg.encoder, seed=cfg.seed)
    result = train(samples, cfg.schedule, model, cfg.seed, cfg.loss, cfg.optimizer, cfg.lidar, on_step)
    return model, result


def dataset_loss(
    model: AdaptiveDepthModel,
    samples: Sequence[Sample],
    tasks: Sequence,
    loss_cfg: LossConfig = LossConfig(),
    lidar: LidarSpec = LidarSpec(),
    batch_size: int = 8,
) -> float:
    """Mean stage-2 training loss over every (sample, task) pair."""
    data = _Dataset(samples, tasks, lidar)
    instances = stage2_instances(len(samples), tasks)
    total = 0.0
    with tc.no_grad():
        for start in range(0, len(instances), batch_size):
            items = instances[start : start + batch_size]
            rgb, depth, gt = data.batch(items)
            total += si_loss_tensor(model.forward(rgb, depth), gt, loss_cfg).item() * len(items)
    return total / len(instances)


def infer_and_eval(
    samples: Sequence[Sample],
    filter_spec: FilterSpec,
    model: AdaptiveDepthModel | None,
    params: dict[str, np.ndarray] | None = None,
    lidar: LidarSpec = LidarSpec(),
    predictor: Callable | None = None,
    batch_size: int = 8,
) -> EvalResult:
    """Filter each sample's sparse depth, predict, and pool metrics over the set.

    ``predictor(sample, filtered_depth) -> DepthImage`` bypasses the model,
    e.g. to check the harness with ground truth as prediction.
    """
    if params is not None:
        model.load_state_dict(params)
    acc = ErrorAccumulator()
    samples = list(samples)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        depth = [filtered_depth(s, filter_spec, lidar) for s in chunk]
        if predictor is not None:
            preds = [predictor(s, d).values for s, d in zip(chunk, depth)]
        else:
            rgb = np.stack([s.rgb.values.transpose(2, 0, 1) for s in chunk])
            dep = np.stack([d.values[None] for d in depth])
            preds = list(model.predict_batch(rgb, dep)[:, 0])
        for s, p in zip(chunk, preds):
            acc.add(p, s.gt_depth)
    return acc.result()
