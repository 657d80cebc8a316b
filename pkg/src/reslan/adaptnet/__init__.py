"""Sensor-adaptive depth completion: model, training and evaluation."""
from .config import (
    Mode,
    ModelConfig,
    SensorEncoderConfig,
    TrainConfig,
    TrainSchedule,
    config_from_dict,
    config_to_dict,
    load_config,
)
from .model import AdaptiveDepthModel, FusionWeights, fuse, mask_batch
from .train import (
    Instance,
    TrainResult,
    dataset_loss,
    filtered_depth,
    infer_and_eval,
    stage2_instances,
    train,
    train_from_config,
)
from .experiment import ComparisonConfig, ComparisonResult, compare_fusion
