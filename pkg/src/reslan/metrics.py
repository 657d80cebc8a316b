"""KITTI depth-completion metrics and the scale-invariant log loss.

Depths are meters internally; RMSE/MAE are reported in millimeters and the
inverse-depth errors in 1/km. All reductions add left to right so results
are reproducible and match a plain per-pixel loop bit for bit.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .depthio import DepthImage
from .errors import ConfigError, DomainError, EmptyEvaluationError, InvalidPredictionError, ShapeError

DELTA_THRESHOLD = 1.25


@dataclass(frozen=True)
class EvalResult:
    rmse: float  # mm
    mae: float  # mm
    irmse: float  # 1/km
    imae: float  # 1/km
    delta_125: float
    n_valid: int

    def to_json_dict(self) -> dict:
        return {
            "rmse_mm": self.rmse,
            "mae_mm": self.mae,
            "irmse_km": self.irmse,
            "imae_km": self.imae,
            "delta_125": self.delta_125,
            "n_valid": self.n_valid,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json_dict(cls, doc: dict) -> "EvalResult":
        return cls(
            rmse=doc["rmse_mm"],
            mae=doc["mae_mm"],
            irmse=doc["irmse_km"],
            imae=doc["imae_km"],
            delta_125=doc["delta_125"],
            n_valid=int(doc["n_valid"]),
        )


def _seq_sum(x: np.ndarray) -> float:
    """Left-to-right sum (np.sum is pairwise and would not match a loop)."""
    if x.size == 0:
        return 0.0
    return float(np.cumsum(x)[-1])


def _as_array(img) -> np.ndarray:
    return img.values if isinstance(img, DepthImage) else np.asarray(img, dtype=np.float64)


class ErrorAccumulator:
    """Pixel-weighted pooling of error sums across several images."""

    def __init__(self):
        self.sq = 0.0
        self.abs = 0.0
        self.inv_sq = 0.0
        self.inv_abs = 0.0
        self.n_delta = 0
        self.n = 0

    def add(self, pred, gt) -> None:
        p = _as_array(pred)
        g = _as_array(gt)
        if p.shape != g.shape:
            raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ in size")
        valid = g > 0
        p = p[valid]
        g = g[valid]
        if np.any(~(p > 0)):
            raise InvalidPredictionError("prediction must be positive wherever ground truth is valid")
        err = p - g
        inv_err = 1.0 / p - 1.0 / g
        ratio = np.maximum(p / g, g / p)
        self.sq += _seq_sum(err * err)
        self.abs += _seq_sum(np.abs(err))
        self.inv_sq += _seq_sum(inv_err * inv_err)
        self.inv_abs += _seq_sum(np.abs(inv_err))
        self.n_delta += int(np.count_nonzero(ratio < DELTA_THRESHOLD))
        self.n += int(valid.sum())

    def result(self) -> EvalResult:
        if self.n == 0:
            raise EmptyEvaluationError("no valid ground-truth pixel to evaluate")
        n = self.n
        return EvalResult(
            rmse=math.sqrt(self.sq / n) * 1000.0,
            mae=self.abs / n * 1000.0,
            irmse=math.sqrt(self.inv_sq / n) * 1000.0,
            imae=self.inv_abs / n * 1000.0,
            delta_125=self.n_delta / n,
            n_valid=n,
        )


def evaluate(pred, gt) -> EvalResult:
    acc = ErrorAccumulator()
    acc.add(pred, gt)
    return acc.result()


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")


def si_loss(pred, gt, cfg: LossConfig = LossConfig()) -> float:
    """``mean(g^2) - lam * mean(g)^2`` with ``g = ln(pred) - ln(gt)`` over valid gt."""
    p = _as_array(pred)
    g_ = _as_array(gt)
    if p.shape != g_.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g_.shape} differ in size")
    valid = g_ > 0
    n = int(valid.sum())
    if n == 0:
        raise EmptyEvaluationError("no valid ground-truth pixel")
    p = p[valid]
    if np.any(~(p > 0)):
        raise DomainError("si_loss needs positive predictions at valid pixels")
    g = np.log(p) - np.log(g_[valid])
    return _seq_sum(g * g) / n - cfg.lam * (_seq_sum(g) / n) ** 2


def si_loss_grad(pred, gt, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Analytic gradient of :func:`si_loss` with respect to ``pred``."""
    p = _as_array(pred)
    g_ = _as_array(gt)
    valid = g_ > 0
    n = int(valid.sum())
    if n == 0:
        raise EmptyEvaluationError("no valid ground-truth pixel")
    out = np.zeros_like(p)
    g = np.log(p[valid]) - np.log(g_[valid])
    out[valid] = (2.0 * g / n - 2.0 * cfg.lam * g.sum() / n**2) / p[valid]
    return out


def si_loss_tensor(log_pred, gt: np.ndarray, cfg: LossConfig = LossConfig()):
    """Differentiable batch loss on a log-depth Tensor.

    ``log_pred`` has shape (N, 1, H, W); ``gt`` the matching array with 0 for
    invalid pixels. The loss is computed per image and averaged over the batch.
    """
    from . import tensorcore as tc

    gt = np.asarray(gt, dtype=np.float64)
    valid = (gt > 0).astype(np.float64)
    counts = valid.reshape(len(gt), -1).sum(axis=1)
    if np.any(counts == 0):
        raise EmptyEvaluationError("an image in the batch has no valid ground truth")
    log_gt = np.log(np.where(gt > 0, gt, 1.0))
    g = tc.mul(tc.sub(log_pred, tc.constant(log_gt)), tc.constant(valid))
    per_image_sq = tc.sum(tc.mul(g, g), axis=(1, 2, 3))
    per_image = tc.sum(g, axis=(1, 2, 3))
    inv_n = tc.constant(1.0 / counts)
    mean_sq = tc.mul(per_image_sq, inv_n)
    mean = tc.mul(per_image, inv_n)
    loss = tc.sub(mean_sq, tc.mul(tc.constant(cfg.lam), tc.mul(mean, mean)))
    return tc.mean(loss)
