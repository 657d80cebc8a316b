"""Back-projection of depth pixels and scan-line (channel) recovery.

Camera frame: X right, Y down, Z forward. Elevation is positive above the
horizon, so a point with Y > 0 gets a negative elevation and the lowest
beam is channel 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .depthio import CameraIntrinsics, DepthImage, decode_gray16, encode_gray16
from .errors import ConfigError, FormatError, InvalidMeasurementError, ShapeError


@dataclass(frozen=True)
class LidarSpec:
    """Vertical layout of a multi-beam LiDAR (defaults: Velodyne HDL-64E)."""

    theta_min: float = -24.9
    theta_max: float = 2.0
    n_channels: int = 64
    epsilon: float = 1e-5

    def __post_init__(self):
        if not self.theta_min < self.theta_max:
            raise ConfigError("theta_min must be below theta_max")
        if self.n_channels < 1:
            raise ConfigError("n_channels must be at least 1")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")

    def beam_elevations(self) -> np.ndarray:
        """Evenly spaced beam elevations (degrees), both endpoints attained."""
        if self.n_channels == 1:
            return np.array([self.theta_min])
        return np.linspace(self.theta_min, self.theta_max, self.n_channels)


@dataclass(frozen=True)
class Point3D:
    X: float
    Y: float
    Z: float
    d: float
    theta: float


def reproject_pixel(x: float, y: float, Z: float, k: CameraIntrinsics, spec: LidarSpec = LidarSpec()) -> Point3D:
    if not Z > 0:
        raise InvalidMeasurementError(f"depth must be positive, got {Z}")
    X = Z * (x - k.u0) / k.fx
    Y = Z * (y - k.v0) / k.fy
    d = math.sqrt(X * X + Y * Y + Z * Z)
    theta = -math.degrees(math.asin(Y / (d + spec.epsilon)))
    return Point3D(X=X, Y=Y, Z=Z, d=d, theta=theta)


def reproject_image(depth: DepthImage, k: CameraIntrinsics, spec: LidarSpec = LidarSpec()):
    """Vectorised back-projection of every pixel.

    Returns ``(X, Y, Z, theta)`` arrays of the image shape. Pixels without a
    measurement come out with ``theta == 0`` thanks to the epsilon guard and
    are meant to be discarded by the caller.
    """
    h, w = depth.shape
    Z = depth.values
    xs = np.arange(w, dtype=np.float64)[None, :]
    ys = np.arange(h, dtype=np.float64)[:, None]
    X = Z * (xs - k.u0) / k.fx
    Y = Z * (ys - k.v0) / k.fy
    d = np.sqrt(X * X + Y * Y + Z * Z)
    theta = -np.degrees(np.arcsin(Y / (d + spec.epsilon)))
    return X, Y, Z, theta


def channel_raw(theta, spec: LidarSpec = LidarSpec()):
    """Continuous classifier argument before rounding."""
    scale = (spec.n_channels - 0.01) / (spec.theta_max - spec.theta_min)
    return (np.asarray(theta, dtype=np.float64) - spec.theta_min) * scale - 0.5


def channel_of(theta, spec: LidarSpec = LidarSpec()):
    """Channel index of an elevation angle in degrees.

    Rounds half up, so ``round(raw)`` equals ``floor(raw + 0.5)``, then clamps
    to the valid channel range. Accepts scalars or arrays.
    """
    c = np.floor(channel_raw(theta, spec) + 0.5)
    c = np.clip(c, 0, spec.n_channels - 1).astype(np.int64)
    return int(c) if c.ndim == 0 else c


@dataclass(frozen=True, eq=False)
class ChannelMap:
    """Per-pixel channel label; -1 where there is no measurement."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ShapeError(f"channel map must be 2D, got shape {lab.shape}")
        lab = lab.astype(np.int64, copy=True)
        if np.any(lab < -1):
            raise ShapeError("channel labels must be >= -1")
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def shape(self):
        return self.labels.shape

    @property
    def present(self) -> np.ndarray:
        return self.labels >= 0

    def distinct(self) -> set[int]:
        return set(np.unique(self.labels[self.present]).tolist())

    def __eq__(self, other):
        if not isinstance(other, ChannelMap):
            return NotImplemented
        return bool(np.array_equal(self.labels, other.labels))


def label_channels(d: DepthImage, k: CameraIntrinsics, spec: LidarSpec = LidarSpec()) -> ChannelMap:
    _, _, _, theta = reproject_image(d, k, spec)
    labels = np.where(d.valid, channel_of(theta, spec), -1)
    return ChannelMap(labels)


def encode_channel_map(cm: ChannelMap) -> bytes:
    """16-bit PNG with value channel + 1; 0 means unlabeled."""
    return encode_gray16(cm.labels + 1)


def decode_channel_map(data: bytes) -> ChannelMap:
    values = decode_gray16(data)
    if values.ndim != 2:
        raise FormatError("channel map image must be single-channel")
    return ChannelMap(values.astype(np.int64) - 1)
