"""Sensor emulation by dropping scan lines, and the binary sensor mask."""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

import numpy as np

from .depthio import DepthImage
from .errors import ConfigError, PresetError, ShapeError
from .geometry import ChannelMap


@dataclass(frozen=True)
class Identity:
    def keep(self, labels: np.ndarray) -> np.ndarray:
        return labels >= 0

    def __str__(self):
        return "id"


@dataclass(frozen=True)
class SparseChannel:
    """Keep channels with ``c mod n == 0``."""

    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ConfigError(f"sparse-channel step must be a positive integer, got {self.n}")

    def keep(self, labels: np.ndarray) -> np.ndarray:
        return (labels >= 0) & (labels % self.n == 0)

    def __str__(self):
        return f"sparse:{self.n}"


@dataclass(frozen=True)
class Fov:
    """Keep the contiguous channel interval ``[c_begin, c_end]``."""

    c_begin: int
    c_end: int

    def __post_init__(self):
        if not 0 <= self.c_begin <= self.c_end:
            raise ConfigError(f"invalid FOV interval [{self.c_begin}, {self.c_end}]")

    def validate(self, n_channels: int = 64) -> None:
        if self.c_end > n_channels - 1:
            raise ConfigError(f"FOV end channel {self.c_end} exceeds {n_channels - 1}")

    def keep(self, labels: np.ndarray) -> np.ndarray:
        return (labels >= self.c_begin) & (labels <= self.c_end)

    def __str__(self):
        return f"fov:{self.c_begin}-{self.c_end}"


FilterSpec = Union[Identity, SparseChannel, Fov]

# Number of retained channels -> (first, last) channel for the FOV filter.
FOV_PRESETS = {
    64: (0, 63),
    56: (7, 63),
    48: (7, 55),
    32: (17, 48),
    24: (25, 48),
    16: (33, 48),
    8: (33, 40),
}


def fov_preset(num_channels: int) -> Fov:
    try:
        begin, end = FOV_PRESETS[num_channels]
    except KeyError:
        raise PresetError(
            f"no FOV preset for {num_channels} channels; known: {sorted(FOV_PRESETS, reverse=True)}"
        ) from None
    return Fov(begin, end)


_SPEC_RE = re.compile(r"^(id|sparse:(\d+)|fov:(\d+)-(\d+)|fovpreset:(\d+))$")


def parse_filter_spec(text: str) -> FilterSpec:
    """Parse ``id``, ``sparse:<n>``, ``fov:<begin>-<end>`` or ``fovpreset:<k>``."""
    m = _SPEC_RE.match(text.strip())
    if not m:
        raise ConfigError(f"cannot parse filter spec {text!r}")
    if m.group(1) == "id":
        return Identity()
    if m.group(2) is not None:
        return SparseChannel(int(m.group(2)))
    if m.group(3) is not None:
        return Fov(int(m.group(3)), int(m.group(4)))
    return fov_preset(int(m.group(5)))


def apply_filter(d: DepthImage, cm: ChannelMap, spec: FilterSpec) -> DepthImage:
    if d.shape != cm.shape:
        raise ShapeError(f"depth {d.shape} and channel map {cm.shape} differ in size")
    if isinstance(spec, Identity):
        return d
    if isinstance(spec, Fov):
        spec.validate()
    keep = spec.keep(cm.labels) & d.valid
    return DepthImage(np.where(keep, d.values, 0.0))


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ShapeError(f"mask must be 2D, got shape {bits.shape}")
        if not np.all((bits == 0) | (bits == 1)):
            raise ShapeError("mask bits must be 0 or 1")
        bits = bits.astype(np.uint8, copy=True)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def shape(self):
        return self.bits.shape

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return bool(np.array_equal(self.bits, other.bits))


def binary_mask(d: DepthImage) -> BinaryMask:
    return BinaryMask((d.values > 0).astype(np.uint8))


def density(m: BinaryMask) -> float:
    return int(m.bits.sum()) / m.bits.size
