"""Depth-map and calibration I/O, resizing and training-time augmentation.

Depth maps use the KITTI 16-bit convention: ``stored / 256 = meters`` and
``0`` means no measurement.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, replace
from pathlib import Path

import cv2
import numpy as np
from PIL import Image, UnidentifiedImageError

from ._atomic import atomic_write_bytes, atomic_write_text
from .errors import (
    DecodeError,
    DepthRangeError,
    FormatError,
    ShapeError,
    UnsupportedError,
)

DEPTH_SCALE = 256.0
# Largest depth the 16-bit wire format can hold.
MAX_DEPTH = 65535 / DEPTH_SCALE
# Anything below this rounds to the "no measurement" code.
MIN_ENCODABLE_DEPTH = 0.5 / DEPTH_SCALE


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Metric depth grid of shape (height, width); 0.0 marks a missing value."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] == 0 or v.shape[1] == 0:
            raise ShapeError(f"depth image must be a non-empty 2D grid, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DepthRangeError("depth values must be finite")
        if np.any(v < 0) or np.any(v > MAX_DEPTH):
            raise DepthRangeError(f"depth values must lie in [0, {MAX_DEPTH}] m")
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def empty(cls, width: int, height: int) -> "DepthImage":
        return cls(np.zeros((height, width)))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def valid(self) -> np.ndarray:
        return self.values > 0

    def __eq__(self, other):
        if not isinstance(other, DepthImage):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.values, other.values))


@dataclass(frozen=True, eq=False)
class RgbImage:
    """Color image of shape (height, width, 3) with components in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 3 or v.shape[0] == 0 or v.shape[1] == 0:
            raise ShapeError(f"rgb image must have shape (H, W, 3), got {v.shape}")
        if not np.all((v >= 0) & (v <= 1)):
            raise FormatError("rgb components must lie in [0, 1]")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other):
        if not isinstance(other, RgbImage):
            return NotImplemented
        return bool(np.array_equal(self.values, other.values))


@dataclass(frozen=True)
class PixelAffine:
    """Per-axis pixel-coordinate map ``x' = ax*x + bx``, ``y' = ay*y + by``."""

    ax: float = 1.0
    bx: float = 0.0
    ay: float = 1.0
    by: float = 0.0

    def then(self, other: "PixelAffine") -> "PixelAffine":
        """Apply ``self`` first, then ``other``."""
        return PixelAffine(
            ax=other.ax * self.ax,
            bx=other.ax * self.bx + other.bx,
            ay=other.ay * self.ay,
            by=other.ay * self.by + other.by,
        )


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels. Skew is always zero."""

    fx: float
    fy: float
    u0: float
    v0: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise FormatError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not all(math.isfinite(v) for v in (self.fx, self.fy, self.u0, self.v0)):
            raise FormatError("intrinsics must be finite")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.u0], [0.0, self.fy, self.v0], [0.0, 0.0, 1.0]])

    def transformed(self, aff: PixelAffine) -> "CameraIntrinsics":
        # Mirroring flips the world axis along with the pixel axis, so focal
        # lengths pick up only the magnitude of the scale.
        return CameraIntrinsics(
            fx=self.fx * abs(aff.ax),
            fy=self.fy * abs(aff.ay),
            u0=aff.ax * self.u0 + aff.bx,
            v0=aff.ay * self.v0 + aff.by,
        )

    def scaled(self, sx: float, sy: float) -> "CameraIntrinsics":
        return self.transformed(resize_affine(sx, sy))

    def flipped(self, width: int) -> "CameraIntrinsics":
        return self.transformed(flip_affine(width))

    def cropped(self, left: int, top: int) -> "CameraIntrinsics":
        return self.transformed(crop_affine(left, top))


def resize_affine(sx: float, sy: float) -> PixelAffine:
    return PixelAffine(ax=sx, ay=sy)


def flip_affine(width: int) -> PixelAffine:
    return PixelAffine(ax=-1.0, bx=width - 1.0)


def crop_affine(left: int, top: int) -> PixelAffine:
    return PixelAffine(bx=-float(left), by=-float(top))


@dataclass(frozen=True)
class Sample:
    id: str
    rgb: RgbImage
    sparse_depth: DepthImage
    gt_depth: DepthImage
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        shapes = {(self.rgb.height, self.rgb.width), self.sparse_depth.shape, self.gt_depth.shape}
        if len(shapes) != 1:
            raise ShapeError(f"sample {self.id!r}: image sizes disagree: {sorted(shapes)}")

    @property
    def width(self) -> int:
        return self.rgb.width

    @property
    def height(self) -> int:
        return self.rgb.height


# --------------------------------------------------------------------------
# 16-bit depth codec


def depth_to_counts(d: DepthImage) -> np.ndarray:
    """Quantize meters to 16-bit counts, rejecting values that would vanish."""
    v = d.values
    counts = np.floor(v * DEPTH_SCALE + 0.5)
    lost = (v > 0) & (counts == 0)
    if np.any(lost):
        raise DepthRangeError(
            f"{int(lost.sum())} depth value(s) below {MIN_ENCODABLE_DEPTH} m would encode as 'no measurement'"
        )
    if np.any(counts > 65535):
        raise DepthRangeError(f"depth exceeds the 16-bit range ({MAX_DEPTH} m)")
    return counts.astype(np.uint16)


def encode_depth(d: DepthImage) -> bytes:
    """Encode a depth image as a 16-bit grayscale PNG."""
    buf = io.BytesIO()
    Image.fromarray(depth_to_counts(d)).save(buf, format="PNG")
    return buf.getvalue()


def _open_image(data: bytes) -> Image.Image:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode image: {exc}") from exc
    return img


def decode_depth(data: bytes) -> DepthImage:
    """Decode a 16-bit grayscale PNG into meters (count / 256)."""
    img = _open_image(data)
    if img.mode not in ("I;16", "I;16B", "I;16L"):
        raise FormatError(f"expected a 16-bit single-channel image, got mode {img.mode!r}")
    counts = np.asarray(img, dtype=np.uint16)
    return DepthImage(counts.astype(np.float64) / DEPTH_SCALE)


def read_depth(path) -> DepthImage:
    return decode_depth(Path(path).read_bytes())


def write_depth(path, d: DepthImage) -> None:
    atomic_write_bytes(path, encode_depth(d))


def encode_rgb(img: RgbImage) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.round(img.values * 255.0).astype(np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def decode_rgb(data: bytes) -> RgbImage:
    img = _open_image(data)
    if img.mode not in ("RGB", "RGBA", "L"):
        raise FormatError(f"unsupported rgb image mode {img.mode!r}")
    return RgbImage(np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0)


def encode_gray8(values: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(values, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def encode_gray16(values: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(values, dtype=np.uint16)).save(buf, format="PNG")
    return buf.getvalue()


def decode_gray16(data: bytes) -> np.ndarray:
    img = _open_image(data)
    if img.mode not in ("I;16", "I;16B", "I;16L"):
        raise FormatError(f"expected a 16-bit single-channel image, got mode {img.mode!r}")
    return np.asarray(img, dtype=np.uint16).copy()


# --------------------------------------------------------------------------
# Calibration

_CALIB_KEYS = ("fx", "fy", "cx", "cy")


def parse_calib(text: str) -> CameraIntrinsics:
    """Parse ``key value`` lines with keys fx, fy, cx, cy (pixels)."""
    found = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(":", " ").split()
        if len(parts) != 2:
            raise FormatError(f"calibration line {lineno}: expected 'key value', got {line!r}")
        key, value = parts
        if key not in _CALIB_KEYS:
            raise FormatError(f"calibration line {lineno}: unknown key {key!r}")
        try:
            found[key] = float(value)
        except ValueError as exc:
            raise FormatError(f"calibration line {lineno}: bad number {value!r}") from exc
    missing = [k for k in _CALIB_KEYS if k not in found]
    if missing:
        raise FormatError(f"calibration is missing keys: {', '.join(missing)}")
    return CameraIntrinsics(fx=found["fx"], fy=found["fy"], u0=found["cx"], v0=found["cy"])


def format_calib(k: CameraIntrinsics) -> str:
    return f"fx {k.fx!r}\nfy {k.fy!r}\ncx {k.u0!r}\ncy {k.v0!r}\n"


def read_calib(path) -> CameraIntrinsics:
    return parse_calib(Path(path).read_text())


def write_calib(path, k: CameraIntrinsics) -> None:
    atomic_write_text(path, format_calib(k))


# --------------------------------------------------------------------------
# Samples on disk: <root>/<id>/{rgb.png, sparse.png, gt.png, calib.txt}

SAMPLE_FILES = ("rgb.png", "sparse.png", "gt.png", "calib.txt")


def load_sample(directory) -> Sample:
    directory = Path(directory)
    missing = [f for f in SAMPLE_FILES if not (directory / f).is_file()]
    if missing:
        raise FormatError(f"{directory}: missing {', '.join(missing)}")
    return Sample(
        id=directory.name,
        rgb=decode_rgb((directory / "rgb.png").read_bytes()),
        sparse_depth=read_depth(directory / "sparse.png"),
        gt_depth=read_depth(directory / "gt.png"),
        intrinsics=read_calib(directory / "calib.txt"),
    )


def save_sample(sample: Sample, root) -> Path:
    directory = Path(root) / sample.id
    atomic_write_bytes(directory / "rgb.png", encode_rgb(sample.rgb))
    write_depth(directory / "sparse.png", sample.sparse_depth)
    write_depth(directory / "gt.png", sample.gt_depth)
    write_calib(directory / "calib.txt", sample.intrinsics)
    return directory


def list_sample_dirs(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"{root} is not a directory")
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "sparse.png").is_file())


def load_samples(root) -> list[Sample]:
    dirs = list_sample_dirs(root)
    if not dirs:
        raise FormatError(f"no samples found under {root}")
    return [load_sample(d) for d in dirs]


# --------------------------------------------------------------------------
# Resizing


def resize_sparse_depth(d: DepthImage, target_w: int, target_h: int) -> DepthImage:
    """Downsample without interpolation.

    Every target pixel owns a block of source pixels; it takes the valid
    source pixel closest to the block center, preferring the smaller depth
    on ties. Blocks without valid pixels stay empty.
    """
    h, w = d.shape
    out = np.zeros((target_h, target_w))
    ys, xs = np.nonzero(d.values)
    if len(ys) == 0:
        return DepthImage(out)
    sx = target_w / w
    sy = target_h / h
    tx = np.minimum(np.floor((xs + 0.5) * sx).astype(np.int64), target_w - 1)
    ty = np.minimum(np.floor((ys + 0.5) * sy).astype(np.int64), target_h - 1)
    cx = (tx + 0.5) / sx - 0.5
    cy = (ty + 0.5) / sy - 0.5
    dist = (xs - cx) ** 2 + (ys - cy) ** 2
    depth = d.values[ys, xs]
    cell = ty * target_w + tx
    order = np.lexsort((depth, dist, cell))
    cell_sorted = cell[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = cell_sorted[1:] != cell_sorted[:-1]
    chosen = order[first]
    out[ty[chosen], tx[chosen]] = depth[chosen]
    return DepthImage(out)


def resize_sample(s: Sample, target_w: int, target_h: int) -> Sample:
    w, h = s.width, s.height
    if target_w > w or target_h > h:
        raise UnsupportedError(f"upscaling {w}x{h} -> {target_w}x{target_h} is not supported")
    if target_w <= 0 or target_h <= 0:
        raise ShapeError("target size must be positive")
    if (target_w, target_h) == (w, h):
        return s
    rgb = cv2.resize(s.rgb.values, (target_w, target_h), interpolation=cv2.INTER_AREA)
    return Sample(
        id=s.id,
        rgb=RgbImage(np.clip(rgb, 0.0, 1.0)),
        sparse_depth=resize_sparse_depth(s.sparse_depth, target_w, target_h),
        gt_depth=resize_sparse_depth(s.gt_depth, target_w, target_h),
        intrinsics=s.intrinsics.scaled(target_w / w, target_h / h),
    )


# --------------------------------------------------------------------------
# Augmentation


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    crop_size: tuple[int, int] | None = None  # (width, height)
    jitter: bool = True
    brightness: tuple[float, float] = (0.8, 1.2)
    contrast: tuple[float, float] = (0.8, 1.2)
    saturation: tuple[float, float] = (0.8, 1.2)


def color_jitter(rgb: np.ndarray, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    out = rgb * brightness
    mean = out.mean()
    out = (out - mean) * contrast + mean
    gray = out @ np.array([0.299, 0.587, 0.114])
    out = gray[..., None] + (out - gray[..., None]) * saturation
    return np.clip(out, 0.0, 1.0)


def flip_sample(s: Sample) -> Sample:
    return Sample(
        id=s.id,
        rgb=RgbImage(s.rgb.values[:, ::-1]),
        sparse_depth=DepthImage(s.sparse_depth.values[:, ::-1]),
        gt_depth=DepthImage(s.gt_depth.values[:, ::-1]),
        intrinsics=s.intrinsics.flipped(s.width),
    )


def crop_sample(s: Sample, left: int, top: int, width: int, height: int) -> Sample:
    if left < 0 or top < 0 or left + width > s.width or top + height > s.height:
        raise ShapeError("crop window exceeds the image")
    rows = slice(top, top + height)
    cols = slice(left, left + width)
    return Sample(
        id=s.id,
        rgb=RgbImage(s.rgb.values[rows, cols]),
        sparse_depth=DepthImage(s.sparse_depth.values[rows, cols]),
        gt_depth=DepthImage(s.gt_depth.values[rows, cols]),
        intrinsics=s.intrinsics.cropped(left, top),
    )


def augment(s: Sample, cfg: AugmentConfig, rng_seed: int) -> Sample:
    """Color jitter, random crop and horizontal flip; deterministic per seed."""
    rng = np.random.default_rng(rng_seed)
    # Draw every variate up front so the stream does not depend on cfg.
    b, c, sat = (rng.uniform(*r) for r in (cfg.brightness, cfg.contrast, cfg.saturation))
    u_left, u_top, u_flip = rng.random(3)

    out = s
    if cfg.jitter:
        out = replace(out, rgb=RgbImage(color_jitter(out.rgb.values, b, c, sat)))
    if cfg.crop_size is not None:
        cw, ch = cfg.crop_size
        if cw > s.width or ch > s.height:
            raise ShapeError(f"crop {cw}x{ch} larger than image {s.width}x{s.height}")
        left = int(u_left * (s.width - cw + 1))
        top = int(u_top * (s.height - ch + 1))
        out = crop_sample(out, left, top, cw, ch)
    if u_flip < cfg.flip_prob:
        out = flip_sample(out)
    return out
