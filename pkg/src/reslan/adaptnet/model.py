"""Depth-completion network with sensor-adaptive skip fusion.

Three branches: an RGB encoder-decoder with residual blocks, a sparse depth
encoder built from sparsity-normalised convolutions, and a sensor encoder
that turns the binary validity mask of the depth input into per-level fusion
weights. At every skip level the features are combined as
``w * f_rgb + f_lidar + b``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import tensorcore as tc
from ..depthio import MAX_DEPTH, DepthImage, RgbImage
from ..errors import NumericError, ShapeError
from ..lidarfilter import BinaryMask
from ..tensorcore import Tensor
from .config import Mode, ModelConfig, SensorEncoderConfig

GROUPS = ("rgb", "depth", "sensor", "fusion", "decoder")


@dataclass
class FusionWeights:
    """Per-level multipliers ``w[i]`` and offsets ``b[i]``.

    Each entry has shape (C_i,) for constants or (N, C_i) when produced per
    sample by the sensor encoder.
    """

    w: list
    b: list

    def lengths(self) -> list[int]:
        return [t.shape[-1] for t in self.w]


def _kaiming(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class AdaptiveDepthModel:
    """Parameters plus the forward pass; configuration is immutable."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), enc: SensorEncoderConfig = SensorEncoderConfig(), seed: int = 0):
        self.cfg = cfg
        self.enc = enc
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # ------------------------------------------------------------------
    # parameters

    def _conv(self, rng, name, c_out, c_in, k):
        self.params[f"{name}.w"] = tc.parameter(_kaiming(rng, (c_out, c_in, k, k), c_in * k * k), f"{name}.w")
        self.params[f"{name}.b"] = tc.parameter(np.zeros(c_out), f"{name}.b")

    def _init_params(self, rng):
        ch = self.cfg.channels
        # RGB encoder
        c_prev = 3
        for i, c in enumerate(ch):
            self._conv(rng, f"rgb.{i}.in", c, c_prev, 3)
            self._conv(rng, f"rgb.{i}.res_a", c, c, 3)
            self._conv(rng, f"rgb.{i}.res_b", c, c, 3)
            c_prev = c
        # sparse depth encoder
        self._conv(rng, "depth.0.in", ch[0], 1, 5)
        c_prev = ch[0]
        for i, c in enumerate(ch):
            self._conv(rng, f"depth.{i}.conv", c, c_prev, 3)
            c_prev = c
        # sensor encoder
        c_prev = 1
        for j, c in enumerate(self.enc.channels):
            self._conv(rng, f"sensor.conv{j}", c, c_prev, 3)
            c_prev = c
        gh, gw = self._sensor_grid()
        flat = c_prev * gh * gw
        hidden = self.enc.hidden
        self.params["sensor.hidden.w"] = tc.parameter(_kaiming(rng, (hidden, flat), flat), "sensor.hidden.w")
        self.params["sensor.hidden.b"] = tc.parameter(np.zeros(hidden), "sensor.hidden.b")
        n_out = self.cfg.levels if self.enc.scalar_weights else sum(ch)
        # near-zero head weights with bias (1, 0): training starts from additive fusion
        for head, bias in (("w", 1.0), ("b", 0.0)):
            self.params[f"sensor.head_{head}.w"] = tc.parameter(
                rng.normal(0.0, 1e-3, size=(n_out, hidden)), f"sensor.head_{head}.w"
            )
            self.params[f"sensor.head_{head}.b"] = tc.parameter(np.full(n_out, bias), f"sensor.head_{head}.b")
        # constant fusion weights for FIXED mode
        for i, c in enumerate(ch):
            n = 1 if self.enc.scalar_weights else c
            self.params[f"fusion.{i}.w"] = tc.parameter(np.ones(n), f"fusion.{i}.w")
            self.params[f"fusion.{i}.b"] = tc.parameter(np.zeros(n), f"fusion.{i}.b")
        # decoder
        for i in range(self.cfg.levels - 2, -1, -1):
            self._conv(rng, f"decoder.{i}.conv", ch[i], ch[i + 1] + ch[i], 3)
        self._conv(rng, "decoder.out", 1, ch[0], 3)
        self.params["decoder.out.w"].data *= 0.1
        self.params["decoder.out.b"].data[:] = math.log(self.cfg.init_depth / self.cfg.max_depth)

    def _sensor_grid(self):
        h, w = self.cfg.height, self.cfg.width
        for _ in self.enc.channels:
            h, w = h // self.enc.pool_size, w // self.enc.pool_size
        if h < 1 or w < 1:
            raise ShapeError("input too small for the sensor encoder's pooling depth")
        return h // math.ceil(h / self.enc.max_grid), w // math.ceil(w / self.enc.max_grid)

    def group(self, name: str) -> list[Tensor]:
        if name not in GROUPS:
            raise KeyError(name)
        return [p for key, p in self.params.items() if key.split(".", 1)[0] == name]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ShapeError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"checkpoint tensor {k!r} has shape {state[k].shape}, expected {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def _p(self, name):
        return self.params[name]

    def _conv_layer(self, x, name, padding=1):
        return tc.conv2d(x, self._p(f"{name}.w"), self._p(f"{name}.b"), padding=padding)

    # ------------------------------------------------------------------
    # branches

    def rgb_features(self, rgb: Tensor) -> list[Tensor]:
        feats = []
        x = rgb
        for i in range(self.cfg.levels):
            if i > 0:
                x = tc.maxpool2d(x, 2)
            x = tc.relu(self._conv_layer(x, f"rgb.{i}.in"))
            r = tc.relu(self._conv_layer(x, f"rgb.{i}.res_a"))
            x = tc.relu(tc.add(x, self._conv_layer(r, f"rgb.{i}.res_b")))
            feats.append(x)
        return feats

    def depth_features(self, depth: np.ndarray, mask: np.ndarray) -> list[Tensor]:
        """Densified depth features per level, zeroed outside the propagated mask."""
        x = tc.constant(depth / self.cfg.max_depth)
        x, m = tc.sparse_conv2d(x, mask, self._p("depth.0.in.w"), self._p("depth.0.in.b"), padding=2)
        x = tc.relu(x)
        feats = []
        for i in range(self.cfg.levels):
            if i > 0:
                x = tc.maxpool2d(x, 2)
                m = tc.window_max(m, 2, 2, stride=2)
            x, m = tc.sparse_conv2d(x, m, self._p(f"depth.{i}.conv.w"), self._p(f"depth.{i}.conv.b"), padding=1)
            x = tc.mul(tc.relu(x), tc.constant(m))
            feats.append(x)
        return feats

    def sensor_encode(self, mask) -> FusionWeights:
        """Fusion weights from a binary mask (N, 1, H, W) or a single BinaryMask."""
        m = mask_batch(mask)
        if m.shape[2:] != (self.cfg.height, self.cfg.width):
            raise ShapeError(
                f"mask size {m.shape[3]}x{m.shape[2]} does not match model input {self.cfg.width}x{self.cfg.height}"
            )
        x = tc.constant(m)
        for j in range(len(self.enc.channels)):
            x = tc.relu(self._conv_layer(x, f"sensor.conv{j}"))
            x = tc.avgpool2d(x, self.enc.pool_size)
        h, w = x.shape[2:]
        kh, kw = math.ceil(h / self.enc.max_grid), math.ceil(w / self.enc.max_grid)
        if kh > 1 or kw > 1:
            x = tc.avgpool2d(x, (kh, kw))
        x = tc.relu(tc.dense(tc.flatten(x), self._p("sensor.hidden.w"), self._p("sensor.hidden.b")))
        # heads average over hidden units: an optimizer step then moves w, b
        # about as far as it moves the constant weights of fixed fusion
        x = tc.mul(x, 1.0 / self.enc.hidden)
        w_all = tc.dense(x, self._p("sensor.head_w.w"), self._p("sensor.head_w.b"))
        b_all = tc.dense(x, self._p("sensor.head_b.w"), self._p("sensor.head_b.b"))
        return self._split(w_all, b_all)

    def _split(self, w_all: Tensor, b_all: Tensor) -> FusionWeights:
        ws, bs = [], []
        if self.enc.scalar_weights:
            sizes = [1] * self.cfg.levels
        else:
            sizes = list(self.cfg.channels)
        start = 0
        for size in sizes:
            sel = np.zeros((w_all.shape[1], size))
            sel[start : start + size] = np.eye(size)
            ws.append(_matmul_const(w_all, sel))
            bs.append(_matmul_const(b_all, sel))
            start += size
        return FusionWeights(ws, bs)

    def fixed_weights(self) -> FusionWeights:
        return FusionWeights(
            [self._p(f"fusion.{i}.w") for i in range(self.cfg.levels)],
            [self._p(f"fusion.{i}.b") for i in range(self.cfg.levels)],
        )

    # ------------------------------------------------------------------
    # full model

    def forward(
        self,
        rgb: np.ndarray,
        depth: np.ndarray | None,
        use_depth: bool = True,
        encoder: Callable | None = None,
        trace: list | None = None,
    ) -> Tensor:
        """Log-depth prediction (N, 1, H, W).

        ``rgb`` is (N, 3, H, W) in [0, 1]; ``depth`` is (N, 1, H, W) meters
        with 0 for missing values, or None. ``use_depth=False`` is the
        first training stage: the depth branch and weight adaption are off
        and skip features pass through unchanged. ``encoder`` replaces the
        sensor encoder (called with the mask batch).
        """
        rgb = np.asarray(rgb, dtype=np.float64)
        n = rgb.shape[0]
        if rgb.ndim != 4 or rgb.shape[1:] != (3, self.cfg.height, self.cfg.width):
            raise ShapeError(f"rgb batch shape {rgb.shape} does not match model input")
        if depth is not None:
            depth = np.asarray(depth, dtype=np.float64)
            if depth.shape != (n, 1, self.cfg.height, self.cfg.width):
                raise ShapeError(f"depth batch shape {depth.shape} does not match model input")

        f_rgb = self.rgb_features(tc.constant(rgb))
        if not use_depth or self.cfg.mode is Mode.RGB_ONLY:
            fused = f_rgb
        else:
            if depth is None:
                mask = np.zeros((n, 1, self.cfg.height, self.cfg.width))
                f_lidar = [tc.constant(np.zeros(f.shape)) for f in f_rgb]
            else:
                mask = (depth > 0).astype(np.float64)
                f_lidar = self.depth_features(depth, mask)
            if encoder is not None:
                weights = encoder(mask)
            elif self.cfg.mode is Mode.ADAPTIVE:
                weights = self.sensor_encode(mask)
            else:
                weights = self.fixed_weights()
            fused = []
            for i in range(self.cfg.levels):
                out = fuse(f_rgb[i], f_lidar[i], weights.w[i], weights.b[i])
                if trace is not None:
                    trace.append((f_rgb[i], f_lidar[i], weights.w[i], weights.b[i], out))
                fused.append(out)

        x = fused[-1]
        for i in range(self.cfg.levels - 2, -1, -1):
            x = tc.concat([tc.upsample2d(x, 2), fused[i]], axis=1)
            x = tc.relu(self._conv_layer(x, f"decoder.{i}.conv"))
        log_depth = tc.add(self._conv_layer(x, "decoder.out"), math.log(self.cfg.max_depth))
        if not np.all(np.isfinite(log_depth.data)):
            raise NumericError("non-finite value in the network output")
        return log_depth

    def predict(self, rgb: RgbImage, sparse: DepthImage | None, use_depth: bool = True) -> DepthImage:
        rgb_b = rgb.values.transpose(2, 0, 1)[None]
        depth_b = None if sparse is None else sparse.values[None, None]
        with tc.no_grad():
            log_depth = self.forward(rgb_b, depth_b, use_depth=use_depth)
        return DepthImage(np.clip(np.exp(log_depth.data[0, 0]), 0.0, MAX_DEPTH))

    def predict_batch(self, rgb: np.ndarray, depth: np.ndarray | None, use_depth: bool = True) -> np.ndarray:
        with tc.no_grad():
            return np.exp(self.forward(rgb, depth, use_depth=use_depth).data)


def _matmul_const(x: Tensor, sel: np.ndarray) -> Tensor:
    return tc.dense(x, tc.constant(sel.T))


def mask_batch(mask) -> np.ndarray:
    if isinstance(mask, BinaryMask):
        return mask.bits.astype(np.float64)[None, None]
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 2:
        m = m[None, None]
    if m.ndim != 4 or m.shape[1] != 1:
        raise ShapeError(f"mask batch must be (N, 1, H, W), got {m.shape}")
    return m


def fuse(f_rgb: Tensor, f_lidar: Tensor, w, b) -> Tensor:
    """``w * f_rgb + f_lidar + b`` with w, b broadcast over rows and columns.

    ``w`` and ``b`` are (C,), (N, C), or length-1 for scalar fusion.
    """
    f_rgb, f_lidar = tc.constant(f_rgb), tc.constant(f_lidar)
    w, b = tc.constant(w), tc.constant(b)
    if f_rgb.shape != f_lidar.shape:
        raise ShapeError(f"fusion inputs differ in shape: {f_rgb.shape} vs {f_lidar.shape}")
    c = f_rgb.shape[1]
    for name, v in (("w", w), ("b", b)):
        if v.shape[-1] not in (c, 1) or v.ndim not in (1, 2):
            raise ShapeError(f"fusion {name} has shape {v.shape}, expected length {c}")
        if v.ndim == 2 and v.shape[0] not in (f_rgb.shape[0], 1):
            raise ShapeError(f"fusion {name} batch size {v.shape[0]} does not match {f_rgb.shape[0]}")
    w4 = tc.reshape(w, (-1 if w.ndim == 2 else 1, w.shape[-1], 1, 1))
    b4 = tc.reshape(b, (-1 if b.ndim == 2 else 1, b.shape[-1], 1, 1))
    return tc.add(tc.add(tc.mul(w4, f_rgb), f_lidar), b4)
