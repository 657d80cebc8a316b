"""Synthetic scenes, a spinning multi-beam LiDAR and dense depth rendering.

Everything is expressed in the camera frame (X right, Y down, Z forward).
Ray/primitive intersections are analytic so the simulator can act as an
exact oracle for channel recovery and filtering.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .depthio import MAX_DEPTH, CameraIntrinsics, DepthImage, RgbImage, Sample
from .errors import ConfigError, FormatError
from .geometry import ChannelMap, LidarSpec

_T_MIN = 1e-9


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    color: tuple[float, float, float] = (0.6, 0.3, 0.2)

    def __post_init__(self):
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ConfigError(f"box extents must be positive: lo={self.lo} hi={self.hi}")

    def moved(self, offset) -> "Box":
        return Box(tuple(np.add(self.lo, offset)), tuple(np.add(self.hi, offset)), self.color)


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    color: tuple[float, float, float] = (0.2, 0.5, 0.7)

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigError(f"sphere radius must be positive, got {self.radius}")

    def moved(self, offset) -> "Sphere":
        return Sphere(tuple(np.add(self.center, offset)), self.radius, self.color)


@dataclass(frozen=True)
class Scene:
    """Ground plane at ``Y = ground_height`` (positive: below the sensor) plus primitives."""

    ground_height: float | None = 1.7
    primitives: tuple = ()
    ground_color: tuple[float, float, float] = (0.45, 0.45, 0.42)

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        for p in self.primitives:
            if not isinstance(p, (Box, Sphere)):
                raise ConfigError(f"unsupported primitive {p!r}")


@dataclass(frozen=True)
class Pose:
    """Rigid transform taking sensor-frame vectors into the camera frame."""

    rotation: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def matrix(self) -> np.ndarray:
        return np.asarray(self.rotation, dtype=np.float64)


@dataclass(frozen=True)
class ScanConfig:
    spec: LidarSpec = field(default_factory=LidarSpec)
    azimuth_start: float = -180.0
    azimuth_end: float = 180.0
    azimuth_step: float = 0.2
    max_range: float = 120.0
    sensor_pose: Pose = field(default_factory=Pose)
    range_noise_std: float = 0.0
    noise_seed: int = 0

    def __post_init__(self):
        if not self.azimuth_step > 0:
            raise ConfigError("azimuth_step must be positive")
        if not self.max_range > 0:
            raise ConfigError("max_range must be positive")
        if self.azimuth_end <= self.azimuth_start:
            raise ConfigError("azimuth_end must exceed azimuth_start")

    def azimuths(self) -> np.ndarray:
        n = int(round((self.azimuth_end - self.azimuth_start) / self.azimuth_step))
        return self.azimuth_start + self.azimuth_step * np.arange(n)


@dataclass(frozen=True, eq=False)
class LabeledCloud:
    """Returns in the camera frame with the channel of the generating beam."""

    points: np.ndarray  # (N, 3)
    channels: np.ndarray  # (N,)
    azimuth_index: np.ndarray  # (N,)
    ranges: np.ndarray  # (N,)

    def __len__(self):
        return len(self.channels)

    @classmethod
    def empty(cls) -> "LabeledCloud":
        return cls(np.zeros((0, 3)), np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))


# --------------------------------------------------------------------------
# ray casting


def _cast(scene: Scene, origin: np.ndarray, dirs: np.ndarray):
    """Nearest hit along ``origin + t * dirs``.

    Returns ``(t, hit_id, normal)``; ``hit_id`` is -1 for a miss, 0 for the
    ground and ``i + 1`` for primitive ``i``. ``t`` is in units of ``dirs``.
    """
    n = len(dirs)
    best_t = np.full(n, np.inf)
    hit = np.full(n, -1, dtype=np.int64)
    normal = np.zeros((n, 3))

    with np.errstate(divide="ignore", invalid="ignore"):
        if scene.ground_height is not None:
            t = (scene.ground_height - origin[1]) / dirs[:, 1]
            ok = np.isfinite(t) & (t > _T_MIN) & (t < best_t)
            best_t[ok] = t[ok]
            hit[ok] = 0
            normal[ok] = (0.0, -1.0 if scene.ground_height > origin[1] else 1.0, 0.0)

        for idx, prim in enumerate(scene.primitives, start=1):
            if isinstance(prim, Box):
                lo = np.asarray(prim.lo) - origin
                hi = np.asarray(prim.hi) - origin
                t1 = lo / dirs
                t2 = hi / dirs
                # a zero direction component inside the slab must not veto the hit
                t1 = np.where(dirs == 0, np.where(lo <= 0, -np.inf, np.inf), t1)
                t2 = np.where(dirs == 0, np.where(hi >= 0, np.inf, -np.inf), t2)
                tmin = np.minimum(t1, t2)
                tmax = np.maximum(t1, t2)
                axis = np.argmax(tmin, axis=1)
                tnear = tmin[np.arange(n), axis]
                tfar = tmax.min(axis=1)
                ok = (tnear <= tfar) & (tnear > _T_MIN) & (tnear < best_t)
                best_t[ok] = tnear[ok]
                hit[ok] = idx
                nrm = np.zeros((n, 3))
                nrm[np.arange(n), axis] = -np.sign(dirs[np.arange(n), axis])
                normal[ok] = nrm[ok]
            else:
                oc = origin - np.asarray(prim.center)
                a = np.einsum("ij,ij->i", dirs, dirs)
                b = dirs @ oc
                c = oc @ oc - prim.radius**2
                disc = b * b - a * c
                t = (-b - np.sqrt(np.maximum(disc, 0.0))) / a
                ok = (disc >= 0) & (t > _T_MIN) & (t < best_t)
                best_t[ok] = t[ok]
                hit[ok] = idx
                p = origin + t[ok, None] * dirs[ok]
                normal[ok] = (p - np.asarray(prim.center)) / prim.radius
    return best_t, hit, normal


def beam_directions(cfg: ScanConfig):
    """Unit ray directions in the camera frame, channel-major order."""
    elev = np.radians(cfg.spec.beam_elevations())
    az = np.radians(cfg.azimuths())
    ee, aa = np.meshgrid(elev, az, indexing="ij")
    local = np.stack([np.cos(ee) * np.sin(aa), -np.sin(ee), np.cos(ee) * np.cos(aa)], axis=-1)
    dirs = local.reshape(-1, 3) @ cfg.sensor_pose.matrix().T
    ch, ai = np.meshgrid(np.arange(len(elev)), np.arange(len(az)), indexing="ij")
    return dirs, ch.ravel(), ai.ravel()


def simulate_scan(scene: Scene, cfg: ScanConfig = ScanConfig()) -> LabeledCloud:
    origin = np.asarray(cfg.sensor_pose.translation, dtype=np.float64)
    dirs, ch, ai = beam_directions(cfg)
    t, hit, _ = _cast(scene, origin, dirs)
    if cfg.range_noise_std > 0:
        rng = np.random.default_rng(cfg.noise_seed)
        t = t + rng.normal(0.0, cfg.range_noise_std, size=t.shape)
    keep = (hit >= 0) & (t > 0) & (t <= cfg.max_range)
    r = t[keep]
    points = origin + r[:, None] * dirs[keep]
    return LabeledCloud(points=points, channels=ch[keep], azimuth_index=ai[keep], ranges=r)


def project_points(points: np.ndarray, k: CameraIntrinsics):
    """Pinhole projection to (column, row) floats; callers drop Z <= 0 first."""
    x = points[:, 0] * k.fx / points[:, 2] + k.u0
    y = points[:, 1] * k.fy / points[:, 2] + k.v0
    return x, y


def project_cloud(pc: LabeledCloud, k: CameraIntrinsics, w: int, h: int):
    """Z-buffered projection into a depth image and its true channel map."""
    depth = np.zeros((h, w))
    labels = np.full((h, w), -1, dtype=np.int64)
    if len(pc) == 0:
        return DepthImage(depth), ChannelMap(labels)
    pts = pc.points
    front = pts[:, 2] > 0
    x, y = project_points(pts[front], k)
    col = np.floor(x + 0.5).astype(np.int64)
    row = np.floor(y + 0.5).astype(np.int64)
    z = pts[front, 2]
    ch = pc.channels[front]
    inside = (col >= 0) & (col < w) & (row >= 0) & (row < h) & (z <= MAX_DEPTH)
    col, row, z, ch = col[inside], row[inside], z[inside], ch[inside]
    pix = row * w + col
    order = np.lexsort((np.arange(len(z)), z, pix))
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix[order][1:] != pix[order][:-1]
    win = order[first]
    depth[row[win], col[win]] = z[win]
    labels[row[win], col[win]] = ch[win]
    return DepthImage(depth), ChannelMap(labels)


def pixel_rays(k: CameraIntrinsics, w: int, h: int) -> np.ndarray:
    """Rays through pixel centers, scaled so their Z component is 1."""
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    return np.stack([(xs - k.u0) / k.fx, (ys - k.v0) / k.fy, np.ones_like(xs)], axis=-1).reshape(-1, 3)


def render_gt(scene: Scene, k: CameraIntrinsics, w: int, h: int, max_depth: float = MAX_DEPTH) -> DepthImage:
    t, hit, _ = _cast(scene, np.zeros(3), pixel_rays(k, w, h))
    depth = np.where((hit >= 0) & (t <= min(max_depth, MAX_DEPTH)), t, 0.0)
    return DepthImage(depth.reshape(h, w))


_SKY = np.array([0.62, 0.75, 0.92])
_LIGHT = np.array([0.3, -0.8, -0.5]) / np.linalg.norm([0.3, -0.8, -0.5])


def render_rgb(scene: Scene, k: CameraIntrinsics, w: int, h: int, haze: float = 45.0) -> RgbImage:
    """Flat-shaded color image with distance haze, so color carries depth cues."""
    rays = pixel_rays(k, w, h)
    t, hit, normal = _cast(scene, np.zeros(3), rays)
    colors = np.tile(_SKY, (len(rays), 1))
    sky_rows = np.clip(rays[:, 1], -1, 1)
    colors = colors * (1.0 + 0.3 * sky_rows[:, None])
    albedo = np.zeros((len(rays), 3))
    ground = hit == 0
    if np.any(ground):
        p = t[ground, None] * rays[ground]
        checker = (np.floor(p[:, 0] / 2.0) + np.floor(p[:, 2] / 2.0)) % 2
        albedo[ground] = np.asarray(scene.ground_color) * (0.85 + 0.15 * checker[:, None])
    for idx, prim in enumerate(scene.primitives, start=1):
        albedo[hit == idx] = prim.color
    solid = hit >= 0
    shade = 0.35 + 0.65 * np.clip(normal[solid] @ _LIGHT, 0.0, 1.0)
    lit = albedo[solid] * shade[:, None]
    fog = np.exp(-t[solid] / haze)[:, None]
    colors[solid] = lit * fog + _SKY * (1.0 - fog)
    return RgbImage(np.clip(colors, 0.0, 1.0).reshape(h, w, 3))


# --------------------------------------------------------------------------
# scene documents and random scenes


def scene_from_dict(doc: dict) -> Scene:
    try:
        prims = []
        for p in doc.get("primitives", []):
            kind = p["type"]
            color = tuple(p.get("color", (0.6, 0.3, 0.2)))
            if kind == "box":
                prims.append(Box(tuple(p["min"]), tuple(p["max"]), color))
            elif kind == "sphere":
                prims.append(Sphere(tuple(p["center"]), float(p["radius"]), color))
            else:
                raise FormatError(f"unknown primitive type {kind!r}")
        ground = doc.get("ground_height", 1.7)
        return Scene(ground_height=None if ground is None else float(ground), primitives=tuple(prims))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"bad scene description: {exc}") from exc


def scene_to_dict(scene: Scene) -> dict:
    prims = []
    for p in scene.primitives:
        if isinstance(p, Box):
            prims.append({"type": "box", "min": list(p.lo), "max": list(p.hi), "color": list(p.color)})
        else:
            prims.append({"type": "sphere", "center": list(p.center), "radius": p.radius, "color": list(p.color)})
    return {"ground_height": scene.ground_height, "primitives": prims}


def load_scene(path) -> Scene:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    return scene_from_dict(doc)


def random_scene(rng: np.random.Generator) -> Scene:
    """Street-like scene: ground, car-sized boxes, building walls and spheres."""
    ground = float(rng.uniform(1.55, 1.85))
    prims = []
    for _ in range(int(rng.integers(2, 7))):
        wdt, hgt, lng = rng.uniform(1.5, 2.0), rng.uniform(1.3, 1.9), rng.uniform(3.5, 4.8)
        x = rng.uniform(-10.0, 10.0)
        z = rng.uniform(5.0, 45.0)
        prims.append(
            Box((x - wdt / 2, ground - hgt, z), (x + wdt / 2, ground, z + lng), tuple(rng.uniform(0.1, 0.9, 3)))
        )
    for side in (-1.0, 1.0):
        if rng.random() < 0.8:
            x0 = side * rng.uniform(7.0, 14.0)
            z0 = rng.uniform(0.0, 20.0)
            lo = (min(x0, x0 + side * 6.0), ground - rng.uniform(4.0, 12.0), z0)
            hi = (max(x0, x0 + side * 6.0), ground, z0 + rng.uniform(15.0, 50.0))
            prims.append(Box(lo, hi, tuple(rng.uniform(0.3, 0.8, 3))))
    for _ in range(int(rng.integers(0, 4))):
        r = rng.uniform(0.4, 1.4)
        prims.append(
            Sphere(
                (rng.uniform(-8.0, 8.0), ground - r - rng.uniform(0.0, 1.0), rng.uniform(6.0, 35.0)),
                r,
                tuple(rng.uniform(0.1, 0.9, 3)),
            )
        )
    return Scene(ground_height=ground, primitives=tuple(prims))


def jitter_scene(scene: Scene, rng: np.random.Generator, sigma=(1.0, 0.0, 2.0)) -> Scene:
    prims = tuple(p.moved(rng.normal(0.0, 1.0, 3) * np.asarray(sigma)) for p in scene.primitives)
    return Scene(scene.ground_height, prims, scene.ground_color)


def synth_sample(sample_id: str, scene: Scene, k: CameraIntrinsics, w: int, h: int, cfg: ScanConfig = ScanConfig()):
    """Render one training sample; returns ``(Sample, true ChannelMap)``."""
    sparse, true_channels = project_cloud(simulate_scan(scene, cfg), k, w, h)
    sample = Sample(
        id=sample_id,
        rgb=render_rgb(scene, k, w, h),
        sparse_depth=sparse,
        gt_depth=render_gt(scene, k, w, h, max_depth=cfg.max_range),
        intrinsics=k,
    )
    return sample, true_channels


def toy_camera(w: int = 96, h: int = 32, focal: float | None = None, v0: float | None = None) -> CameraIntrinsics:
    """Small forward camera whose rows span roughly the upper half of the beam fan."""
    f = 136.0 * w / 96.0 if focal is None else focal
    return CameraIntrinsics(f, f, (w - 1) / 2.0, h * 5.0 / 32.0 if v0 is None else v0)


def toy_dataset(n: int, seed: int, w: int = 96, h: int = 32, k: CameraIntrinsics | None = None, prefix: str = "toy"):
    """``n`` random street scenes rendered with a narrow-azimuth scan."""
    k = toy_camera(w, h) if k is None else k
    half = math.degrees(math.atan2(max(k.u0, w - 1 - k.u0) + 1.0, k.fx)) + 1.0
    cfg = ScanConfig(azimuth_start=-half, azimuth_end=half, azimuth_step=0.1)
    rng = np.random.default_rng(seed)
    return [synth_sample(f"{prefix}{i:04d}", random_scene(rng), k, w, h, cfg)[0] for i in range(n)]
