"""Command-line entry point: ``reslan <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
failure (non-finite values, divergence, failed gradient check).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import cv2
import numpy as np

from . import __version__
from ._atomic import atomic_write_bytes, atomic_write_text
from .adaptnet import AdaptiveDepthModel, config_from_dict, config_to_dict, infer_and_eval, load_config, train
from .depthio import (
    SAMPLE_FILES,
    DepthImage,
    Sample,
    encode_gray8,
    list_sample_dirs,
    load_sample,
    load_samples,
    read_calib,
    read_depth,
    resize_sample,
    save_sample,
    write_depth,
)
from .errors import ConfigError, DataError, NumericError, ReslanError
from .geometry import encode_channel_map, label_channels
from .lidarfilter import apply_filter, binary_mask, parse_filter_spec
from .lidarsim import ScanConfig, jitter_scene, load_scene, synth_sample
from .tensorcore import load_checkpoint, save_checkpoint
from .tensorcore.gradcheck import format_table, run_suite

log = logging.getLogger("reslan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def thread_count() -> int:
    """Worker cap from ``RESLAN_THREADS`` (0 or unset = one per CPU)."""
    raw = os.environ.get("RESLAN_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"RESLAN_THREADS must be a non-negative integer, got {raw!r}") from None
    if n < 0:
        raise UsageError(f"RESLAN_THREADS must be a non-negative integer, got {raw!r}")
    return n or (os.cpu_count() or 1)


def preview_png(d: DepthImage, max_depth: float | None = None) -> bytes:
    """Turbo-coloured 8-bit rendering of a depth map; invalid pixels are black."""
    v = d.values
    top = max_depth if max_depth else (float(v.max()) if v.size and v.max() > 0 else 1.0)
    levels = np.clip(np.round(255.0 * v / top), 0, 255).astype(np.uint8)
    bgr = cv2.applyColorMap(levels, cv2.COLORMAP_TURBO)
    bgr[~d.valid] = 0
    ok, buf = cv2.imencode(".png", bgr)
    if not ok:
        raise DataError("failed to encode preview image")
    return buf.tobytes()


# --------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    scene = load_scene(args.scene)
    k = read_calib(args.calib)
    if args.frames < 1 or args.width < 1 or args.height < 1:
        raise UsageError("--frames, --width and --height must be positive")
    rng = np.random.default_rng(args.seed)
    # frame 0 is the scene as given; later frames move every object a little
    scenes = [scene] + [jitter_scene(scene, rng) for _ in range(args.frames - 1)]
    cfg = ScanConfig(azimuth_step=args.azimuth_step)

    def render(i):
        return synth_sample(f"frame_{i:04d}", scenes[i], k, args.width, args.height, cfg)

    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        rendered = list(pool.map(render, range(args.frames)))
    for sample, channels in rendered:
        directory = save_sample(sample, args.out)
        atomic_write_bytes(directory / "channels.png", encode_channel_map(channels))
        if args.preview:
            atomic_write_bytes(directory / "preview_gt.png", preview_png(sample.gt_depth))
            atomic_write_bytes(directory / "preview_sparse.png", preview_png(sample.sparse_depth))
    print(f"wrote {args.frames} samples to {args.out}")
    return EXIT_OK


def cmd_filter(args) -> int:
    spec = parse_filter_spec(args.spec)
    dirs = list_sample_dirs(args.input)
    if not dirs:
        raise DataError(f"no samples found under {args.input}")
    out_root = Path(args.out)
    for d in dirs:
        s = load_sample(d)
        cm = label_channels(s.sparse_depth, s.intrinsics)
        filtered = apply_filter(s.sparse_depth, cm, spec)
        target = out_root / d.name
        for name in SAMPLE_FILES:
            if name != "sparse.png":
                atomic_write_bytes(target / name, (d / name).read_bytes())
        write_depth(target / "sparse.png", filtered)
        if args.preview:
            atomic_write_bytes(target / "preview_sparse.png", preview_png(filtered))
    print(f"filtered {len(dirs)} samples with {spec}")
    return EXIT_OK


def cmd_mask(args) -> int:
    m = binary_mask(read_depth(args.input))
    atomic_write_bytes(args.out, encode_gray8(m.bits * 255))
    return EXIT_OK


def cmd_channels(args) -> int:
    cm = label_channels(read_depth(args.input), read_calib(args.calib))
    atomic_write_bytes(args.out, encode_channel_map(cm))
    return EXIT_OK


def _fit_to_model(samples: list[Sample], model_cfg) -> list[Sample]:
    return [resize_sample(s, model_cfg.width, model_cfg.height) for s in samples]


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = config_from_dict({**config_to_dict(cfg), "seed": args.seed})
    samples = _fit_to_model(load_samples(args.data), cfg.model)
    model = AdaptiveDepthModel(cfg.model, cfg.encoder, seed=cfg.seed)
    result = train(samples, cfg.schedule, model, cfg.seed, cfg.loss, cfg.optimizer, cfg.lidar)
    save_checkpoint(args.out, result.params)
    atomic_write_text(str(args.out) + ".json", json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")
    if args.log:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["stage", "step", "loss"])
        for stage, step, loss in result.step_losses:
            writer.writerow([stage, step, repr(loss)])
        atomic_write_text(args.log, buf.getvalue())
    last = result.epoch_losses[-1][2] if result.epoch_losses else float("nan")
    print(f"trained {len(result.step_losses)} steps, final epoch loss {last:.5f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    spec = parse_filter_spec(args.spec)
    samples = load_samples(args.data)
    if args.self_eval:
        result = infer_and_eval(samples, spec, None, predictor=lambda s, d: s.gt_depth)
        model = None
    else:
        if not args.ckpt:
            raise UsageError("eval needs --ckpt unless --self-eval is given")
        config_path = args.config or str(args.ckpt) + ".json"
        if not Path(config_path).is_file():
            raise ConfigError(f"model config {config_path} not found (pass --config)")
        cfg = load_config(config_path)
        model = AdaptiveDepthModel(cfg.model, cfg.encoder, seed=cfg.seed)
        model.load_state_dict(load_checkpoint(args.ckpt))
        samples = _fit_to_model(samples, cfg.model)
        result = infer_and_eval(samples, spec, model, lidar=cfg.lidar)
    atomic_write_text(args.json, result.to_json() + "\n")
    if args.preview and model is not None:
        for s in samples:
            d = apply_filter(s.sparse_depth, label_channels(s.sparse_depth, s.intrinsics), spec)
            pred = model.predict(s.rgb, d)
            atomic_write_bytes(Path(args.preview) / f"{s.id}.png", preview_png(pred))
    print(result.to_json())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed, tol=args.tol)
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_version(args) -> int:
    print(f"reslan {__version__}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="reslan", description="LiDAR-adaptive depth completion toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render synthetic samples from a scene description")
    s.add_argument("--scene", required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=1)
    s.add_argument("--width", type=int, default=96)
    s.add_argument("--height", type=int, default=32)
    s.add_argument("--azimuth-step", type=float, default=0.2, help="scan resolution in degrees")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--preview", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("filter", help="apply a sensor filter to every sample")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--preview", action="store_true")
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("mask", help="write the validity mask of a sparse depth map")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mask)

    s = sub.add_parser("channels", help="write the recovered scan-line channel map")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_channels)

    s = sub.add_parser("train", help="run the two-stage training schedule")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.add_argument("--seed", type=int, help="override the seed in the config")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint under a sensor filter")
    s.add_argument("--ckpt")
    s.add_argument("--config", help="model config (default: <ckpt>.json)")
    s.add_argument("--data", required=True)
    s.add_argument("--spec", default="id")
    s.add_argument("--json", required=True)
    s.add_argument("--self-eval", action="store_true", help="use ground truth as the prediction")
    s.add_argument("--preview", metavar="DIR", help="write coloured prediction previews")
    s.add_argument("--seed", type=int, default=0, help="accepted for uniformity; evaluation is deterministic")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("version", help="print the package version")
    s.set_defaults(func=cmd_version)
    return p


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        cv2.setNumThreads(thread_count())
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ReslanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
