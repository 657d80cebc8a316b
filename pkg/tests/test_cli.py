import json
import subprocess
import sys

import numpy as np
import pytest

from reslan.cli import run
from reslan.depthio import decode_gray16, load_sample, read_depth, write_calib
from reslan.geometry import decode_channel_map, label_channels
from reslan.lidarsim import random_scene, scene_to_dict, toy_camera

TINY_CONFIG = {
    "model": {"channels": [4, 8], "width": 16, "height": 8, "mode": "adaptive"},
    "sensor_encoder": {"channels": [4], "hidden": 8},
    "schedule": {"stage1_epochs": 1, "stage2_epochs": 1, "tasks": ["id", "sparse:4"], "batch_size": 2},
    "optimizer": {"lr": 0.001},
    "seed": 0,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "scene.json").write_text(json.dumps(scene_to_dict(random_scene(np.random.default_rng(8)))))
    write_calib(root / "calib.txt", toy_camera(16, 8))
    (root / "cfg.json").write_text(json.dumps(TINY_CONFIG))
    argv = ["synth", "--scene", str(root / "scene.json"), "--calib", str(root / "calib.txt"),
            "--out", str(root / "data"), "--frames", "3", "--width", "16", "--height", "8", "--seed", "4"]
    assert run(argv) == 0
    return root


def tree_bytes(directory):
    return {str(p.relative_to(directory)): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


class TestBasics:
    def test_version(self, capsys):
        assert run(["version"]) == 0
        assert capsys.readouterr().out.startswith("reslan ")

    @pytest.mark.parametrize("argv", [[], ["bogus"], ["version", "--nope"], ["filter", "--in", "x"],
                                      ["synth", "--scene", "a", "--calib", "b", "--out", "c", "--frames", "two"]])
    def test_usage_errors(self, argv):
        assert run(argv) == 1

    def test_console_script(self):
        out = subprocess.run([sys.executable, "-m", "reslan", "version"], capture_output=True, text=True)
        assert out.returncode == 0 and "reslan" in out.stdout

    def test_bad_thread_setting(self, monkeypatch):
        monkeypatch.setenv("RESLAN_THREADS", "many")
        assert run(["version"]) == 1

    def test_gradcheck(self, capsys):
        assert run(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "conv2d" in out and "FAIL" not in out

    def test_gradcheck_failure_exit(self, capsys):
        assert run(["gradcheck", "--tol", "1e-30"]) == 3


class TestDataCommands:
    def test_synth_layout(self, workspace):
        dirs = sorted(p.name for p in (workspace / "data").iterdir())
        assert dirs == ["frame_0000", "frame_0001", "frame_0002"]
        for d in dirs:
            names = {p.name for p in (workspace / "data" / d).iterdir()}
            assert names == {"rgb.png", "sparse.png", "gt.png", "calib.txt", "channels.png"}

    def test_synth_reproducible(self, workspace, tmp_path):
        argv = ["synth", "--scene", str(workspace / "scene.json"), "--calib", str(workspace / "calib.txt"),
                "--out", str(tmp_path / "again"), "--frames", "3", "--width", "16", "--height", "8", "--seed", "4"]
        assert run(argv) == 0
        assert tree_bytes(tmp_path / "again") == tree_bytes(workspace / "data")

    def test_synth_channels_match_recovery(self, workspace):
        d = workspace / "data" / "frame_0000"
        true = decode_channel_map((d / "channels.png").read_bytes())
        s = load_sample(d)
        rec = label_channels(s.sparse_depth, s.intrinsics)
        assert np.array_equal(true.present, rec.present)
        # one pixel spans ~2.5 deg of elevation here; beams are ~0.42 deg apart
        pixel_deg = np.degrees(np.arctan(1.0 / s.intrinsics.fy))
        beams_per_pixel = pixel_deg / (26.9 / 63)
        assert np.abs(true.labels - rec.labels)[true.present].max() <= np.ceil(beams_per_pixel) + 1

    def test_synth_preview(self, workspace, tmp_path):
        argv = ["synth", "--scene", str(workspace / "scene.json"), "--calib", str(workspace / "calib.txt"),
                "--out", str(tmp_path / "p"), "--width", "16", "--height", "8", "--preview"]
        assert run(argv) == 0
        assert (tmp_path / "p" / "frame_0000" / "preview_gt.png").stat().st_size > 0

    def test_filter_sparse_one_is_byte_identical(self, workspace, tmp_path):
        assert run(["filter", "--in", str(workspace / "data"), "--spec", "sparse:1", "--out", str(tmp_path / "f")]) == 0
        assert tree_bytes(tmp_path / "f") == {
            k: v for k, v in tree_bytes(workspace / "data").items() if not k.endswith("channels.png")
        }

    def test_filter_bad_spec(self, workspace, tmp_path):
        assert run(["filter", "--in", str(workspace / "data"), "--spec", "sparse:0", "--out", str(tmp_path)]) == 2

    def test_mask(self, workspace, tmp_path):
        src = workspace / "data" / "frame_0000" / "sparse.png"
        assert run(["mask", "--in", str(src), "--out", str(tmp_path / "m.png")]) == 0
        from PIL import Image

        bits = np.asarray(Image.open(tmp_path / "m.png"))
        assert bits.dtype == np.uint8 and set(np.unique(bits)) <= {0, 255}
        assert np.array_equal(bits == 255, read_depth(src).valid)

    def test_channels(self, workspace, tmp_path):
        d = workspace / "data" / "frame_0001"
        out = tmp_path / "ch.png"
        assert run(["channels", "--in", str(d / "sparse.png"), "--calib", str(d / "calib.txt"), "--out", str(out)]) == 0
        s = load_sample(d)
        assert decode_channel_map(out.read_bytes()) == label_channels(s.sparse_depth, s.intrinsics)
        assert decode_gray16(out.read_bytes()).max() <= 64

    def test_missing_input(self, tmp_path):
        assert run(["mask", "--in", str(tmp_path / "none.png"), "--out", str(tmp_path / "m.png")]) == 2

    def test_corrupt_input(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"\x89PNG garbage")
        assert run(["mask", "--in", str(bad), "--out", str(tmp_path / "m.png")]) == 2
        assert not (tmp_path / "m.png").exists()


@pytest.fixture(scope="module")
def trained(workspace):
    out = workspace / "ckpt.bin"
    argv = ["train", "--config", str(workspace / "cfg.json"), "--data", str(workspace / "data"),
            "--out", str(out), "--log", str(workspace / "trace.csv")]
    assert run(argv) == 0
    return out


class TestTrainEval:
    def test_outputs(self, trained, workspace):
        assert trained.read_bytes()[:8] == b"RSLNCKPT"
        assert json.loads((workspace / "ckpt.bin.json").read_text())["model"]["width"] == 16
        lines = (workspace / "trace.csv").read_text().splitlines()
        assert lines[0] == "stage,step,loss" and len(lines) == 1 + 2 + 3
        assert not list(workspace.glob(".*.tmp"))

    def test_reproducible(self, trained, workspace, tmp_path):
        argv = ["train", "--config", str(workspace / "cfg.json"), "--data", str(workspace / "data"),
                "--out", str(tmp_path / "c.bin"), "--log", str(tmp_path / "t.csv")]
        assert run(argv) == 0
        assert (tmp_path / "c.bin").read_bytes() == trained.read_bytes()
        assert (tmp_path / "t.csv").read_bytes() == (workspace / "trace.csv").read_bytes()

    def test_seed_override(self, trained, workspace, tmp_path):
        argv = ["train", "--config", str(workspace / "cfg.json"), "--data", str(workspace / "data"),
                "--out", str(tmp_path / "c.bin"), "--seed", "5"]
        assert run(argv) == 0
        assert (tmp_path / "c.bin").read_bytes() != trained.read_bytes()

    def test_eval_writes_schema(self, trained, workspace, tmp_path):
        out = tmp_path / "r.json"
        argv = ["eval", "--ckpt", str(trained), "--data", str(workspace / "data"), "--spec", "fovpreset:16",
                "--json", str(out), "--preview", str(tmp_path / "prev")]
        assert run(argv) == 0
        doc = json.loads(out.read_text())
        assert set(doc) == {"rmse_mm", "mae_mm", "irmse_km", "imae_km", "delta_125", "n_valid"}
        assert doc["rmse_mm"] > 0
        assert len(list((tmp_path / "prev").glob("*.png"))) == 3

    def test_filter_then_eval_equals_eval_spec(self, trained, workspace, tmp_path):
        data = str(workspace / "data")
        assert run(["eval", "--ckpt", str(trained), "--data", data, "--spec", "sparse:4", "--json", str(tmp_path / "a.json")]) == 0
        assert run(["filter", "--in", data, "--spec", "sparse:4", "--out", str(tmp_path / "f")]) == 0
        assert run(["eval", "--ckpt", str(trained), "--data", str(tmp_path / "f"), "--json", str(tmp_path / "b.json")]) == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_self_eval(self, workspace, tmp_path):
        out = tmp_path / "s.json"
        assert run(["eval", "--self-eval", "--data", str(workspace / "data"), "--json", str(out)]) == 0
        assert json.loads(out.read_text())["rmse_mm"] == 0.0

    def test_eval_needs_checkpoint(self, workspace, tmp_path):
        assert run(["eval", "--data", str(workspace / "data"), "--json", str(tmp_path / "x.json")]) == 1

    def test_eval_bad_checkpoint(self, workspace, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"nope")
        argv = ["eval", "--ckpt", str(bad), "--config", str(workspace / "cfg.json"), "--data", str(workspace / "data"),
                "--json", str(tmp_path / "x.json")]
        assert run(argv) == 2

    def test_train_bad_config(self, workspace, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"model": {"colour": 1}}))
        argv = ["train", "--config", str(cfg), "--data", str(workspace / "data"), "--out", str(tmp_path / "o.bin")]
        assert run(argv) == 2
