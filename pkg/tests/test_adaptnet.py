import collections
import json

import numpy as np
import pytest

from reslan import tensorcore as tc
from reslan.adaptnet import (
    AdaptiveDepthModel,
    ComparisonConfig,
    Mode,
    ModelConfig,
    SensorEncoderConfig,
    TrainSchedule,
    compare_fusion,
    config_from_dict,
    config_to_dict,
    dataset_loss,
    fuse,
    infer_and_eval,
    load_config,
    stage2_instances,
    train,
)
from reslan.errors import ConfigError, NumericError, ShapeError
from reslan.geometry import label_channels
from reslan.lidarfilter import Identity, SparseChannel, apply_filter, binary_mask, fov_preset
from reslan.lidarsim import toy_dataset
from reslan.metrics import si_loss_tensor
from reslan.tensorcore import AdamConfig
from reslan.tensorcore.gradcheck import sampled_gradient_check

TINY = ModelConfig(channels=(4, 8, 8), width=16, height=8)
TINY_ENC = SensorEncoderConfig(channels=(4, 4), hidden=8)


def tiny(mode=Mode.ADAPTIVE, seed=0):
    return AdaptiveDepthModel(ModelConfig(channels=TINY.channels, width=16, height=8, mode=mode), TINY_ENC, seed)


@pytest.fixture(scope="module")
def tiny_data():
    return toy_dataset(4, seed=3, w=16, h=8, k=None)


def batch(rng, n=2, h=8, w=16, density=0.3):
    rgb = rng.random((n, 3, h, w))
    depth = np.where(rng.random((n, 1, h, w)) < density, rng.uniform(2, 60, (n, 1, h, w)), 0.0)
    gt = rng.uniform(2, 60, (n, 1, h, w))
    return rgb, depth, gt


class TestFusion:
    def test_identity_weights(self, rng):
        a, b = rng.normal(size=(1, 3, 2, 2)), rng.normal(size=(1, 3, 2, 2))
        out = fuse(tc.constant(a), tc.constant(b), np.ones(3), np.zeros(3))
        assert np.array_equal(out.data, a + b)

    def test_worked_value(self):
        out = fuse(tc.constant([[[[0.5]]]]), tc.constant([[[[0.0]]]]), np.array([2.0]), np.array([1.0]))
        assert out.data.item() == 2.0

    def test_zero_rgb(self, rng):
        f_l = rng.normal(size=(2, 3, 2, 2))
        b = rng.normal(size=3)
        out = fuse(tc.constant(np.zeros((2, 3, 2, 2))), tc.constant(f_l), rng.normal(size=(2, 3)), b)
        assert np.array_equal(out.data, f_l + b[None, :, None, None])

    def test_shape_checks(self, rng):
        with pytest.raises(ShapeError):
            fuse(tc.constant(np.zeros((1, 3, 2, 2))), tc.constant(np.zeros((1, 3, 2, 2))), np.ones(4), np.zeros(3))


class TestSensorEncoder:
    def test_default_output_lengths(self):
        m = AdaptiveDepthModel()
        fw = m.sensor_encode(np.ones((1, 1, 32, 96)))
        assert sum(fw.lengths()) == 112
        assert [t.shape for t in fw.w] == [(1, 16), (1, 32), (1, 64)]

    def test_deterministic(self, tiny_data):
        m = tiny()
        mask = binary_mask(tiny_data[0].sparse_depth)
        a, b = m.sensor_encode(mask), m.sensor_encode(mask)
        for x, y in zip(a.w + a.b, b.w + b.b):
            assert np.array_equal(x.data, y.data)

    def test_scalar_weights(self):
        m = AdaptiveDepthModel(TINY, SensorEncoderConfig(channels=(4, 4), hidden=8, scalar_weights=True))
        assert m.sensor_encode(np.ones((1, 1, 8, 16))).lengths() == [1, 1, 1]

    def test_wrong_mask_size(self):
        with pytest.raises(ShapeError):
            tiny().sensor_encode(np.ones((1, 1, 4, 4)))

    def test_initially_additive(self, rng):
        fw = tiny().sensor_encode((rng.random((1, 1, 8, 16)) < 0.5).astype(float))
        for w, b in zip(fw.w, fw.b):
            assert np.allclose(w.data, 1.0, atol=0.05) and np.allclose(b.data, 0.0, atol=0.05)


class TestForward:
    def test_positive_output(self, rng):
        for seed in range(3):
            rgb, depth, _ = batch(rng)
            pred = tiny(seed=seed).predict_batch(rgb, depth)
            assert pred.min() > 0

    def test_initial_depth(self, rng):
        rgb, depth, _ = batch(rng)
        pred = tiny().predict_batch(rgb, depth)
        assert np.median(pred) == pytest.approx(20.0, rel=0.5)

    def test_absent_depth_is_degenerate_fusion(self, rng):
        m = tiny()
        rgb, _, _ = batch(rng)
        trace = []
        with tc.no_grad():
            m.forward(rgb, None, trace=trace)
        assert len(trace) == TINY.levels
        for f_rgb, f_lidar, w, b, out in trace:
            assert not f_lidar.data.any()
            c = f_rgb.shape[1]
            expected = w.data.reshape(-1, c, 1, 1) * f_rgb.data + b.data.reshape(-1, c, 1, 1)
            np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-15)

    def test_fixed_equals_stubbed_adaptive(self, rng):
        rgb, depth, _ = batch(rng)
        fixed, adaptive = tiny(Mode.FIXED, seed=5), tiny(Mode.ADAPTIVE, seed=5)
        for i in range(TINY.levels):
            fixed.params[f"fusion.{i}.w"].data = rng.normal(size=TINY.channels[i])
            fixed.params[f"fusion.{i}.b"].data = rng.normal(size=TINY.channels[i])
        stub = lambda mask: fixed.fixed_weights()  # noqa: E731
        with tc.no_grad():
            a = fixed.forward(rgb, depth).data
            b = adaptive.forward(rgb, depth, encoder=stub).data
        assert np.array_equal(a, b)

    def test_rgb_only_ignores_depth(self, rng):
        m = tiny(Mode.RGB_ONLY)
        rgb, depth, _ = batch(rng)
        assert np.array_equal(m.predict_batch(rgb, depth), m.predict_batch(rgb, None))

    def test_depth_changes_prediction(self, rng):
        m = tiny()
        rgb, depth, _ = batch(rng)
        assert not np.array_equal(m.predict_batch(rgb, depth), m.predict_batch(rgb, None))

    def test_shape_errors(self, rng):
        m = tiny()
        with pytest.raises(ShapeError):
            m.forward(rng.random((1, 3, 8, 8)), None)
        with pytest.raises(ShapeError):
            m.forward(rng.random((1, 3, 8, 16)), np.zeros((1, 1, 8, 8)))

    def test_non_finite_parameters(self, rng):
        m = tiny()
        m.params["decoder.out.b"].data[:] = np.nan
        with pytest.raises(NumericError):
            m.forward(*batch(rng)[:2])

    def test_state_dict_round_trip(self, rng):
        a, b = tiny(seed=1), tiny(seed=2)
        b.load_state_dict(a.state_dict())
        rgb, depth, _ = batch(rng)
        assert np.array_equal(a.predict_batch(rgb, depth), b.predict_batch(rgb, depth))
        state = a.state_dict()
        state["decoder.out.b"] = np.zeros(2)
        with pytest.raises(ShapeError):
            b.load_state_dict(state)

    def test_end_to_end_gradients(self, rng):
        m = tiny(seed=4)
        rgb, depth, gt = batch(rng)
        rows = sampled_gradient_check(lambda: si_loss_tensor(m.forward(rgb, depth), gt), list(m.params.values()), 20, seed=1)
        assert max(r[4] for r in rows) < 1e-3

    def test_sensor_encoder_receives_gradient(self, rng):
        m = tiny()
        rgb, depth, gt = batch(rng)
        with tc.Tape() as tape:
            tape.backward(si_loss_tensor(m.forward(rgb, depth), gt))
        grads = [p.grad for p in m.group("sensor")]
        assert all(g is not None for g in grads)
        assert any(np.abs(g).max() > 0 for g in grads)


class TestTraining:
    def test_stage_one_leaves_depth_branch(self, tiny_data):
        m = tiny()
        before = {k: v.copy() for k, v in m.state_dict().items()}
        train(tiny_data, TrainSchedule(stage1_epochs=2, stage2_epochs=0), m, opt_cfg=AdamConfig(lr=1e-3))
        after = m.state_dict()
        for group in ("depth", "sensor", "fusion"):
            keys = [k for k in before if k.startswith(group + ".")]
            assert keys and all(np.array_equal(before[k], after[k]) for k in keys)
        assert not np.array_equal(before["rgb.0.in.w"], after["rgb.0.in.w"])

    def test_stage_two_freezes_rgb_encoder(self, tiny_data):
        m = tiny()
        train(tiny_data, TrainSchedule(stage1_epochs=1, stage2_epochs=0), m)
        rgb = {k: v.copy() for k, v in m.state_dict().items() if k.startswith("rgb.")}
        sensor = m.params["sensor.hidden.w"].data.copy()
        train(tiny_data, TrainSchedule(stage1_epochs=0, stage2_epochs=2, tasks=("id", "sparse:2")), m)
        assert all(np.array_equal(rgb[k], m.params[k].data) for k in rgb)
        assert not np.array_equal(sensor, m.params["sensor.hidden.w"].data)

    def test_same_seed_same_trace(self, tiny_data):
        sched = TrainSchedule(stage1_epochs=1, stage2_epochs=2, tasks=(Identity(), SparseChannel(4)), batch_size=3)
        a = train(tiny_data, sched, tiny(), seed=9)
        b = train(tiny_data, sched, tiny(), seed=9)
        assert a.step_losses == b.step_losses
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_task_instances_independent_of_order(self):
        tasks = [Identity(), SparseChannel(2), fov_preset(16)]
        a = stage2_instances(5, tasks)
        b = stage2_instances(5, tasks[::-1])
        name = lambda ts, inst: (inst.sample, str(ts[inst.task]))  # noqa: E731
        assert collections.Counter(name(tasks, i) for i in a) == collections.Counter(name(tasks[::-1], i) for i in b)

    def test_loss_decreases(self, tiny_data):
        m = tiny()
        tasks = (Identity(), SparseChannel(4))
        start = dataset_loss(m, tiny_data, tasks)
        train(tiny_data, TrainSchedule(stage1_epochs=3, stage2_epochs=5, tasks=tasks), m, opt_cfg=AdamConfig(lr=3e-3))
        assert dataset_loss(m, tiny_data, tasks) < start


class TestEvaluation:
    def test_ground_truth_bypass(self, tiny_data):
        r = infer_and_eval(tiny_data, Identity(), None, predictor=lambda s, d: s.gt_depth)
        assert (r.rmse, r.mae, r.irmse, r.imae, r.delta_125) == (0.0, 0.0, 0.0, 0.0, 1.0)

    def test_identity_equals_sparse_one(self, tiny_data):
        m = tiny()
        assert infer_and_eval(tiny_data, Identity(), m) == infer_and_eval(tiny_data, SparseChannel(1), m)

    def test_filter_applied_before_prediction(self, tiny_data):
        seen = []

        def spy(sample, depth):
            seen.append(depth)
            return sample.gt_depth

        infer_and_eval(tiny_data, SparseChannel(4), None, predictor=spy)
        for s, d in zip(tiny_data, seen):
            cm = label_channels(s.sparse_depth, s.intrinsics)
            assert d == apply_filter(s.sparse_depth, cm, SparseChannel(4))


class TestConfig:
    def test_round_trip(self):
        cfg = config_from_dict(
            {
                "model": {"channels": [8, 16], "width": 32, "height": 16, "mode": "fixed"},
                "schedule": {"tasks": ["id", "fovpreset:16"], "augment": {"crop_size": [16, 8]}},
                "loss": {"lambda": 0.85},
                "optimizer": {"lr": 0.001},
                "seed": 3,
            }
        )
        assert cfg.model.mode is Mode.FIXED and cfg.loss.lam == 0.85
        assert cfg.schedule.tasks == (Identity(), fov_preset(16))
        assert config_from_dict(json.loads(json.dumps(config_to_dict(cfg)))) == cfg

    @pytest.mark.parametrize(
        "doc",
        [
            {"modle": {}},
            {"model": {"depth": 3}},
            {"model": {"width": 30}},
            {"schedule": {"tasks": ["sparse:x"]}},
            {"schedule": {"stage2_epochs": 1, "tasks": []}},
            {"loss": {"lambda": 2.0}},
        ],
    )
    def test_rejects(self, doc):
        with pytest.raises(ConfigError):
            config_from_dict(doc)

    def test_bad_json_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{")
        with pytest.raises(ConfigError):
            load_config(p)


class TestComparison:
    CFG = ComparisonConfig(
        tasks=("id", "sparse:4"), n_train=2, n_test=2, stage1_epochs=1, stage2_epochs=1,
        batch_size=2, width=16, height=8, channels=(4, 8),
    )

    def test_scores_every_mode_and_task(self):
        r = compare_fusion(0, self.CFG)
        assert set(r.scores) == {"adaptive", "fixed"}
        assert all(set(v) == {"id", "sparse:4"} for v in r.scores.values())
        assert r.mae(Mode.FIXED, "sparse:4") > 0

    def test_deterministic(self):
        a, b = compare_fusion(3, self.CFG, modes=(Mode.ADAPTIVE,)), compare_fusion(3, self.CFG, modes=(Mode.ADAPTIVE,))
        assert a.scores == b.scores
