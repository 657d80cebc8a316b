import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_depth
from reslan.depthio import DepthImage
from reslan.errors import ConfigError, PresetError, ShapeError
from reslan.geometry import ChannelMap
from reslan.lidarfilter import (
    FOV_PRESETS,
    BinaryMask,
    Fov,
    Identity,
    SparseChannel,
    apply_filter,
    binary_mask,
    density,
    fov_preset,
    parse_filter_spec,
)
from reslan.lidarsim import Box, ScanConfig, Scene, project_cloud, simulate_scan, toy_camera

specs = st.one_of(
    st.just(Identity()),
    st.integers(1, 9).map(SparseChannel),
    st.tuples(st.integers(0, 63), st.integers(0, 63)).map(lambda t: Fov(min(t), max(t))),
)


def labeled(seed, h=10, w=12, density_=0.4):
    rng = np.random.default_rng(seed)
    d = random_depth(rng, h, w, density_)
    labels = np.where(d.valid, rng.integers(0, 64, (h, w)), -1)
    return d, ChannelMap(labels)


@pytest.fixture(scope="module")
def full_scan():
    # wide vertical view so every beam lands in the image
    k = toy_camera(200, 200, focal=150.0, v0=30.0)
    cfg = ScanConfig(azimuth_start=-30.0, azimuth_end=30.0, azimuth_step=0.5)
    return project_cloud(simulate_scan(Scene(1.7, (Box((-40.0, -20.0, 25.0), (40.0, 1.7, 26.0)),)), cfg), k, 200, 200)


class TestFilters:
    def test_sparse_one_is_identity(self):
        d, cm = labeled(0)
        assert apply_filter(d, cm, SparseChannel(1)) == d

    def test_sparse_four_on_scan(self, full_scan):
        d, cm = full_scan
        assert cm.distinct() == set(range(64))
        out = apply_filter(d, cm, SparseChannel(4))
        kept = set(np.unique(cm.labels[out.valid]).tolist())
        assert kept == set(range(0, 64, 4)) and len(kept) == 16

    def test_fov_sixteen(self, full_scan):
        d, cm = full_scan
        out = apply_filter(d, cm, fov_preset(16))
        assert set(np.unique(cm.labels[out.valid]).tolist()) == set(range(33, 49))

    def test_sparse_two_halves_density(self, full_scan):
        d, cm = full_scan
        before = density(binary_mask(d))
        after = density(binary_mask(apply_filter(d, cm, SparseChannel(2))))
        assert after == pytest.approx(0.5 * before, rel=0.05)

    @pytest.mark.parametrize("k, pair", [(64, (0, 63)), (56, (7, 63)), (48, (7, 55)), (32, (17, 48)),
                                         (24, (25, 48)), (16, (33, 48)), (8, (33, 40))])
    def test_presets(self, k, pair):
        assert fov_preset(k) == Fov(*pair)
        assert FOV_PRESETS[k] == pair

    def test_unknown_preset(self):
        with pytest.raises(PresetError):
            fov_preset(12)

    def test_bad_parameters(self):
        with pytest.raises(ConfigError):
            SparseChannel(0)
        with pytest.raises(ConfigError):
            Fov(10, 5)
        d, cm = labeled(1)
        with pytest.raises(ConfigError):
            apply_filter(d, cm, Fov(0, 64))

    def test_shape_mismatch(self):
        d, _ = labeled(2)
        with pytest.raises(ShapeError):
            apply_filter(d, ChannelMap(np.zeros((3, 3))), Identity())

    @pytest.mark.parametrize("text", ["id", "sparse:4", "fov:33-48", "fovpreset:16"])
    def test_parse(self, text):
        spec = parse_filter_spec(text)
        expected = str(fov_preset(16)) if text == "fovpreset:16" else text
        assert str(spec) == expected

    @pytest.mark.parametrize("text", ["", "sparse", "sparse:-1", "fov:3", "fov:9-2", "all"])
    def test_parse_errors(self, text):
        with pytest.raises(ConfigError):
            parse_filter_spec(text)


class TestFilterLaws:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31), specs)
    def test_idempotent(self, seed, spec):
        d, cm = labeled(seed)
        once = apply_filter(d, cm, spec)
        assert apply_filter(once, cm, spec) == once

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31), specs)
    def test_only_removes(self, seed, spec):
        d, cm = labeled(seed)
        out = apply_filter(d, cm, spec)
        assert not np.any(out.valid & ~d.valid)
        assert np.array_equal(out.values[out.valid], d.values[out.valid])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31), specs)
    def test_mask_commutes(self, seed, spec):
        d, cm = labeled(seed)
        out = apply_filter(d, cm, spec)
        dropped = d.valid & ~out.valid
        expected = binary_mask(d).bits.copy()
        expected[dropped] = 0
        assert binary_mask(out) == BinaryMask(expected)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31), st.integers(0, 63), st.integers(0, 63), st.integers(0, 63), st.integers(0, 63))
    def test_fov_composition(self, seed, a, b, c, e):
        f1, f2 = Fov(min(a, b), max(a, b)), Fov(min(c, e), max(c, e))
        lo, hi = max(f1.c_begin, f2.c_begin), min(f1.c_end, f2.c_end)
        if lo > hi:
            return
        d, cm = labeled(seed)
        assert apply_filter(apply_filter(d, cm, f1), cm, f2) == apply_filter(d, cm, Fov(lo, hi))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 16))
    def test_sparse_label_count(self, seed, n):
        d, cm = labeled(seed, 20, 20, 0.9)
        m = len(cm.distinct())
        out = apply_filter(d, cm, SparseChannel(n))
        assert len(set(cm.labels[out.valid].tolist())) <= -(-64 // n)
        assert len(set(cm.labels[out.valid].tolist())) <= m


class TestMask:
    def test_definition(self):
        m = binary_mask(DepthImage(np.array([[5.2, 0.0]])))
        assert m.bits.tolist() == [[1, 0]]

    @settings(max_examples=50)
    @given(st.integers(0, 2**31))
    def test_pixel_exact(self, seed):
        d = random_depth(np.random.default_rng(seed))
        bits = binary_mask(d).bits
        for (y, x), v in np.ndenumerate(d.values):
            assert bits[y, x] == (1 if v > 0 else 0)

    def test_all_invalid(self):
        assert not binary_mask(DepthImage.empty(4, 3)).bits.any()

    def test_density(self):
        assert density(BinaryMask(np.zeros((4, 4)))) == 0.0
        assert density(BinaryMask(np.ones((4, 4)))) == 1.0
        one = np.zeros((10, 10))
        one[3, 7] = 1
        assert density(BinaryMask(one)) == 0.01

    def test_rejects_non_binary(self):
        with pytest.raises(ShapeError):
            BinaryMask(np.array([[2]]))
