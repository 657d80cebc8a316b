import math

import numpy as np
import pytest

from reslan.depthio import CameraIntrinsics, DepthImage, RgbImage, Sample
from reslan.lidarsim import toy_dataset


def random_depth(rng, h=12, w=16, density=0.3, lo=0.5, hi=80.0):
    v = rng.uniform(lo, hi, (h, w))
    v[rng.random((h, w)) >= density] = 0.0
    return DepthImage(v)


def random_sample(rng, h=12, w=16, sample_id="s"):
    return Sample(
        id=sample_id,
        rgb=RgbImage(rng.random((h, w, 3))),
        sparse_depth=random_depth(rng, h, w, 0.2),
        gt_depth=random_depth(rng, h, w, 0.9),
        intrinsics=CameraIntrinsics(20.0, 21.0, w / 2 - 0.3, h / 2 + 0.2),
    )


def naive_evaluate(pred, gt):
    """Per-pixel loop reference for the KITTI metrics."""
    sq = ab = isq = iab = 0.0
    hits = n = 0
    for i in range(gt.shape[0]):
        for j in range(gt.shape[1]):
            g = float(gt[i, j])
            if g <= 0:
                continue
            p = float(pred[i, j])
            e = p - g
            ie = 1.0 / p - 1.0 / g
            sq += e * e
            ab += abs(e)
            isq += ie * ie
            iab += abs(ie)
            hits += max(p / g, g / p) < 1.25
            n += 1
    return (math.sqrt(sq / n) * 1000.0, ab / n * 1000.0, math.sqrt(isq / n) * 1000.0, iab / n * 1000.0, hits / n, n)


def naive_si(pred, gt, lam):
    gs = [math.log(p) - math.log(g) for p, g in zip(pred.ravel(), gt.ravel()) if g > 0]
    n = len(gs)
    return sum(x * x for x in gs) / n - lam * (sum(gs) / n) ** 2


def random_pair(rng, h=16, w=20):
    gt = rng.uniform(1.0, 80.0, (h, w))
    gt[rng.random((h, w)) < 0.3] = 0.0
    pred = gt * rng.uniform(0.7, 1.4, (h, w)) + (gt == 0) * rng.uniform(1, 5, (h, w))
    return pred, gt


# (criterion, passed, seconds, detail) rows printed after the run
ACCEPTANCE_LOG = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LOG:
        terminalreporter.section("acceptance criteria")
        for n, ok, secs, detail in sorted(ACCEPTANCE_LOG):
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {secs:8.2f}s  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_samples():
    return toy_dataset(4, seed=7)
