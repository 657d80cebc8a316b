"""Central finite-difference checks for every differentiable op."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .tensor import Tape, Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger of the two max magnitudes."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def _scalarize(out: Tensor, weights: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(out, weights))


def numeric_gradient(fn: Callable, arrays: list, which: int, weights: np.ndarray, h: float = 1e-6) -> np.ndarray:
    base = [np.array(a, dtype=np.float64, copy=True) for a in arrays]
    target = base[which]
    grad = np.zeros_like(target)
    with no_grad():
        for idx in np.ndindex(target.shape):
            orig = target[idx]
            target[idx] = orig + h
            up = _scalarize(fn(*[Tensor(a) for a in base]), weights).item()
            target[idx] = orig - h
            down = _scalarize(fn(*[Tensor(a) for a in base]), weights).item()
            target[idx] = orig
            grad[idx] = (up - down) / (2 * h)
    return grad


def check_gradients(fn: Callable, arrays: list, seed: int = 0, h: float = 1e-6) -> float:
    """Worst relative error over all inputs of ``fn`` at the given point."""
    with no_grad():
        out_shape = fn(*[Tensor(a) for a in arrays]).shape
    weights = np.random.default_rng(seed).uniform(0.5, 1.5, size=out_shape)
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = _scalarize(fn(*tensors), weights)
        tape.backward(loss)
    worst = 0.0
    for i, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, numeric_gradient(fn, arrays, i, weights, h)))
    return worst


def sampled_gradient_check(
    loss_fn: Callable[[], Tensor], params: list[Tensor], n: int = 20, seed: int = 0, h: float = 1e-6, floor: float = 1e-6
) -> list[tuple[int, tuple, float, float, float]]:
    """Compare backprop with central differences on ``n`` random parameter entries.

    ``loss_fn`` must rebuild the scalar loss from the current parameter data.
    Returns ``(param index, entry, analytic, numeric, rel. error)`` rows; the
    error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        tape.backward(loss_fn())
    rng = np.random.default_rng(seed)
    sizes = np.array([p.size for p in params], dtype=np.float64)
    rows = []
    for _ in range(n):
        i = int(rng.choice(len(params), p=sizes / sizes.sum()))
        idx = tuple(int(rng.integers(s)) for s in params[i].shape)
        analytic = 0.0 if params[i].grad is None else float(params[i].grad[idx])
        orig = params[i].data[idx]
        with no_grad():
            params[i].data[idx] = orig + h
            up = loss_fn().item()
            params[i].data[idx] = orig - h
            down = loss_fn().item()
        params[i].data[idx] = orig
        numeric = (up - down) / (2 * h)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        rows.append((i, idx, analytic, numeric, err))
    return rows


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    # well separated values: max-pool has no ties
    return (rng.permutation(int(np.prod(shape))).reshape(shape) * 0.1 + rng.uniform(0, 0.01, shape))


def _sparse_case(rng):
    x = rng.normal(size=(2, 2, 6, 5))
    m = (rng.random((2, 1, 6, 5)) < 0.4).astype(float)
    m[0, 0, :3, :] = 0.0  # includes empty receptive fields
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    return (lambda x_, w_, b_: ops.sparse_conv2d(x_, m, w_, b_, stride=1, padding=1)[0]), [x, w, b]


def _cases(rng) -> dict:
    return {
        "add": (ops.add, [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(1, 3, 1, 1))]),
        "sub": (ops.sub, [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
        "mul": (ops.mul, [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 1, 1))]),
        "div": (ops.div, [rng.normal(size=(3, 4)), rng.uniform(0.5, 2.0, size=(3, 4))]),
        "neg": (ops.neg, [rng.normal(size=(3, 4))]),
        "reshape": (lambda a: ops.reshape(a, (4, 6)), [rng.normal(size=(2, 3, 4))]),
        "exp": (ops.exp, [rng.normal(size=(3, 4))]),
        "log": (ops.log, [rng.uniform(0.2, 3.0, size=(3, 4))]),
        "relu": (ops.relu, [_away_from_zero(rng, (3, 5))]),
        "sum": (lambda a: ops.sum(a, axis=(1, 2)), [rng.normal(size=(2, 3, 4))]),
        "mean": (lambda a: ops.mean(a), [rng.normal(size=(2, 3, 4))]),
        "flatten": (ops.flatten, [rng.normal(size=(2, 3, 2, 2))]),
        "concat": (lambda a, b: ops.concat([a, b], axis=1), [rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 3, 3, 3))]),
        "dense": (ops.dense, [rng.normal(size=(4, 5)), rng.normal(size=(3, 5)), rng.normal(size=3)]),
        "conv2d": (
            lambda x, w, b: ops.conv2d(x, w, b, stride=1, padding=1),
            [rng.normal(size=(2, 2, 5, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)],
        ),
        "conv2d_stride2": (
            lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=0),
            [rng.normal(size=(2, 2, 7, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)],
        ),
        "sparse_conv2d": _sparse_case(rng),
        "avgpool2d": (lambda x: ops.avgpool2d(x, 2), [rng.normal(size=(2, 2, 4, 5))]),
        "maxpool2d": (lambda x: ops.maxpool2d(x, 2), [_distinct(rng, (2, 2, 4, 6))]),
        "upsample2d": (lambda x: ops.upsample2d(x, 2), [rng.normal(size=(2, 2, 3, 3))]),
    }


@dataclass(frozen=True)
class GradcheckResult:
    op: str
    error: float
    passed: bool


def run_suite(seed: int = 0, tol: float = 1e-4) -> list[GradcheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, arrays) in _cases(rng).items():
        err = check_gradients(fn, arrays, seed=seed)
        results.append(GradcheckResult(name, err, err < tol))
    return results


def format_table(results: list[GradcheckResult]) -> str:
    lines = [f"{'op':<16} {'rel.error':>12}  status"]
    for r in results:
        lines.append(f"{r.op:<16} {r.error:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
