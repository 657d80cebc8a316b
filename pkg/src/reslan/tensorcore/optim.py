"""Adam with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DivergenceError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be non-negative")


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def optimizer_step(params, grads, state: AdamState, cfg: AdamConfig):
    """One Adam step on plain arrays; returns ``(new_params, state)``.

    ``grads`` entries may be None, meaning zero gradient.
    """
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("optimizer state does not match the parameter list")
    t = state.step + 1
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient", step=t)
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new_params = []
    for i, p in enumerate(params):
        g = np.zeros_like(p) if grads[i] is None else grads[i]
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"gradient/state shape mismatch for parameter {i}: {g.shape} vs {p.shape}")
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        new_params.append(p * (1.0 - cfg.lr * cfg.weight_decay) - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps))
    state.step = t
    return new_params, state


class Adam:
    """Stateful wrapper updating Tensor parameters in place."""

    def __init__(self, params: list[Tensor], cfg: AdamConfig = AdamConfig()):
        self.params = list(params)
        self.cfg = cfg
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        new, self.state = optimizer_step(
            [p.data for p in self.params], [p.grad for p in self.params], self.state, self.cfg
        )
        for p, value in zip(self.params, new):
            p.data = value
