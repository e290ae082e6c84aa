"""SGD with cosine restarts (shared child weights) and Adam (controller)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ssplab.autodiff.tensor import Tensor


@dataclass(frozen=True)
class SgdConfig:
    lr_max: float = 0.05
    lr_min: float = 0.0005
    period_T: int = 10
    l2_coeff: float = 0.00025
    grad_clip_norm: float = 5.0
    momentum: float = 0.9

    def __post_init__(self):
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if self.period_T < 1:
            raise ValueError("period_T must be >= 1")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass
class AdamState:
    """First/second moment accumulators, keyed by parameter identity."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def cosine_lr(t: int, cfg: SgdConfig) -> float:
    """Cosine-annealed learning rate that restarts every ``cfg.period_T`` epochs."""
    if t < 0:
        raise ValueError("epoch index must be non-negative")
    phase = (t % cfg.period_T) / cfg.period_T
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * phase))


def global_norm(arrays: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(a, a)) for a in arrays))


def _check(params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    out = []
    for p, g in zip(params, grads):
        g = np.zeros_like(p.data) if g is None else np.asarray(g)
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} does not match param shape {p.shape}")
        out.append(g)
    return out


def sgd_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    t: int,
    cfg: SgdConfig,
    velocity: dict | None = None,
    lr: float | None = None,
) -> float:
    """One clipped, L2-regularised (momentum) SGD update, applied in place.

    The L2 term is folded into each gradient first; the combined gradient is
    then clipped to ``cfg.grad_clip_norm`` in global norm. ``velocity`` holds
    momentum buffers across calls and is required when ``cfg.momentum > 0``.
    Returns the pre-clip global norm.
    """
    grads = _check(params, grads)
    effective = [g + cfg.l2_coeff * p.data if cfg.l2_coeff else g for p, g in zip(params, grads)]
    norm = global_norm(effective)
    if not math.isfinite(norm):
        raise FloatingPointError("non-finite gradient in sgd_step")
    if norm > cfg.grad_clip_norm:
        scale = cfg.grad_clip_norm / norm
        effective = [g * scale for g in effective]
    step = cosine_lr(t, cfg) if lr is None else lr
    if cfg.momentum and velocity is None:
        raise ValueError("momentum SGD needs a velocity dict")
    for p, g in zip(params, effective):
        if cfg.momentum:
            buf = velocity.get(id(p))
            buf = g.copy() if buf is None else cfg.momentum * buf + g
            velocity[id(p)] = buf
            g = buf
        p.data -= (step * g).astype(p.data.dtype, copy=False)
    return norm


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    step_count: int,
    state: AdamState,
    cfg: AdamConfig,
) -> None:
    """Bias-corrected Adam update; ``step_count`` is 1 on the first call."""
    if step_count < 1:
        raise ValueError("step_count starts at 1")
    grads = _check(params, grads)
    c1 = 1.0 - cfg.beta1**step_count
    c2 = 1.0 - cfg.beta2**step_count
    for p, g in zip(params, grads):
        key = id(p)
        m = state.m.get(key)
        v = state.v.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        state.m[key], state.v[key] = m, v
        update = cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data -= update.astype(p.data.dtype, copy=False)
