"""8-bit Adam with blockwise-quantized moments, accumulation and clipping.

Moment tensors live as signed 8-bit blocks (one absmax per 256 elements) and
are dequantized, updated, and requantized on every optimizer step, so the
persistent state really is ~2 bytes per trainable parameter. Micro-batch
losses are pre-scaled by 1/target_micro before backward, which makes the
accumulated gradient equal the full-batch gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError
from .quant import Q8_BLOCK, dequantize_q8, quantize_q8

UPDATE_CLIP = 3.0


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    peak_lr: float = 2e-4
    warmup_steps: int = 10
    total_steps: int = 100
    max_grad_norm: float = 1.0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps cannot exceed total_steps")
        if self.warmup_steps < 0 or self.total_steps < 1:
            raise ConfigError("step counts must be non-negative / positive")


@dataclass
class OptState:
    """Per-parameter first/second moments as Q8 block lists, plus step count.

    The second moment is stored in square-root space: the Q8 codes carry
    sqrt(v) and dequantization squares them. Linear 8-bit codes over a block
    otherwise zero out any coordinate below absmax/254, and dividing the first
    moment by sqrt(0) + eps turns one such coordinate into a parameter jump of
    lr/eps; the sqrt transform compresses the block's dynamic range so the
    cutoff sits ~250x lower.
    """

    m: dict = field(default_factory=dict)  # key -> list[Q8Block]
    v: dict = field(default_factory=dict)  # key -> list[Q8Block] of sqrt(v)
    shapes: dict = field(default_factory=dict)
    step_count: int = 0

    @classmethod
    def init(cls, params: dict) -> "OptState":
        state = cls()
        for key, w in params.items():
            zeros = np.zeros(w.shape, dtype=np.float64)
            state.m[key] = quantize_q8(zeros, Q8_BLOCK)
            state.v[key] = quantize_q8(zeros, Q8_BLOCK)
            state.shapes[key] = tuple(w.shape)
        return state


@dataclass
class GradAccumulator:
    target_micro: int
    sums: dict = field(default_factory=dict)
    micro_count: int = 0

    def __post_init__(self):
        if self.target_micro < 1:
            raise ConfigError("target_micro must be >= 1")

    @property
    def ready(self) -> bool:
        return self.micro_count == self.target_micro


def accumulate(acc: GradAccumulator, grads: dict) -> GradAccumulator:
    """Elementwise-sum one micro-batch gradient set into the accumulator."""
    if acc.micro_count >= acc.target_micro:
        raise ConfigError(
            f"accumulator already holds {acc.target_micro} micro-batches"
        )
    if not acc.sums:
        acc.sums = {k: g.copy() for k, g in grads.items()}
    else:
        if set(acc.sums) != set(grads):
            raise ConfigError("gradient key set changed between micro-batches")
        for k, g in grads.items():
            acc.sums[k] += g
    acc.micro_count += 1
    return acc


def clip_global_norm(grads: dict, max_norm: float):
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns (grads, pre_clip_norm); the pre-clip value is what training curves
    log.
    """
    if max_norm <= 0:
        raise ConfigError("max_norm must be positive")
    sq = 0.0
    for g in grads.values():
        if not np.isfinite(g).all():
            raise DivergenceError("non-finite gradient before clipping")
        sq += float((g.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(sq))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def lr_at(step: int, cfg: AdamConfig) -> float:
    """Linear warmup 0 -> peak over warmup_steps, then linear decay to 0 at
    total_steps. Continuous and piecewise linear on [0, total_steps]."""
    if step < 0 or step > cfg.total_steps:
        raise ConfigError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    if cfg.total_steps == cfg.warmup_steps:
        return cfg.peak_lr if step == cfg.warmup_steps else 0.0
    return cfg.peak_lr * (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)


def adam8_step(params: dict, grads: dict, state: OptState, cfg: AdamConfig,
               lr: float) -> None:
    """One Adam update in place: dequantize moments, apply the bias-corrected
    update, requantize. Parameters are float32 state updated through float64
    arithmetic."""
    if lr < 0:
        raise ConfigError("lr must be non-negative")
    t = state.step_count + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for key, w in params.items():
        g = grads[key].astype(np.float64)
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for {key}")
        shape = state.shapes[key]
        m = dequantize_q8(state.m[key], shape)
        v = dequantize_q8(state.v[key], shape) ** 2
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        # exact-arithmetic Adam keeps |update| at O(1); with 8-bit state a
        # second moment can round to zero while the first moment survives,
        # which would turn one coordinate into an update of m/eps. Clamp to
        # the magnitude exact Adam could plausibly produce.
        update = np.clip(update, -UPDATE_CLIP, UPDATE_CLIP)
        if cfg.weight_decay:
            update = update + cfg.weight_decay * w.astype(np.float64)
        new_w = w.astype(np.float64) - lr * update
        if not np.isfinite(new_w).all():
            raise DivergenceError(f"non-finite parameter update for {key}")
        w[...] = new_w.astype(w.dtype)
        state.m[key] = quantize_q8(m, Q8_BLOCK)
        state.v[key] = quantize_q8(np.sqrt(v), Q8_BLOCK)
    state.step_count = t
