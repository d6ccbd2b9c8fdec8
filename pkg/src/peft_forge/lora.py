"""Low-rank adapters: trainable (A, B) factor pairs on frozen projections.

An adapter adds scaling * B(Ax) to the output of one projection, where
A is r x d_in, B is d_out x r and scaling = alpha / r. B starts at zero so a
fresh adapter set leaves the base model's outputs untouched. Adapter state is
kept in float32 (the checkpoint wire type); all arithmetic on it runs in
float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .shapes import ModelShape, TARGET_ORDER


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    targets: tuple = TARGET_ORDER
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if not self.targets:
            raise ConfigError("targets must be non-empty")
        for t in self.targets:
            if t not in TARGET_ORDER:
                raise ConfigError(f"unknown target name {t!r}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


@dataclass
class LoraAdapter:
    a: np.ndarray  # (r, d_in) float32
    b: np.ndarray  # (d_out, r) float32
    scaling: float

    @property
    def rank(self) -> int:
        return self.a.shape[0]


def lora_init(shape: ModelShape, config: LoraConfig) -> dict:
    """One adapter per (layer, target): A ~ N(0, init_std^2), B = 0.

    Each adapter draws from its own seed stream derived from (config.seed,
    layer, target index), so the result is independent of iteration order.
    """
    adapters = {}
    for layer in range(shape.n_layers):
        for target in config.targets:
            d_in, d_out = shape.projection_dims(target)
            seq = np.random.SeedSequence(
                [config.seed, layer, TARGET_ORDER.index(target)]
            )
            rng = np.random.default_rng(seq)
            a = rng.normal(0.0, config.init_std, size=(config.rank, d_in))
            adapters[(layer, target)] = LoraAdapter(
                a=a.astype(np.float32),
                b=np.zeros((d_out, config.rank), dtype=np.float32),
                scaling=config.scaling,
            )
    return adapters


def lora_contribution(adapter: LoraAdapter, x: np.ndarray) -> np.ndarray:
    """scaling * B(Ax) for row-major activations x of shape (..., d_in)."""
    if x.shape[-1] != adapter.a.shape[1]:
        raise ConfigError(
            f"input width {x.shape[-1]} != adapter d_in {adapter.a.shape[1]}"
        )
    u = x @ adapter.a.T.astype(np.float64)
    return adapter.scaling * (u @ adapter.b.T.astype(np.float64))


def lora_merge(base_weight: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """Fold the adapter into a dense weight: W' = W + scaling * B A."""
    d_out, d_in = adapter.b.shape[0], adapter.a.shape[1]
    if base_weight.shape != (d_out, d_in):
        raise ConfigError(
            f"weight shape {base_weight.shape} incompatible with adapter "
            f"({d_out}, {d_in})"
        )
    delta = adapter.scaling * (
        adapter.b.astype(np.float64) @ adapter.a.astype(np.float64)
    )
    return base_weight + delta


def lora_param_count(
    shape: ModelShape, config: LoraConfig, nominal_total: int | None = None
) -> dict:
    """Trainable-parameter arithmetic: sum of r * (d_in + d_out) per target
    per layer, plus the ratio against a nominal dense parameter count."""
    per_layer = sum(
        config.rank * (di + do)
        for di, do in (shape.projection_dims(t) for t in config.targets)
    )
    trainable = shape.n_layers * per_layer
    denom = nominal_total if nominal_total is not None else shape.total_params()
    return {
        "trainable": trainable,
        "ratio_vs_nominal": trainable / denom,
    }


# --- serialization ----------------------------------------------------------
# Per adapter: {layer u32, target id u8, r u32, alpha f32, A then B as
# little-endian f32 row-major}. Dims come from the model shape on read.


def serialize_adapters(adapters: dict) -> bytes:
    parts = [struct.pack("<I", len(adapters))]
    for (layer, target) in sorted(adapters, key=lambda k: (k[0], TARGET_ORDER.index(k[1]))):
        ad = adapters[(layer, target)]
        alpha = ad.scaling * ad.rank
        parts.append(
            struct.pack("<IBIf", layer, TARGET_ORDER.index(target), ad.rank, alpha)
        )
        parts.append(np.ascontiguousarray(ad.a, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(ad.b, dtype="<f4").tobytes())
    return b"".join(parts)


def deserialize_adapters(buf: bytes, shape: ModelShape, offset: int = 0):
    """Returns (adapters, bytes consumed)."""
    (count,) = struct.unpack_from("<I", buf, offset)
    off = offset + 4
    adapters = {}
    for _ in range(count):
        layer, target_id, rank, alpha = struct.unpack_from("<IBIf", buf, off)
        off += 13
        target = TARGET_ORDER[target_id]
        d_in, d_out = shape.projection_dims(target)
        a = np.frombuffer(buf, dtype="<f4", count=rank * d_in, offset=off).copy()
        off += 4 * rank * d_in
        b = np.frombuffer(buf, dtype="<f4", count=d_out * rank, offset=off).copy()
        off += 4 * d_out * rank
        adapters[(layer, target)] = LoraAdapter(
            a=a.reshape(rank, d_in),
            b=b.reshape(d_out, rank),
            scaling=float(alpha) / rank,
        )
    return adapters, off - offset
