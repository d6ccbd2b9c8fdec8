"""Dimension-only model descriptors used for parameter and memory arithmetic.

A ModelShape never allocates tensors; it just records how many layers there
are and the (d_in, d_out) of every adaptable projection, so that trainable
counts and byte budgets can be computed for models far larger than anything
this package actually instantiates.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError

TARGET_ORDER = ("q", "k", "v", "o", "gate", "up", "down")

NOMINAL_7B = 7_000_000_000


@dataclass(frozen=True)
class ModelShape:
    name: str
    n_layers: int
    d_model: int
    vocab_size: int
    context_len: int
    projections: dict  # target -> (d_in, d_out)

    def projection_dims(self, target: str) -> tuple[int, int]:
        if target not in self.projections:
            raise ConfigError(f"unknown projection target {target!r}")
        return self.projections[target]

    def total_params(self) -> int:
        """Full dense parameter count: embeddings, head, projections, norms."""
        per_layer = sum(di * do for di, do in self.projections.values())
        norms = self.n_layers * 2 * self.d_model + self.d_model
        return (
            2 * self.vocab_size * self.d_model  # embeddings + untied head
            + self.n_layers * per_layer
            + norms
        )


def mistral7b_shape() -> ModelShape:
    """Projection map of the 7B-class architecture used for accounting only."""
    d = 4096
    kv = 1024
    mlp = 14336
    return ModelShape(
        name="mistral7b",
        n_layers=32,
        d_model=d,
        vocab_size=32000,
        context_len=2048,
        projections={
            "q": (d, d),
            "k": (d, kv),
            "v": (d, kv),
            "o": (d, d),
            "gate": (d, mlp),
            "up": (d, mlp),
            "down": (mlp, d),
        },
    )


def shape_from_config(config) -> ModelShape:
    """Derive the projection map from a concrete ModelConfig."""
    d = config.d_model
    kv = config.n_kv_heads * (config.d_model // config.n_heads)
    mlp = config.mlp_hidden
    return ModelShape(
        name="mini",
        n_layers=config.n_layers,
        d_model=d,
        vocab_size=config.vocab_size,
        context_len=config.context_len,
        projections={
            "q": (d, d),
            "k": (d, kv),
            "v": (d, kv),
            "o": (d, d),
            "gate": (d, mlp),
            "up": (d, mlp),
            "down": (mlp, d),
        },
    )
