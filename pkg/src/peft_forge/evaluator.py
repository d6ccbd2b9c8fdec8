"""Held-out loss/perplexity, markdown-compliance rules, loss-reduction math."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import forward_loss

_HEADING_RE = re.compile(r"^(#{1,6}) \S")
_BULLET_RE = re.compile(r"^([-*]) ")


@dataclass
class ComplianceReport:
    heading_present: bool
    bullet_list_present: bool
    no_heading_jump: bool
    fences_balanced: bool

    @property
    def compliant(self) -> bool:
        return (
            self.heading_present
            and self.bullet_list_present
            and self.no_heading_jump
            and self.fences_balanced
        )


def check_markdown(text: str) -> ComplianceReport:
    """Apply the four formatting rules; reports, never raises.

    R1: at least one ATX heading (1-6 '#', a space, then non-space).
    R2: at least two consecutive lines with the same bullet marker.
    R3: consecutive heading levels never increase by more than one.
    R4: lines starting with ``` occur an even number of times.
    """
    lines = text.splitlines()
    heading_levels = []
    bullet_run = False
    prev_marker = None
    fence_count = 0
    for line in lines:
        m = _HEADING_RE.match(line)
        if m:
            heading_levels.append(len(m.group(1)))
        b = _BULLET_RE.match(line)
        if b:
            if prev_marker == b.group(1):
                bullet_run = True
            prev_marker = b.group(1)
        else:
            prev_marker = None
        if line.startswith("```"):
            fence_count += 1
    no_jump = all(
        later - earlier <= 1
        for earlier, later in zip(heading_levels, heading_levels[1:])
    )
    return ComplianceReport(
        heading_present=bool(heading_levels),
        bullet_list_present=bullet_run,
        no_heading_jump=no_jump,
        fences_balanced=fence_count % 2 == 0,
    )


def compliance_rate(texts) -> float:
    texts = list(texts)
    if not texts:
        raise ConfigError("no responses supplied for compliance checking")
    return sum(check_markdown(t).compliant for t in texts) / len(texts)


def loss_reduction(initial: float, final: float) -> float:
    """(1 - final/initial) * 100."""
    if initial <= 0:
        raise ConfigError(f"initial loss must be positive, got {initial}")
    return (1.0 - final / initial) * 100.0


def split_indices(n: int, split_fraction: float, seed: int):
    """Deterministic held-out split: (held_out, remainder) index arrays."""
    if not 0 < split_fraction < 1:
        raise ConfigError("split_fraction must lie in (0, 1)")
    k = int(n * split_fraction)
    if k < 1:
        raise ConfigError(
            f"split of {split_fraction} on {n} examples holds no record"
        )
    order = np.random.default_rng(np.random.SeedSequence([seed])).permutation(n)
    return order[:k], order[k:]


def eval_split_loss(model, adapters, examples, split_fraction: float,
                    seed: int) -> dict:
    """Token-level mean cross-entropy over a seed-deterministic held-out set,
    and its exponential (perplexity)."""
    held, _ = split_indices(len(examples), split_fraction, seed)
    total_ce = 0.0
    total_tokens = 0
    for i in held:
        ex = examples[i]
        out, _ = forward_loss(
            model, adapters, ex.tokens[None, :], ex.label_mask[None, :]
        )
        total_ce += out.loss * out.token_count
        total_tokens += out.token_count
    loss = total_ce / total_tokens
    return {"loss": float(loss), "perplexity": float(np.exp(loss))}
