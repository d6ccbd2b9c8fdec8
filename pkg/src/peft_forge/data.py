"""Corpus records, byte-level tokenization, chat rendering, epoch batching.

The tokenizer is byte-level: token ids 0-255 are raw byte values, with BOS,
EOS and PAD appended as ids 256-258. That gives an exact round-trip on
arbitrary UTF-8 with zero training, which is all a desk-scale run needs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SchemaError
from .fsio import atomic_write_text

BOS_ID = 256
EOS_ID = 257
PAD_ID = 258
VOCAB_SIZE = 259

TOPICS = ("applications", "visas", "scholarships")

INSTRUCTION_PREFIX = "### Instruction:\n"
RESPONSE_MARKER = "\n\n### Response:\n"


@dataclass
class Turn:
    role: str
    content: str


@dataclass
class ConversationRecord:
    id: str
    topic: str
    turns: list = field(default_factory=list)

    def to_json_obj(self) -> dict:
        return {
            "id": self.id,
            "topic": self.topic,
            "turns": [{"role": t.role, "content": t.content} for t in self.turns],
        }


def validate_record(raw) -> ConversationRecord:
    """Enforce the record schema, rejecting with the first violated rule."""
    if not isinstance(raw, dict):
        raise SchemaError("record must be a JSON object")
    rec_id = raw.get("id")
    if not isinstance(rec_id, str) or not rec_id:
        raise SchemaError("id must be a non-empty string")
    topic = raw.get("topic")
    if topic not in TOPICS:
        raise SchemaError(f"topic must be one of {TOPICS}, got {topic!r}")
    turns = raw.get("turns")
    if not isinstance(turns, list) or len(turns) < 2:
        raise SchemaError("turns must be a list with at least 2 entries")
    parsed = []
    for i, t in enumerate(turns):
        if not isinstance(t, dict):
            raise SchemaError(f"turn {i} must be an object")
        role, content = t.get("role"), t.get("content")
        if role not in ("user", "advisor"):
            raise SchemaError(f"turn {i}: role must be user or advisor")
        if not isinstance(content, str):
            raise SchemaError(f"turn {i}: content must be a string")
        if role == "advisor" and not content:
            raise SchemaError("advisor turns non-empty")
        parsed.append(Turn(role=role, content=content))
    if parsed[0].role != "user":
        raise SchemaError("first turn role must be user")
    return ConversationRecord(id=rec_id, topic=topic, turns=parsed)


def write_corpus(records, path) -> None:
    lines = [json.dumps(r.to_json_obj(), ensure_ascii=False) for r in records]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_corpus(path) -> list:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            records.append(validate_record(raw))
    if not records:
        raise SchemaError(f"{path}: no records found")
    return records


# --- byte-level codec --------------------------------------------------------


def encode_text(text: str) -> list:
    return list(text.encode("utf-8"))


def decode_tokens(ids) -> str:
    out = bytearray()
    for i in ids:
        i = int(i)
        if i < 0 or i >= VOCAB_SIZE:
            raise SchemaError(f"token id {i} outside vocabulary")
        if i < 256:
            out.append(i)
    return out.decode("utf-8", errors="replace")


# --- training example rendering ----------------------------------------------


@dataclass
class TokenizedExample:
    tokens: np.ndarray  # int64
    label_mask: np.ndarray  # bool, True where the token contributes to loss


def render_prompt_tokens(user_text: str) -> list:
    """BOS + instruction scaffold, ready for generation."""
    return [BOS_ID] + encode_text(
        INSTRUCTION_PREFIX + user_text + RESPONSE_MARKER
    )


def render_example(rec: ConversationRecord, context_len: int) -> TokenizedExample:
    """First user turn + first advisor turn as a masked training sequence.

    Loss applies only to response bytes and the end token; the sequence is
    truncated to context_len with EOS always kept as the final token.
    """
    user = next((t for t in rec.turns if t.role == "user"), None)
    advisor = next((t for t in rec.turns if t.role == "advisor"), None)
    if user is None or advisor is None:
        raise SchemaError(f"record {rec.id} lacks a user/advisor pair")
    head = render_prompt_tokens(user.content)
    if len(head) >= context_len:
        raise SchemaError(
            f"record {rec.id}: instruction alone exceeds context_len {context_len}"
        )
    body = encode_text(advisor.content)
    tokens = (head + body)[: context_len - 1] + [EOS_ID]
    mask = [False] * len(head) + [True] * (len(tokens) - len(head))
    return TokenizedExample(
        tokens=np.asarray(tokens, dtype=np.int64),
        label_mask=np.asarray(mask, dtype=bool),
    )


# --- epoch batching ------------------------------------------------------------


@dataclass
class MicroBatch:
    tokens: np.ndarray  # (B, L) int64, PAD-filled
    label_mask: np.ndarray  # (B, L) bool, False on PAD


def _pad_group(group) -> MicroBatch:
    longest = max(ex.tokens.size for ex in group)
    tokens = np.full((len(group), longest), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(group), longest), dtype=bool)
    for i, ex in enumerate(group):
        tokens[i, : ex.tokens.size] = ex.tokens
        mask[i, : ex.label_mask.size] = ex.label_mask
    return MicroBatch(tokens=tokens, label_mask=mask)


def make_epoch_batches(examples, profile, epoch: int, seed: int) -> list:
    """Shuffle per (seed, epoch) and group into optimizer steps.

    Returns a list of steps; each step is a list of ``grad_accum``
    micro-batches of ``per_device_batch`` examples padded to their longest
    member. The trailing group that cannot fill a whole optimizer step is
    dropped, so steps-per-epoch = floor(N / effective_batch).
    """
    if profile.per_device_batch < 1:
        raise SchemaError("per_device_batch must be >= 1")
    effective = profile.per_device_batch * profile.grad_accum * profile.devices
    n_steps = len(examples) // effective
    if n_steps == 0:
        raise SchemaError(
            f"dataset of {len(examples)} examples is smaller than one "
            f"effective batch ({effective})"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    order = rng.permutation(len(examples))
    steps = []
    for s in range(n_steps):
        chunk = order[s * effective : (s + 1) * effective]
        micros = []
        for m in range(profile.grad_accum * profile.devices):
            ids = chunk[m * profile.per_device_batch : (m + 1) * profile.per_device_batch]
            micros.append(_pad_group([examples[i] for i in ids]))
        steps.append(micros)
    return steps
