"""Decoder-only toy transformer ("MiniAdvisor") over NF4-frozen base weights.

The base weights are drawn once from a seeded generator, quantized to
blockwise NF4 and never updated; the only trainable parameters live in the
low-rank adapters attached to the seven projection targets. Forward and
backward passes are written out by hand in float64 numpy, which keeps
gradients exact enough to verify against central finite differences and makes
recomputation (gradient checkpointing) bitwise-identical to the retained-tape
path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError
from .lora import LoraAdapter, lora_contribution
from .quant import SCALE_DQ, QuantizedTensor, dequantize_nf4, quantize_nf4
from .shapes import shape_from_config

# Base weights are frozen after quantization, so their scales decide what the
# adapters can ever express. Projections use the standard 1/sqrt(fan_in):
# anything much smaller leaves attention scores and the gated MLP operating in
# a near-linear dead zone at these widths. The head is the hard ceiling: the
# largest reachable logit is head_std * d_model (norm-constrained final
# hidden state against a frozen readout), while the untrained loss sits at
# ln(vocab) + (head_std * sqrt(d_model))^2 / 2; 1/sqrt(64) keeps the
# untrained model near-uniform yet leaves logits of ~4 reachable.
HEAD_INIT_STD = 0.125
EMBED_INIT_STD = 0.125


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 259
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    n_kv_heads: int = 2
    mlp_hidden: int = 128
    context_len: int = 256
    norm_eps: float = 1e-5
    rope_base: float = 10000.0
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigError(
                f"n_heads {self.n_heads} not divisible by n_kv_heads {self.n_kv_heads}"
            )
        if self.context_len < 2:
            raise ConfigError("context_len must be >= 2")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ConfigError("head dimension must be even for rotary embedding")
        if self.n_layers < 1 or self.vocab_size < 2:
            raise ConfigError("need at least 1 layer and 2 vocabulary entries")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.head_dim


def mini_advisor_config(seed: int = 0) -> ModelConfig:
    """Smallest configuration exercising grouped-query attention and the full
    gated-MLP projection set."""
    return ModelConfig(seed=seed)


@dataclass
class BatchLoss:
    loss: float
    token_count: int


@dataclass
class LayerCache:
    x_in: np.ndarray
    attn_norm: tuple
    a: np.ndarray
    u_q: np.ndarray | None
    u_k: np.ndarray | None
    u_v: np.ndarray | None
    q_r: np.ndarray
    k_r: np.ndarray
    v: np.ndarray
    p: np.ndarray
    ctx: np.ndarray
    u_o: np.ndarray | None
    x_mid: np.ndarray
    mlp_norm: tuple
    m: np.ndarray
    u_gate: np.ndarray | None
    u_up: np.ndarray | None
    u_down: np.ndarray | None
    gate: np.ndarray
    up: np.ndarray
    act: np.ndarray


@dataclass
class ForwardTape:
    inputs: np.ndarray
    targets: np.ndarray
    tmask: np.ndarray
    layer_inputs: list = field(default_factory=list)
    caches: list | None = None
    x_last: np.ndarray | None = None
    grad_checkpoint: bool = False
    model_ref: object = None
    adapter_keys: frozenset = frozenset()
    loss: float = 0.0
    token_count: int = 0


class QuantizedModel:
    """Frozen NF4 base weights plus adapter attachment points.

    ``weights`` holds the QuantizedTensor for every base tensor; ``dense``
    caches the dequantized float64 image used by compute. Dequantization is
    the only path from the quantized store to arithmetic.
    """

    def __init__(self, config: ModelConfig, weights: dict):
        self.config = config
        self.shape = shape_from_config(config)
        self.weights: dict[str, QuantizedTensor] = weights
        self.dense = {name: dequantize_nf4(q) for name, q in weights.items()}

    def w(self, name: str) -> np.ndarray:
        return self.dense[name]


def base_weight_order(config: ModelConfig) -> list:
    """Deterministic draw order: (name, shape, init std or None for ones)."""
    d, kv, mlp, v = config.d_model, config.kv_dim, config.mlp_hidden, config.vocab_size
    proj = 1.0 / np.sqrt(d)
    entries = [("embed", (v, d), EMBED_INIT_STD)]
    for i in range(config.n_layers):
        entries.append((f"layer{i}.attn_norm", (d,), None))
        entries.append((f"layer{i}.q", (d, d), proj))
        entries.append((f"layer{i}.k", (kv, d), proj))
        entries.append((f"layer{i}.v", (kv, d), proj))
        entries.append((f"layer{i}.o", (d, d), proj))
        entries.append((f"layer{i}.mlp_norm", (d,), None))
        entries.append((f"layer{i}.gate", (mlp, d), proj))
        entries.append((f"layer{i}.up", (mlp, d), proj))
        entries.append((f"layer{i}.down", (d, mlp), 1.0 / np.sqrt(mlp)))
    entries.append(("final_norm", (d,), None))
    entries.append(("head", (v, d), HEAD_INIT_STD))
    return entries


def draw_base_weights(config: ModelConfig) -> dict:
    """Raw (pre-quantization) base weights; norm gains start at one."""
    rng = np.random.default_rng(config.seed)
    raw = {}
    for name, shape, std in base_weight_order(config):
        if std is None:
            raw[name] = np.ones(shape, dtype=np.float64)
        else:
            raw[name] = rng.normal(0.0, std, size=shape)
    return raw


def model_init(config: ModelConfig) -> QuantizedModel:
    raw = draw_base_weights(config)
    weights = {
        name: quantize_nf4(w, scale_encoding=SCALE_DQ) for name, w in raw.items()
    }
    return QuantizedModel(config, weights)


# --- forward / backward building blocks -------------------------------------


def _rmsnorm_forward(x, g, eps):
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    xhat = x * inv
    return xhat * g, (xhat, inv)


def _rmsnorm_backward(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dot = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return inv * (dxhat - xhat * dot)


def _proj_forward(x, w, adapter: LoraAdapter | None):
    y = x @ w.T
    u = None
    if adapter is not None:
        u = x @ adapter.a.T.astype(np.float64)
        y = y + adapter.scaling * (u @ adapter.b.T.astype(np.float64))
    return y, u


def _proj_backward(dy, x, w, adapter, u, grads, grad_key):
    dx = dy @ w
    if adapter is not None:
        a64 = adapter.a.astype(np.float64)
        b64 = adapter.b.astype(np.float64)
        du = adapter.scaling * (dy @ b64)
        dy_flat = dy.reshape(-1, dy.shape[-1])
        u_flat = u.reshape(-1, u.shape[-1])
        x_flat = x.reshape(-1, x.shape[-1])
        du_flat = du.reshape(-1, du.shape[-1])
        grads[grad_key + ("b",)] = adapter.scaling * (dy_flat.T @ u_flat)
        grads[grad_key + ("a",)] = du_flat.T @ x_flat
        dx = dx + du @ a64
    return dx


def _rope_tables(t_len, head_dim, base):
    half = head_dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.arange(t_len, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(angles), np.sin(angles)


def _rope_apply(x, cos, sin):
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def _rope_backward(d, cos, sin):
    half = d.shape[-1] // 2
    d1, d2 = d[..., :half], d[..., half:]
    return np.concatenate([d1 * cos + d2 * sin, -d1 * sin + d2 * cos], axis=-1)


def _split_heads(x, n_heads):
    b, t, _ = x.shape
    return x.reshape(b, t, n_heads, -1).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)


def _softmax_rows(scores):
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _layer_forward(model: QuantizedModel, layer: int, adapters: dict, x_in):
    cfg = model.config
    pfx = f"layer{layer}."
    ad = {t: adapters.get((layer, t)) for t in ("q", "k", "v", "o", "gate", "up", "down")}

    a, attn_norm = _rmsnorm_forward(x_in, model.w(pfx + "attn_norm"), cfg.norm_eps)
    q, u_q = _proj_forward(a, model.w(pfx + "q"), ad["q"])
    k, u_k = _proj_forward(a, model.w(pfx + "k"), ad["k"])
    v_out, u_v = _proj_forward(a, model.w(pfx + "v"), ad["v"])

    t_len = x_in.shape[1]
    cos, sin = _rope_tables(t_len, cfg.head_dim, cfg.rope_base)
    qh = _split_heads(q, cfg.n_heads)
    kh = _split_heads(k, cfg.n_kv_heads)
    vh = _split_heads(v_out, cfg.n_kv_heads)
    q_r = _rope_apply(qh, cos, sin)
    k_r = _rope_apply(kh, cos, sin)

    groups = cfg.n_heads // cfg.n_kv_heads
    k_exp = np.repeat(k_r, groups, axis=1)
    v_exp = np.repeat(vh, groups, axis=1)
    scores = q_r @ k_exp.swapaxes(-1, -2) / np.sqrt(cfg.head_dim)
    causal = np.triu(np.full((t_len, t_len), -np.inf), k=1)
    p = _softmax_rows(scores + causal)
    ctx = _merge_heads(p @ v_exp)

    o, u_o = _proj_forward(ctx, model.w(pfx + "o"), ad["o"])
    x_mid = x_in + o

    m, mlp_norm = _rmsnorm_forward(x_mid, model.w(pfx + "mlp_norm"), cfg.norm_eps)
    gate, u_gate = _proj_forward(m, model.w(pfx + "gate"), ad["gate"])
    up, u_up = _proj_forward(m, model.w(pfx + "up"), ad["up"])
    sig = 1.0 / (1.0 + np.exp(-gate))
    act = (gate * sig) * up
    down, u_down = _proj_forward(act, model.w(pfx + "down"), ad["down"])
    x_out = x_mid + down

    cache = LayerCache(
        x_in=x_in, attn_norm=attn_norm, a=a, u_q=u_q, u_k=u_k, u_v=u_v,
        q_r=q_r, k_r=k_r, v=vh, p=p, ctx=ctx, u_o=u_o, x_mid=x_mid,
        mlp_norm=mlp_norm, m=m, u_gate=u_gate, u_up=u_up, u_down=u_down,
        gate=gate, up=up, act=act,
    )
    return x_out, cache


def _layer_backward(model, layer, adapters, cache: LayerCache, dx_out, grads):
    cfg = model.config
    pfx = f"layer{layer}."
    ad = {t: adapters.get((layer, t)) for t in ("q", "k", "v", "o", "gate", "up", "down")}

    # MLP branch
    dact = _proj_backward(
        dx_out, cache.act, model.w(pfx + "down"), ad["down"], cache.u_down,
        grads, (layer, "down"),
    )
    sig = 1.0 / (1.0 + np.exp(-cache.gate))
    silu = cache.gate * sig
    dup = dact * silu
    dgate = dact * cache.up * sig * (1.0 + cache.gate * (1.0 - sig))
    dm = _proj_backward(
        dgate, cache.m, model.w(pfx + "gate"), ad["gate"], cache.u_gate,
        grads, (layer, "gate"),
    )
    dm += _proj_backward(
        dup, cache.m, model.w(pfx + "up"), ad["up"], cache.u_up, grads, (layer, "up")
    )
    dx_mid = dx_out + _rmsnorm_backward(dm, model.w(pfx + "mlp_norm"), cache.mlp_norm)

    # attention branch
    dctx = _proj_backward(
        dx_mid, cache.ctx, model.w(pfx + "o"), ad["o"], cache.u_o, grads, (layer, "o")
    )
    b, t_len, _ = dctx.shape
    dctx_h = _split_heads(dctx, cfg.n_heads)
    groups = cfg.n_heads // cfg.n_kv_heads
    k_exp = np.repeat(cache.k_r, groups, axis=1)
    v_exp = np.repeat(cache.v, groups, axis=1)

    dp = dctx_h @ v_exp.swapaxes(-1, -2)
    dv_exp = cache.p.swapaxes(-1, -2) @ dctx_h
    dscores = cache.p * (dp - (dp * cache.p).sum(axis=-1, keepdims=True))
    dscores /= np.sqrt(cfg.head_dim)
    dq_r = dscores @ k_exp
    dk_exp = dscores.swapaxes(-1, -2) @ cache.q_r

    kh_dim = cfg.n_kv_heads
    dk_r = dk_exp.reshape(b, kh_dim, groups, t_len, cfg.head_dim).sum(axis=2)
    dv = dv_exp.reshape(b, kh_dim, groups, t_len, cfg.head_dim).sum(axis=2)

    cos, sin = _rope_tables(t_len, cfg.head_dim, cfg.rope_base)
    dq = _merge_heads(_rope_backward(dq_r, cos, sin))
    dk = _merge_heads(_rope_backward(dk_r, cos, sin))
    dv = _merge_heads(dv)

    da = _proj_backward(dq, cache.a, model.w(pfx + "q"), ad["q"], cache.u_q, grads, (layer, "q"))
    da += _proj_backward(dk, cache.a, model.w(pfx + "k"), ad["k"], cache.u_k, grads, (layer, "k"))
    da += _proj_backward(dv, cache.a, model.w(pfx + "v"), ad["v"], cache.u_v, grads, (layer, "v"))

    dx_in = dx_mid + _rmsnorm_backward(da, model.w(pfx + "attn_norm"), cache.attn_norm)
    return dx_in


def _prepare_batch(model, tokens, label_mask):
    tokens = np.asarray(tokens, dtype=np.int64)
    label_mask = np.asarray(label_mask, dtype=bool)
    if tokens.ndim != 2 or tokens.shape != label_mask.shape:
        raise ConfigError("tokens and label_mask must be equal-shape 2-d arrays")
    if tokens.shape[1] > model.config.context_len:
        raise ConfigError(
            f"sequence length {tokens.shape[1]} exceeds context_len "
            f"{model.config.context_len}"
        )
    if tokens.shape[1] < 2:
        raise ConfigError("need at least two tokens per row to form targets")
    if tokens.min() < 0 or tokens.max() >= model.config.vocab_size:
        raise ConfigError("token id out of vocabulary range")
    inputs = tokens[:, :-1]
    targets = tokens[:, 1:]
    tmask = label_mask[:, 1:]
    if not tmask.any():
        raise ConfigError("all labels are masked; nothing to train on")
    return inputs, targets, tmask


def forward_loss(model: QuantizedModel, adapters: dict, tokens, label_mask,
                 grad_checkpoint: bool = False):
    """Causal LM loss over the batch, returning (BatchLoss, tape).

    The loss is the per-example mean cross-entropy over unmasked target
    tokens, averaged across examples; this normalization is what makes
    micro-batch gradient accumulation reproduce the full-batch gradient
    exactly. With ``grad_checkpoint`` the tape keeps only each layer's input
    and the backward pass recomputes the rest.
    """
    inputs, targets, tmask = _prepare_batch(model, tokens, label_mask)

    x = model.w("embed")[inputs]
    tape = ForwardTape(
        inputs=inputs, targets=targets, tmask=tmask,
        grad_checkpoint=grad_checkpoint, model_ref=model,
        adapter_keys=frozenset(adapters.keys()),
        caches=None if grad_checkpoint else [],
    )
    for layer in range(model.config.n_layers):
        tape.layer_inputs.append(x)
        x, cache = _layer_forward(model, layer, adapters, x)
        if not grad_checkpoint:
            tape.caches.append(cache)
    tape.x_last = x

    loss, token_count, _, _ = _head_loss(model, x, targets, tmask)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")
    tape.loss = float(loss)
    tape.token_count = int(token_count)
    return BatchLoss(loss=float(loss), token_count=int(token_count)), tape


def _head_loss(model, x_last, targets, tmask):
    h, norm_cache = _rmsnorm_forward(x_last, model.w("final_norm"), model.config.norm_eps)
    logits = h @ model.w("head").T
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz

    n_ex = tmask.sum(axis=1)
    valid = n_ex > 0
    rows = np.arange(targets.shape[0])[:, None]
    picked = np.where(tmask, logp[rows, np.arange(targets.shape[1])[None, :], targets], 0.0)
    ce_ex = -picked.sum(axis=1)
    per_ex = np.where(valid, ce_ex / np.maximum(n_ex, 1), 0.0)
    loss = per_ex[valid].mean()
    return loss, tmask.sum(), (h, norm_cache, shifted, logz), valid


def backward_lora(model: QuantizedModel, adapters: dict, tape: ForwardTape,
                  loss_scale: float = 1.0) -> dict:
    """Exact gradients of the tape's loss w.r.t. every adapter A and B.

    Base weights receive no gradient. ``loss_scale`` multiplies the loss
    before differentiation (used for accumulation pre-scaling).
    """
    if tape.model_ref is not model:
        raise ConfigError("tape was produced by a different model")
    if tape.adapter_keys != frozenset(adapters.keys()):
        raise ConfigError("tape was produced with a different adapter set")

    targets, tmask = tape.targets, tape.tmask
    _, _, head_cache, valid = _head_loss(model, tape.x_last, targets, tmask)
    h, norm_cache, shifted, logz = head_cache

    probs = np.exp(shifted - logz)
    n_ex = tmask.sum(axis=1)
    n_valid = int(valid.sum())
    w_ex = np.where(valid, loss_scale / (n_valid * np.maximum(n_ex, 1)), 0.0)

    dlogits = probs * (tmask * w_ex[:, None])[:, :, None]
    rows = np.arange(targets.shape[0])[:, None]
    cols = np.arange(targets.shape[1])[None, :]
    np.subtract.at(dlogits, (rows, cols, targets), tmask * w_ex[:, None])

    dh = dlogits @ model.w("head")
    dx = _rmsnorm_backward(dh, model.w("final_norm"), norm_cache)

    grads: dict = {}
    for layer in reversed(range(model.config.n_layers)):
        if tape.grad_checkpoint:
            _, cache = _layer_forward(model, layer, adapters, tape.layer_inputs[layer])
        else:
            cache = tape.caches[layer]
        dx = _layer_backward(model, layer, adapters, cache, dx, grads)

    for key, g in grads.items():
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for adapter {key}")
    return grads


def forward_logits(model: QuantizedModel, adapters: dict, tokens):
    """Logits for a single token sequence; used by generation."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    if tokens.size == 0:
        raise ConfigError("prompt must be non-empty")
    if tokens.max() >= model.config.vocab_size or tokens.min() < 0:
        raise ConfigError("token id out of vocabulary range")
    x = model.w("embed")[tokens]
    for layer in range(model.config.n_layers):
        x, _ = _layer_forward(model, layer, adapters, x)
    h, _ = _rmsnorm_forward(x, model.w("final_norm"), model.config.norm_eps)
    return (h @ model.w("head").T)[0]


def generate(model: QuantizedModel, adapters: dict, prompt, max_new: int,
             mode: str = "greedy", temperature: float = 1.0,
             seed: int = 0, stop_token: int | None = None) -> np.ndarray:
    """Autoregressive decode: greedy is deterministic, temperature sampling is
    deterministic per seed. Stops at ``stop_token`` or after ``max_new``."""
    seq = list(np.asarray(prompt, dtype=np.int64).reshape(-1))
    if not seq:
        raise ConfigError("prompt must be non-empty")
    if len(seq) >= model.config.context_len:
        raise ConfigError("prompt does not fit in the context window")
    if mode not in ("greedy", "temperature"):
        raise ConfigError(f"unknown decode mode {mode!r}")
    rng = np.random.default_rng(seed)
    for _ in range(max_new):
        logits = forward_logits(model, adapters, seq)[-1]
        if mode == "greedy":
            nxt = int(np.argmax(logits))
        else:
            if temperature <= 0:
                raise ConfigError("temperature must be positive")
            p = _softmax_rows(logits[None, :] / temperature)[0]
            nxt = int(rng.choice(len(p), p=p))
        seq.append(nxt)
        if stop_token is not None and nxt == stop_token:
            break
        if len(seq) >= model.config.context_len:
            break
    return np.asarray(seq, dtype=np.int64)
