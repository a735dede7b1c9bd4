"""Pre-LayerNorm transformer encoder with a tied-embedding MLM head.

The encoder building blocks (attention over an explicit head count, FFN
halves) are shape-agnostic so the tensor-parallel module can reuse them on
sharded weights; at world size 1 both paths execute the identical numpy
call sequence and produce bitwise-equal results.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .sampling import IGNORE_INDEX
from .tokenizer import N_SPECIAL, PAD_ID

ATTN_MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    hidden: int
    heads: int
    vocab: int
    max_seq: int
    ffn_mult: int = 4
    dropout: float = 0.1
    pre_ln: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.vocab < N_SPECIAL:
            raise ConfigError(f"vocab {self.vocab} smaller than {N_SPECIAL} special tokens")
        if self.max_seq < 2:
            raise ConfigError(f"max_seq must be >= 2, got {self.max_seq}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def ffn_inner(self) -> int:
        return self.ffn_mult * self.hidden


# Desk-scale presets; the full-size shapes are only ever counted, not built.
PRESETS = {
    "tiny": ModelConfig(layers=2, hidden=64, heads=4, vocab=2000, max_seq=64),
    "small": ModelConfig(layers=4, hidden=128, heads=4, vocab=8000, max_seq=128),
}


def param_count(
    layers: int, hidden: int, vocab: int, max_seq: int, ffn_mult: int = 4
) -> int:
    """Analytic parameter count of this architecture (never allocates)."""
    h, f = hidden, ffn_mult * hidden
    per_layer = (
        2 * h  # attention layer norm
        + 3 * (h * h + h)  # q, k, v projections
        + h * h + h  # attention output projection
        + 2 * h  # ffn layer norm
        + h * f + f  # ffn expansion
        + f * h + h  # ffn contraction
    )
    return vocab * h + max_seq * h + layers * per_layer + 2 * h + vocab


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled until within +-2 std."""
    arr = rng.normal(0.0, std, size=shape)
    bad = np.abs(arr) > 2.0 * std
    while bad.any():
        arr[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(arr) > 2.0 * std
    return arr


def init_params(config: ModelConfig, seed: int) -> dict[str, T.Tensor]:
    """Deterministic parameter initialization, keyed by stable names."""
    from .sampling import seed_for

    rng = seed_for(seed, "model-init")
    std = 0.02
    out_std = std / np.sqrt(2.0 * config.layers)  # deep pre-LN stabilization
    h, f, v = config.hidden, config.ffn_inner, config.vocab

    params: dict[str, T.Tensor] = {}

    def param(name: str, arr: np.ndarray) -> None:
        params[name] = T.Tensor(arr, requires_grad=True)

    param("tok_emb", _trunc_normal(rng, (v, h), std))
    param("pos_emb", _trunc_normal(rng, (config.max_seq, h), std))
    for i in range(config.layers):
        pre = f"layer{i}."
        param(pre + "ln1.gain", np.ones(h))
        param(pre + "ln1.bias", np.zeros(h))
        param(pre + "wq", _trunc_normal(rng, (h, h), std))
        param(pre + "bq", np.zeros(h))
        param(pre + "wk", _trunc_normal(rng, (h, h), std))
        param(pre + "bk", np.zeros(h))
        param(pre + "wv", _trunc_normal(rng, (h, h), std))
        param(pre + "bv", np.zeros(h))
        param(pre + "wo", _trunc_normal(rng, (h, h), out_std))
        param(pre + "bo", np.zeros(h))
        param(pre + "ln2.gain", np.ones(h))
        param(pre + "ln2.bias", np.zeros(h))
        param(pre + "w1", _trunc_normal(rng, (h, f), std))
        param(pre + "b1", np.zeros(f))
        param(pre + "w2", _trunc_normal(rng, (f, h), out_std))
        param(pre + "b2", np.zeros(h))
    param("final_ln.gain", np.ones(h))
    param("final_ln.bias", np.zeros(h))
    param("out_bias", np.zeros(v))
    return params


# ---------------------------------------------------------------------------
# Shared encoder building blocks (also used on sharded weights)
# ---------------------------------------------------------------------------


def attention_heads(
    xn: T.Tensor,
    wq: T.Tensor,
    bq: T.Tensor,
    wk: T.Tensor,
    bk: T.Tensor,
    wv: T.Tensor,
    bv: T.Tensor,
    n_heads: int,
    head_dim: int,
    mask: np.ndarray | None,
    collect_attn: list | None = None,
) -> T.Tensor:
    """Multi-head self-attention producing [B, T, n_heads*head_dim]."""
    b, t, _ = xn.shape
    q = T.add(T.matmul(xn, wq), bq)
    k = T.add(T.matmul(xn, wk), bk)
    v = T.add(T.matmul(xn, wv), bv)
    q = T.transpose(T.reshape(q, (b, t, n_heads, head_dim)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(k, (b, t, n_heads, head_dim)), (0, 2, 1, 3))
    v = T.transpose(T.reshape(v, (b, t, n_heads, head_dim)), (0, 2, 1, 3))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(head_dim))
    if mask is not None:
        scores = T.add_rowwise(scores, mask)
    probs = T.softmax(scores, axis=-1)
    if collect_attn is not None:
        collect_attn.append(probs.data)
    ctx = T.matmul(probs, v)
    return T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, n_heads * head_dim))


def ffn_inner(xn: T.Tensor, w1: T.Tensor, b1: T.Tensor) -> T.Tensor:
    return T.gelu(T.add(T.matmul(xn, w1), b1))


def padding_mask(input_ids: np.ndarray, pad_id: int = PAD_ID) -> np.ndarray | None:
    """Additive attention mask hiding pad key positions; None when pad-free."""
    if not (input_ids == pad_id).any():
        return None
    b, t = input_ids.shape
    mask = np.where(input_ids == pad_id, ATTN_MASK_VALUE, 0.0)
    return mask.reshape(b, 1, 1, t)


def _residual(cfg: ModelConfig, x, sublayer_out, ln_gain, ln_bias):
    added = T.add(x, sublayer_out)
    if cfg.pre_ln:
        return added
    return T.layer_norm(added, ln_gain, ln_bias, cfg.ln_eps)


def forward_hidden(
    config: ModelConfig,
    params: dict[str, T.Tensor],
    input_ids: np.ndarray,
    train: bool = False,
    dropout_rng: np.random.Generator | None = None,
    collect_attn: list | None = None,
    apply_final_norm: bool = True,
    mask_pad: bool = True,
) -> T.Tensor:
    """Encode ids [B, T'] into hidden states [B, T', H]."""
    input_ids = np.asarray(input_ids, dtype=np.int64)
    if input_ids.ndim != 2:
        raise ShapeError(f"input_ids must be [B, T'], got {input_ids.shape}")
    b, t = input_ids.shape
    if t > config.max_seq:
        raise ShapeError(f"sequence length {t} exceeds configured maximum {config.max_seq}")
    if input_ids.max() >= config.vocab:
        raise ShapeError(f"token id {input_ids.max()} >= vocab {config.vocab}")

    use_dropout = train and config.dropout > 0.0
    if use_dropout and dropout_rng is None:
        raise ConfigError("training forward with dropout requires a dropout rng")

    def drop(x: T.Tensor) -> T.Tensor:
        return T.dropout(x, config.dropout, dropout_rng) if use_dropout else x

    mask = padding_mask(input_ids) if mask_pad else None
    tokens = T.embedding(params["tok_emb"], input_ids)
    positions = T.embedding(params["pos_emb"], np.arange(t))
    x = drop(T.add(tokens, positions))

    for i in range(config.layers):
        p = f"layer{i}."
        attn_in = (
            T.layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"], config.ln_eps)
            if config.pre_ln
            else x
        )
        attn = attention_heads(
            attn_in,
            params[p + "wq"], params[p + "bq"],
            params[p + "wk"], params[p + "bk"],
            params[p + "wv"], params[p + "bv"],
            config.heads, config.head_dim, mask, collect_attn,
        )
        proj = drop(T.add(T.matmul(attn, params[p + "wo"]), params[p + "bo"]))
        x = _residual(config, x, proj, params[p + "ln1.gain"], params[p + "ln1.bias"])

        ffn_in = (
            T.layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"], config.ln_eps)
            if config.pre_ln
            else x
        )
        h = ffn_inner(ffn_in, params[p + "w1"], params[p + "b1"])
        out = drop(T.add(T.matmul(h, params[p + "w2"]), params[p + "b2"]))
        x = _residual(config, x, out, params[p + "ln2.gain"], params[p + "ln2.bias"])

    if config.pre_ln and apply_final_norm:
        x = T.layer_norm(x, params["final_ln.gain"], params["final_ln.bias"], config.ln_eps)
    return x


def mlm_logits(hidden: T.Tensor, tok_emb: T.Tensor, out_bias: T.Tensor) -> T.Tensor:
    """Full-vocabulary logits through the transposed input embedding."""
    return T.add(T.matmul(hidden, T.transpose(tok_emb, (1, 0))), out_bias)


def mlm_loss(
    config: ModelConfig,
    params: dict[str, T.Tensor],
    input_ids: np.ndarray,
    target_ids: np.ndarray,
    train: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> T.Tensor:
    """Masked-token prediction loss over a batch."""
    hidden = forward_hidden(config, params, input_ids, train=train, dropout_rng=dropout_rng)
    logits = mlm_logits(hidden, params["tok_emb"], params["out_bias"])
    b, t = np.asarray(input_ids).shape
    flat = T.reshape(logits, (b * t, config.vocab))
    return T.cross_entropy(flat, np.asarray(target_ids).reshape(-1), IGNORE_INDEX)


# ---------------------------------------------------------------------------
# Task heads
# ---------------------------------------------------------------------------


@dataclass
class TaskHead:
    kind: str  # "classification" | "span"
    num_labels: int
    params: dict[str, T.Tensor] = field(default_factory=dict)


def init_classification_head(config: ModelConfig, num_labels: int, seed: int) -> TaskHead:
    from .sampling import seed_for

    rng = seed_for(seed, "cls-head-init")
    h = config.hidden
    params = {
        "pool.w": T.Tensor(_trunc_normal(rng, (h, h), 0.02), requires_grad=True),
        "pool.b": T.Tensor(np.zeros(h), requires_grad=True),
        "cls.w": T.Tensor(_trunc_normal(rng, (h, num_labels), 0.02), requires_grad=True),
        "cls.b": T.Tensor(np.zeros(num_labels), requires_grad=True),
    }
    return TaskHead("classification", num_labels, params)


def init_span_head(config: ModelConfig, seed: int) -> TaskHead:
    from .sampling import seed_for

    rng = seed_for(seed, "span-head-init")
    params = {
        "span.w": T.Tensor(_trunc_normal(rng, (config.hidden, 2), 0.02), requires_grad=True),
        "span.b": T.Tensor(np.zeros(2), requires_grad=True),
    }
    return TaskHead("span", 2, params)


def task_forward(head: TaskHead, hidden: T.Tensor) -> T.Tensor:
    """Classification: [B, num_labels] from the first position.
    Span extraction: [B, T', 2] start/end logits."""
    if head.kind == "classification":
        first = T.index_axis(hidden, 1, 0)
        pooled = T.tanh(T.add(T.matmul(first, head.params["pool.w"]), head.params["pool.b"]))
        return T.add(T.matmul(pooled, head.params["cls.w"]), head.params["cls.b"])
    if head.kind == "span":
        if hidden.shape[1] < 2:
            raise ShapeError(
                f"span head needs sequences of >= 2 tokens, got {hidden.shape[1]}"
            )
        return T.add(T.matmul(hidden, head.params["span.w"]), head.params["span.b"])
    raise ConfigError(f"unknown task head kind {head.kind!r}")
