"""Shared post-LN transformer encoder, tied MLM head, joint loss and classifier."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .batcher import IGNORE, MaskedJointBatch, MaskedRow, collate_batch, phoneme_view, word_view
from .engine import (
    Tensor,
    add,
    dropout,
    embedding,
    gelu,
    layer_norm,
    matmul,
    reshape,
    softmax,
    softmax_cross_entropy,
    take_rows,
    transpose,
)
from .engine.tensor import NonFiniteError
from .tokenizer import PAD_ID

WORD_TERM, PHONEME_TERM, JOINT_TERM = "word", "phoneme", "joint"
ALL_TERMS = (WORD_TERM, PHONEME_TERM, JOINT_TERM)


class ClassCountMismatch(ValueError):
    def __init__(self, expected: int, found: int):
        super().__init__(f"classifier head has {expected} classes but {found} were requested")
        self.expected, self.found = expected, found


@dataclass
class ModelConfig:
    vocab_size: int
    hidden_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    ffn_dim: int = 512
    max_positions: int = 256
    num_types: int = 2
    dropout_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.num_types != 2:
            raise ValueError("num_types must be 2 (word, phoneme)")
        if min(self.vocab_size, self.hidden_dim, self.num_layers, self.ffn_dim, self.max_positions) <= 0:
            raise ValueError("sizes must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


def _layer_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, f = cfg.hidden_dim, cfg.ffn_dim
    return {
        "q_w": (h, h), "q_b": (h,), "k_w": (h, h), "k_b": (h,), "v_w": (h, h), "v_b": (h,),
        "o_w": (h, h), "o_b": (h,), "ln1_g": (h,), "ln1_b": (h,),
        "ff1_w": (h, f), "ff1_b": (f,), "ff2_w": (f, h), "ff2_b": (h,), "ln2_g": (h,), "ln2_b": (h,),
    }


def parameter_shapes(cfg: ModelConfig, num_classes: int | None = None) -> dict[str, tuple[int, ...]]:
    """Name → shape for every parameter, in canonical order."""
    h = cfg.hidden_dim
    shapes = {
        "tok_emb": (cfg.vocab_size, h),
        "pos_emb": (cfg.max_positions, h),
        "type_emb": (cfg.num_types, h),
        "emb_ln_g": (h,),
        "emb_ln_b": (h,),
    }
    for i in range(cfg.num_layers):
        shapes.update({f"layer{i}.{k}": s for k, s in _layer_shapes(cfg).items()})
    shapes.update({"mlm_w": (h, h), "mlm_b": (h,), "mlm_ln_g": (h,), "mlm_ln_b": (h,), "mlm_bias": (cfg.vocab_size,)})
    if num_classes is not None:
        shapes.update({"cls_w": (h, num_classes), "cls_b": (num_classes,)})
    return shapes


def _init_value(name: str, shape, rng: np.random.Generator, dtype) -> np.ndarray:
    tail = name.rsplit(".", 1)[-1]
    if tail.endswith("_g"):
        return np.ones(shape, dtype=dtype)
    if tail.endswith("_b") or tail == "mlm_bias":
        return np.zeros(shape, dtype=dtype)
    return rng.normal(0.0, 0.02, size=shape).astype(dtype)


def init_params(cfg: ModelConfig, num_classes: int | None = None, dtype=np.float32) -> dict[str, Tensor]:
    """Normal(0, 0.02) weights, unit gains, zero biases; seeded by ``cfg.seed``."""
    rng = np.random.default_rng([cfg.seed, 0x1A17])
    return {
        name: Tensor(_init_value(name, shape, rng, dtype), requires_grad=True, name=name)
        for name, shape in parameter_shapes(cfg).items()
    } | ({} if num_classes is None else init_classifier(cfg, num_classes, seed=cfg.seed, dtype=dtype))


def init_classifier(cfg: ModelConfig, num_classes: int, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    if num_classes < 2:
        raise ValueError("a classifier needs at least two classes")
    rng = np.random.default_rng([seed, 0xC1A5])
    w = rng.normal(0.0, 0.02, size=(cfg.hidden_dim, num_classes)).astype(dtype)
    return {
        "cls_w": Tensor(w, requires_grad=True, name="cls_w"),
        "cls_b": Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True, name="cls_b"),
    }


def cast_params(params: dict[str, Tensor], dtype) -> dict[str, Tensor]:
    """Fresh leaf copies in ``dtype`` (float64 for gradient checks)."""
    return {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in params.items()}


def import_embeddings(params: dict[str, Tensor], table: np.ndarray, rows: slice | None = None):
    """Overwrite (a slice of) the token table with externally provided vectors."""
    target = params["tok_emb"].data
    view = target if rows is None else target[rows]
    table = np.asarray(table)
    if table.shape != view.shape:
        raise ValueError(f"embedding table shape {table.shape} does not fit {view.shape}")
    view[...] = table


def embedding_sum(batch: MaskedJointBatch, params, cfg: ModelConfig) -> Tensor:
    """Token + position + type lookups (before layer norm)."""
    if batch.position_ids.size and batch.position_ids.max() >= cfg.max_positions:
        raise IndexError(f"position id {int(batch.position_ids.max())} >= max_positions {cfg.max_positions}")
    x = embedding(params["tok_emb"], batch.masked_ids)
    x = add(x, embedding(params["pos_emb"], batch.position_ids))
    return add(x, embedding(params["type_emb"], batch.type_ids))


def embed(batch: MaskedJointBatch, params, cfg: ModelConfig, train: bool = False, rng=None) -> Tensor:
    """Embedding sum, then layer norm and dropout (dropout only when training)."""
    x = layer_norm(embedding_sum(batch, params, cfg), params["emb_ln_g"], params["emb_ln_b"])
    return dropout(x, cfg.dropout_rate, rng, train)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def _split_heads(x: Tensor, b: int, t: int, heads: int) -> Tensor:
    return transpose(reshape(x, (b, t, heads, -1)), (0, 2, 1, 3))


def _check_finite(x: Tensor, where: str):
    if not np.isfinite(x.data).all():
        raise NonFiniteError(f"non-finite activations in {where}")


def attention_bias(attention_mask: np.ndarray, dtype) -> np.ndarray:
    """Additive key mask: 0 for real tokens, -inf for PAD; shape (B, 1, 1, T)."""
    bias = np.where(attention_mask[:, None, None, :] > 0, 0.0, -np.inf)
    return bias.astype(dtype)


def encoder_layer(x: Tensor, bias: np.ndarray, params, prefix: str, cfg: ModelConfig, train, rng):
    b, t, h = x.shape
    heads = cfg.num_heads
    p = lambda k: params[f"{prefix}.{k}"]
    q = _split_heads(_linear(x, p("q_w"), p("q_b")), b, t, heads)
    k = _split_heads(_linear(x, p("k_w"), p("k_b")), b, t, heads)
    v = _split_heads(_linear(x, p("v_w"), p("v_b")), b, t, heads)
    scale = 1.0 / np.sqrt(h // heads)
    scores = add(matmul(q, transpose(k, (0, 1, 3, 2))) * scale, Tensor(bias))
    probs = softmax(scores)
    ctx = reshape(transpose(matmul(probs, v), (0, 2, 1, 3)), (b, t, h))
    attn = dropout(_linear(ctx, p("o_w"), p("o_b")), cfg.dropout_rate, rng, train)
    x = layer_norm(add(x, attn), p("ln1_g"), p("ln1_b"))
    ff = _linear(gelu(_linear(x, p("ff1_w"), p("ff1_b"))), p("ff2_w"), p("ff2_b"))
    ff = dropout(ff, cfg.dropout_rate, rng, train)
    x = layer_norm(add(x, ff), p("ln2_g"), p("ln2_b"))
    return x, probs


def encoder_forward(
    hidden: Tensor,
    attention_mask: np.ndarray,
    params,
    cfg: ModelConfig,
    train: bool = False,
    rng=None,
    return_attention: bool = False,
):
    """Stack of post-LN self-attention blocks; PAD keys are masked out."""
    if attention_mask.shape != hidden.shape[:2]:
        raise ValueError("attention_mask does not match the sequence shape")
    bias = attention_bias(attention_mask, hidden.dtype)
    x, maps = hidden, []
    for i in range(cfg.num_layers):
        x, probs = encoder_layer(x, bias, params, f"layer{i}", cfg, train, rng)
        _check_finite(x, f"layer {i}")
        maps.append(probs.data)
    return (x, maps) if return_attention else x


def encode(batch: MaskedJointBatch, params, cfg: ModelConfig, train: bool = False, rng=None) -> Tensor:
    return encoder_forward(embed(batch, params, cfg, train, rng), batch.attention_mask, params, cfg, train, rng)


def mlm_logits(states: Tensor, positions: np.ndarray, params) -> Tensor:
    """Vocabulary logits at ``positions`` ((k, 2) row/column pairs)."""
    b, t, h = states.shape
    positions = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    flat = take_rows(reshape(states, (b * t, h)), positions[:, 0] * t + positions[:, 1])
    z = gelu(_linear(flat, params["mlm_w"], params["mlm_b"]))
    z = layer_norm(z, params["mlm_ln_g"], params["mlm_ln_b"])
    return add(matmul(z, transpose(params["tok_emb"])), params["mlm_bias"])


def classify_forward(batch: MaskedJointBatch, params, cfg: ModelConfig, num_classes: int | None = None,
                     train: bool = False, rng=None) -> Tensor:
    """Class logits from the final BOS state."""
    if "cls_w" not in params:
        raise KeyError("model has no classifier head")
    found = params["cls_w"].shape[1]
    if num_classes is not None and num_classes != found:
        raise ClassCountMismatch(found, num_classes)
    states = encode(batch, params, cfg, train, rng)
    b, t, h = states.shape
    pooled = take_rows(reshape(states, (b * t, h)), np.arange(b) * t)
    pooled = dropout(pooled, cfg.dropout_rate, rng, train)
    return _linear(pooled, params["cls_w"], params["cls_b"])


@dataclass
class LossBreakdown:
    """Summed masked-token cross-entropies of the three passes.

    ``total`` is the engine's ``(word + phoneme) + joint`` in the parameter
    dtype; absent terms are exact zeros.
    """

    word_mlm_loss: float
    phoneme_mlm_loss: float
    joint_mlm_loss: float
    total: float
    counts: dict[str, int] = field(default_factory=dict)
    total_tensor: Tensor | None = None
    skipped: bool = False

    def as_dict(self) -> dict:
        return {
            "word": self.word_mlm_loss,
            "phoneme": self.phoneme_mlm_loss,
            "joint": self.joint_mlm_loss,
            "total": self.total,
            "counts": dict(self.counts),
        }


def masked_loss(rows: Sequence[MaskedRow], params, cfg: ModelConfig, train=False, rng=None):
    """Summed cross-entropy over every target in ``rows`` (one forward pass)."""
    batch = collate_batch(rows, PAD_ID)
    pos = np.argwhere(batch.targets != IGNORE)
    if len(pos) == 0:
        return None, 0
    states = encode(batch, params, cfg, train, rng)
    logits = mlm_logits(states, pos, params)
    return softmax_cross_entropy(logits, batch.targets[pos[:, 0], pos[:, 1]], reduction="sum"), len(pos)


def joint_pretrain_loss(
    rows: Sequence[MaskedRow],
    params,
    cfg: ModelConfig,
    vocab,
    terms: Sequence[str] = ALL_TERMS,
    train: bool = False,
    rng=None,
) -> LossBreakdown:
    """Word-only, phoneme-only and joint passes over one mask realisation.

    ``rows`` are masked joint rows; the single-block passes reuse their
    masks through :func:`word_view` / :func:`phoneme_view`. Terms not listed
    in ``terms`` are exact zeros and cost no forward pass.
    """
    unknown = set(terms) - set(ALL_TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    dtype = params["tok_emb"].dtype
    values: dict[str, Tensor] = {}
    counts: dict[str, int] = {}
    builders = {
        WORD_TERM: lambda: [word_view(r, vocab) for r in rows],
        PHONEME_TERM: lambda: [phoneme_view(r, vocab) for r in rows if r.phoneme_span[1] > r.phoneme_span[0]],
        JOINT_TERM: lambda: list(rows),
    }
    for term in ALL_TERMS:
        loss, n = (None, 0)
        if term in terms:
            view = builders[term]()
            if view:
                loss, n = masked_loss(view, params, cfg, train, rng)
        values[term] = loss if loss is not None else Tensor(np.zeros((), dtype=dtype))
        counts[term] = n
    if sum(counts.values()) == 0:
        return LossBreakdown(0.0, 0.0, 0.0, 0.0, counts, None, skipped=True)
    total = add(add(values[WORD_TERM], values[PHONEME_TERM]), values[JOINT_TERM])
    return LossBreakdown(
        word_mlm_loss=float(values[WORD_TERM].data),
        phoneme_mlm_loss=float(values[PHONEME_TERM].data),
        joint_mlm_loss=float(values[JOINT_TERM].data),
        total=float(total.data),
        counts=counts,
        total_tensor=total,
    )
