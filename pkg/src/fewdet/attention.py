"""Scaled dot-product attention and the two shallow-transformer stacks.

The encoder stack (self-attention + MLP per layer) refines a set of support
vectors against each other; the decoder stack (cross-attention + MLP, with
optional query self-attention) aggregates query rows against support rows as
keys/values. Layers use the post-norm ordering: sublayer -> dropout ->
residual add -> layer norm. No positional encodings anywhere, which makes
support order a true set: the encoder is permutation-equivariant and the
decoder permutation-invariant over support rows in eval mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ConfigError, EmptyInputError, ShapeError
from .tensor import (
    Tensor,
    add,
    concat_cols,
    dropout,
    layer_norm,
    matmul,
    mul,
    relu,
    softmax_rows,
)


@dataclass(frozen=True)
class AttentionConfig:
    """Shared shape/rate settings for both stacks."""

    model_dim: int = 256
    heads: int = 2
    layers: int = 2
    mlp_hidden: int = 256
    dropout_rate: float = 0.1
    decoder_self_attention: bool = False

    def __post_init__(self):
        for name in ("model_dim", "heads", "layers", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.model_dim % self.heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}"
            )
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


@dataclass
class MultiHeadParams:
    """Per-head Q/K/V projections (d -> d/heads each) and the output map."""

    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for h in range(len(self.wq)):
            yield f"{prefix}.h{h}.wq", self.wq[h]
            yield f"{prefix}.h{h}.wk", self.wk[h]
            yield f"{prefix}.h{h}.wv", self.wv[h]
        yield f"{prefix}.wo", self.wo


@dataclass
class EncoderLayer:
    attn: MultiHeadParams
    ln1_gamma: Tensor
    ln1_beta: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.attn.named(f"{prefix}.attn")
        yield f"{prefix}.ln1.gamma", self.ln1_gamma
        yield f"{prefix}.ln1.beta", self.ln1_beta
        yield f"{prefix}.mlp.w1", self.mlp_w1
        yield f"{prefix}.mlp.b1", self.mlp_b1
        yield f"{prefix}.mlp.w2", self.mlp_w2
        yield f"{prefix}.mlp.b2", self.mlp_b2
        yield f"{prefix}.ln2.gamma", self.ln2_gamma
        yield f"{prefix}.ln2.beta", self.ln2_beta


@dataclass
class DecoderLayer:
    cross: MultiHeadParams
    ln1_gamma: Tensor
    ln1_beta: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    self_attn: MultiHeadParams | None = None
    ln_self_gamma: Tensor | None = None
    ln_self_beta: Tensor | None = None

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        if self.self_attn is not None:
            yield from self.self_attn.named(f"{prefix}.self_attn")
            yield f"{prefix}.ln_self.gamma", self.ln_self_gamma
            yield f"{prefix}.ln_self.beta", self.ln_self_beta
        yield from self.cross.named(f"{prefix}.attn")
        yield f"{prefix}.ln1.gamma", self.ln1_gamma
        yield f"{prefix}.ln1.beta", self.ln1_beta
        yield f"{prefix}.mlp.w1", self.mlp_w1
        yield f"{prefix}.mlp.b1", self.mlp_b1
        yield f"{prefix}.mlp.w2", self.mlp_w2
        yield f"{prefix}.mlp.b2", self.mlp_b2
        yield f"{prefix}.ln2.gamma", self.ln2_gamma
        yield f"{prefix}.ln2.beta", self.ln2_beta


@dataclass
class EncoderStack:
    config: AttentionConfig
    layers: list[EncoderLayer] = field(default_factory=list)

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            yield from layer.named(f"{prefix}layer{i}")


@dataclass
class DecoderStack:
    config: AttentionConfig
    layers: list[DecoderLayer] = field(default_factory=list)

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            yield from layer.named(f"{prefix}layer{i}")


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    bound = 1.0 / math.sqrt(rows)
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), grad_enabled=True)


def init_multi_head(cfg: AttentionConfig, rng: np.random.Generator) -> MultiHeadParams:
    d, hd = cfg.model_dim, cfg.head_dim
    return MultiHeadParams(
        wq=[_uniform(rng, d, hd) for _ in range(cfg.heads)],
        wk=[_uniform(rng, d, hd) for _ in range(cfg.heads)],
        wv=[_uniform(rng, d, hd) for _ in range(cfg.heads)],
        wo=_uniform(rng, d, d),
    )


def _init_common(cfg: AttentionConfig, rng: np.random.Generator) -> dict:
    d, hidden = cfg.model_dim, cfg.mlp_hidden
    return {
        "ln1_gamma": Tensor(np.ones(d), grad_enabled=True),
        "ln1_beta": Tensor(np.zeros(d), grad_enabled=True),
        "mlp_w1": _uniform(rng, d, hidden),
        "mlp_b1": Tensor(np.zeros(hidden), grad_enabled=True),
        "mlp_w2": _uniform(rng, hidden, d),
        "mlp_b2": Tensor(np.zeros(d), grad_enabled=True),
        "ln2_gamma": Tensor(np.ones(d), grad_enabled=True),
        "ln2_beta": Tensor(np.zeros(d), grad_enabled=True),
    }


def init_encoder_stack(cfg: AttentionConfig, rng: np.random.Generator) -> EncoderStack:
    layers = [
        EncoderLayer(attn=init_multi_head(cfg, rng), **_init_common(cfg, rng))
        for _ in range(cfg.layers)
    ]
    return EncoderStack(config=cfg, layers=layers)


def init_decoder_stack(cfg: AttentionConfig, rng: np.random.Generator) -> DecoderStack:
    layers = []
    for _ in range(cfg.layers):
        extra = {}
        if cfg.decoder_self_attention:
            d = cfg.model_dim
            extra = {
                "self_attn": init_multi_head(cfg, rng),
                "ln_self_gamma": Tensor(np.ones(d), grad_enabled=True),
                "ln_self_beta": Tensor(np.zeros(d), grad_enabled=True),
            }
        layers.append(
            DecoderLayer(cross=init_multi_head(cfg, rng), **_init_common(cfg, rng), **extra)
        )
    return DecoderStack(config=cfg, layers=layers)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V, rows of Q attended over rows of K/V."""
    if q.values.ndim != 2 or k.values.ndim != 2 or v.values.ndim != 2:
        raise ShapeError("attention operands must be rank-2")
    d = q.shape[1]
    if k.shape[1] != d:
        raise ShapeError(f"Q and K feature dims differ: {d} vs {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"K and V row counts differ: {k.shape[0]} vs {v.shape[0]}")
    if k.shape[0] == 0:
        raise EmptyInputError("attention needs at least one key/value row")
    scores = mul(matmul(q, k, transpose_b=True), 1.0 / math.sqrt(d))
    return matmul(softmax_rows(scores), v)


def multi_head(q: Tensor, k: Tensor, v: Tensor, params: MultiHeadParams, cfg: AttentionConfig) -> Tensor:
    """Per-head projected attention, heads concatenated, output-projected.

    Heads are materialized as separate d -> d/heads projections, so each
    head's attention scale is sqrt(d/heads) automatically.
    """
    if q.shape[1] != cfg.model_dim:
        raise ShapeError(f"expected feature dim {cfg.model_dim}, got {q.shape[1]}")
    if v.shape[1] != cfg.model_dim:
        raise ShapeError(f"expected value dim {cfg.model_dim}, got {v.shape[1]}")
    head_outs = [
        scaled_dot_attention(matmul(q, params.wq[h]), matmul(k, params.wk[h]), matmul(v, params.wv[h]))
        for h in range(cfg.heads)
    ]
    joined = head_outs[0] if cfg.heads == 1 else concat_cols(head_outs)
    return matmul(joined, params.wo)


def _mlp(x: Tensor, layer, cfg: AttentionConfig) -> Tensor:
    hidden = relu(add(matmul(x, layer.mlp_w1), layer.mlp_b1))
    return add(matmul(hidden, layer.mlp_w2), layer.mlp_b2)


def _encoder_layer(x: Tensor, layer: EncoderLayer, cfg: AttentionConfig, mode: str, rng) -> Tensor:
    attended = dropout(multi_head(x, x, x, layer.attn, cfg), cfg.dropout_rate, mode, rng)
    x = layer_norm(add(x, attended), layer.ln1_gamma, layer.ln1_beta)
    transformed = dropout(_mlp(x, layer, cfg), cfg.dropout_rate, mode, rng)
    return layer_norm(add(x, transformed), layer.ln2_gamma, layer.ln2_beta)


def _decoder_layer(
    x: Tensor, supports: Tensor, layer: DecoderLayer, cfg: AttentionConfig, mode: str, rng
) -> Tensor:
    if cfg.decoder_self_attention:
        if layer.self_attn is None:
            raise ConfigError("decoder_self_attention enabled but layer has no self-attention params")
        attended = dropout(multi_head(x, x, x, layer.self_attn, cfg), cfg.dropout_rate, mode, rng)
        x = layer_norm(add(x, attended), layer.ln_self_gamma, layer.ln_self_beta)
    crossed = dropout(multi_head(x, supports, supports, layer.cross, cfg), cfg.dropout_rate, mode, rng)
    x = layer_norm(add(x, crossed), layer.ln1_gamma, layer.ln1_beta)
    transformed = dropout(_mlp(x, layer, cfg), cfg.dropout_rate, mode, rng)
    return layer_norm(add(x, transformed), layer.ln2_gamma, layer.ln2_beta)


def isam_refine(
    supports: Tensor, stack: EncoderStack, mode: str = "eval", rng: np.random.Generator | None = None
) -> Tensor:
    """Refine K support vectors against each other; shape-preserving [K,d] -> [K,d]."""
    if supports.values.ndim != 2:
        raise ShapeError(f"supports must be rank-2, got {supports.shape}")
    if supports.shape[0] == 0:
        raise EmptyInputError("isam_refine needs at least one support vector")
    if supports.shape[1] != stack.config.model_dim:
        raise ShapeError(
            f"support dim {supports.shape[1]} != stack model_dim {stack.config.model_dim}"
        )
    x = supports
    for layer in stack.layers:
        x = _encoder_layer(x, layer, stack.config, mode, rng)
    return x


def qsam_aggregate(
    queries: Tensor,
    supports: Tensor,
    stack: DecoderStack,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Aggregate each query row against the support set; [q,d] -> [q,d].

    With decoder self-attention off (the default), each output row depends
    only on its own query row and the supports.
    """
    if queries.values.ndim != 2 or supports.values.ndim != 2:
        raise ShapeError("queries and supports must be rank-2")
    if queries.shape[0] == 0:
        raise EmptyInputError("qsam_aggregate needs at least one query row")
    if supports.shape[0] == 0:
        raise EmptyInputError("qsam_aggregate needs at least one support vector")
    d = stack.config.model_dim
    if queries.shape[1] != d or supports.shape[1] != d:
        raise ShapeError(
            f"query/support dims {queries.shape[1]}/{supports.shape[1]} != model_dim {d}"
        )
    x = queries
    for layer in stack.layers:
        x = _decoder_layer(x, supports, layer, stack.config, mode, rng)
    return x


# ---------------------------------------------------------------------------
# Parameter rebinding (snapshot load, gradient-check probes)
# ---------------------------------------------------------------------------


def _mha_from(mapping: dict, prefix: str, heads: int) -> MultiHeadParams:
    return MultiHeadParams(
        wq=[mapping[f"{prefix}.h{h}.wq"] for h in range(heads)],
        wk=[mapping[f"{prefix}.h{h}.wk"] for h in range(heads)],
        wv=[mapping[f"{prefix}.h{h}.wv"] for h in range(heads)],
        wo=mapping[f"{prefix}.wo"],
    )


def replace_encoder_params(stack: EncoderStack, mapping: dict, prefix: str = "") -> EncoderStack:
    """Same-shaped stack whose tensors are looked up in `mapping` by name."""
    cfg = stack.config
    layers = []
    for i in range(len(stack.layers)):
        p = f"{prefix}layer{i}"
        layers.append(
            EncoderLayer(
                attn=_mha_from(mapping, f"{p}.attn", cfg.heads),
                ln1_gamma=mapping[f"{p}.ln1.gamma"],
                ln1_beta=mapping[f"{p}.ln1.beta"],
                mlp_w1=mapping[f"{p}.mlp.w1"],
                mlp_b1=mapping[f"{p}.mlp.b1"],
                mlp_w2=mapping[f"{p}.mlp.w2"],
                mlp_b2=mapping[f"{p}.mlp.b2"],
                ln2_gamma=mapping[f"{p}.ln2.gamma"],
                ln2_beta=mapping[f"{p}.ln2.beta"],
            )
        )
    return EncoderStack(config=cfg, layers=layers)


def replace_decoder_params(stack: DecoderStack, mapping: dict, prefix: str = "") -> DecoderStack:
    """Decoder counterpart of replace_encoder_params."""
    cfg = stack.config
    layers = []
    for i in range(len(stack.layers)):
        p = f"{prefix}layer{i}"
        extra = {}
        if stack.layers[i].self_attn is not None:
            extra = {
                "self_attn": _mha_from(mapping, f"{p}.self_attn", cfg.heads),
                "ln_self_gamma": mapping[f"{p}.ln_self.gamma"],
                "ln_self_beta": mapping[f"{p}.ln_self.beta"],
            }
        layers.append(
            DecoderLayer(
                cross=_mha_from(mapping, f"{p}.attn", cfg.heads),
                ln1_gamma=mapping[f"{p}.ln1.gamma"],
                ln1_beta=mapping[f"{p}.ln1.beta"],
                mlp_w1=mapping[f"{p}.mlp.w1"],
                mlp_b1=mapping[f"{p}.mlp.b1"],
                mlp_w2=mapping[f"{p}.mlp.w2"],
                mlp_b2=mapping[f"{p}.mlp.b2"],
                ln2_gamma=mapping[f"{p}.ln2.gamma"],
                ln2_beta=mapping[f"{p}.ln2.beta"],
                **extra,
            )
        )
    return DecoderStack(config=cfg, layers=layers)
