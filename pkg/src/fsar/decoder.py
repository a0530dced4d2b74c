"""Decoding learnable tokens into compound prototypes.

Two token groups (global and focused) pass through one shared decoder
layer: self-attention across all tokens, then cross-attention with the
encoded video rows as keys/values, then a feed-forward, each step with
residual + layer norm. The head-averaged cross-attention rows are kept on
the side -- they feed the attention-divergence loss and the attention
inspection tooling, and each row sums to 1 by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fsar.encoder import (
    AttentionWeights,
    EncodedVideo,
    FeedForwardWeights,
    feed_forward,
    init_attention,
    init_feed_forward,
    multi_head_attention,
)
from fsar.errors import ConfigError, ContractError
from fsar.tensor import Tensor, add, concat_rows, layer_norm, slice_rows


@dataclass
class PrototypeDecoderWeights:
    global_tokens: Tensor | None
    focused_tokens: Tensor | None
    self_attn: AttentionWeights
    self_norm_gain: Tensor
    self_norm_bias: Tensor
    cross_attn: AttentionWeights
    cross_norm_gain: Tensor
    cross_norm_bias: Tensor
    ffn: FeedForwardWeights
    out_norm_gain: Tensor
    out_norm_bias: Tensor
    heads: int

    @property
    def num_global(self) -> int:
        return 0 if self.global_tokens is None else self.global_tokens.shape[0]

    @property
    def num_focused(self) -> int:
        return 0 if self.focused_tokens is None else self.focused_tokens.shape[0]


@dataclass
class VideoPrototypes:
    """Both prototype groups for one video plus their attention rows.

    ``global_attn`` / ``focused_attn`` have one row per prototype over the
    encoded video rows.
    """

    global_protos: Tensor
    focused_protos: Tensor
    global_attn: Tensor
    focused_attn: Tensor

    @property
    def num_global(self) -> int:
        return self.global_protos.shape[0]

    @property
    def num_focused(self) -> int:
        return self.focused_protos.shape[0]


def decode_prototypes(encoded: EncodedVideo, w: PrototypeDecoderWeights) -> VideoPrototypes:
    """Transform the token groups into prototypes against one encoded video."""
    num_g, num_f = w.num_global, w.num_focused
    if num_g + num_f < 1:
        raise ConfigError("decoder needs at least one token")
    rows = encoded.rows
    if rows.shape[0] < 1:
        raise ContractError("cannot decode prototypes from an empty encoding")
    dim = rows.shape[1]
    groups = [t for t in (w.global_tokens, w.focused_tokens) if t is not None]
    if any(t.shape[1] != dim for t in groups):
        raise ContractError(
            f"token width {[t.shape[1] for t in groups]} does not match encoded dim {dim}"
        )

    tokens = groups[0] if len(groups) == 1 else concat_rows(groups)
    self_out, _ = multi_head_attention(tokens, tokens, w.self_attn, w.heads)
    mixed = layer_norm(add(tokens, self_out), w.self_norm_gain, w.self_norm_bias)
    cross_out, attn = multi_head_attention(mixed, rows, w.cross_attn, w.heads)
    fused = layer_norm(add(mixed, cross_out), w.cross_norm_gain, w.cross_norm_bias)
    protos = layer_norm(add(fused, feed_forward(fused, w.ffn)), w.out_norm_gain, w.out_norm_bias)

    return VideoPrototypes(
        global_protos=slice_rows(protos, 0, num_g),
        focused_protos=slice_rows(protos, num_g, num_g + num_f),
        global_attn=slice_rows(attn, 0, num_g),
        focused_attn=slice_rows(attn, num_g, num_g + num_f),
    )


TOKEN_INIT_STD = 0.02


def init_prototype_decoder(
    rng: np.random.Generator,
    dim: int,
    heads: int,
    num_global: int,
    num_focused: int,
    ffn_mult: int = 4,
    dtype=np.float32,
) -> PrototypeDecoderWeights:
    if num_global < 0 or num_focused < 0 or num_global + num_focused < 1:
        raise ConfigError("prototype counts must be nonnegative and sum to at least 1")

    def tokens(count: int) -> Tensor | None:
        if count == 0:
            return None
        return Tensor(rng.standard_normal((count, dim)) * TOKEN_INIT_STD, requires_grad=True, dtype=dtype)

    return PrototypeDecoderWeights(
        global_tokens=tokens(num_global),
        focused_tokens=tokens(num_focused),
        self_attn=init_attention(rng, dim, dtype),
        self_norm_gain=Tensor(np.ones(dim), requires_grad=True, dtype=dtype),
        self_norm_bias=Tensor(np.zeros(dim), requires_grad=True, dtype=dtype),
        cross_attn=init_attention(rng, dim, dtype),
        cross_norm_gain=Tensor(np.ones(dim), requires_grad=True, dtype=dtype),
        cross_norm_bias=Tensor(np.zeros(dim), requires_grad=True, dtype=dtype),
        ffn=init_feed_forward(rng, dim, ffn_mult * dim, dtype),
        out_norm_gain=Tensor(np.ones(dim), requires_grad=True, dtype=dtype),
        out_norm_bias=Tensor(np.zeros(dim), requires_grad=True, dtype=dtype),
        heads=heads,
    )
