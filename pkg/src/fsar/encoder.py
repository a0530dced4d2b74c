"""Multi-relation encoding of a video's frame and object features.

Three relation transformers share one block architecture (multi-head
attention, residual, layer norm, feed-forward, residual, layer norm) and
differ only in what feeds the query and key/value sides:

* ``gg`` -- frame features attend over frame features;
* ``go`` -- frame features attend over object features;
* ``oo`` -- object features attend over object features.

Frame features carry a 1-D sinusoidal positional encoding over the frame
index; object features carry a 3-D encoding over (frame index, box center x,
box center y). The enabled relation outputs are stacked row-wise into one
matrix, with a row-origin map recording which (relation, frame, slot) each
row came from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fsar.data import VideoFeatures
from fsar.errors import ConfigError, ContractError
from fsar.tensor import (
    Tensor,
    add,
    add_row,
    concat_cols,
    concat_rows,
    layer_norm,
    matmul,
    relu,
    scale,
    slice_cols,
    softmax_rows,
    transpose,
)

RELATIONS = ("gg", "go", "oo")

# box centers live in [0, 1]; stretch them so nearby centers land on
# distinct phases of the sinusoid table
BOX_PE_SCALE = 20.0


@dataclass
class AttentionWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor


@dataclass
class FeedForwardWeights:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class BlockWeights:
    attn: AttentionWeights
    attn_norm_gain: Tensor
    attn_norm_bias: Tensor
    ffn: FeedForwardWeights
    ffn_norm_gain: Tensor
    ffn_norm_bias: Tensor


@dataclass
class RelationEncoderWeights:
    blocks: dict[str, BlockWeights]
    heads: int


@dataclass
class EncodedVideo:
    """Stacked relation rows plus their provenance.

    ``origins[r]`` is (relation, frame index, object slot or None) for row r.
    """

    rows: Tensor
    origins: list[tuple[str, int, int | None]]
    frames: int
    boxes_per_frame: int


# ---------------------------------------------------------------------------
# positional encodings
# ---------------------------------------------------------------------------


def sinusoid_rows(positions: np.ndarray, channels: int, dtype=np.float32) -> np.ndarray:
    """Interleaved sin/cos features of real-valued positions."""
    if channels % 2 != 0:
        raise ConfigError(f"sinusoidal encoding needs an even channel count, got {channels}")
    half = channels // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half, dtype=np.float64) / half))
    angles = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    out = np.empty((len(positions), channels), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out.astype(dtype)


def positional_encoding_1d(frames: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal encoding of the frame index, one row per frame."""
    if dim % 2 != 0:
        raise ConfigError(f"1-D positional encoding needs even dim, got {dim}")
    return sinusoid_rows(np.arange(frames), dim, dtype)


def positional_encoding_3d(boxes: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    """Encoding of (frame, center-x, center-y) per object, rows in (t*B + b) order.

    Half the channels encode the frame index, a quarter each encode the box
    center coordinates; box width/height are not used.
    """
    if dim % 4 != 0:
        raise ConfigError(f"3-D positional encoding needs dim divisible by 4, got {dim}")
    frames, bpf = boxes.shape[0], boxes.shape[1]
    t_pos = np.repeat(np.arange(frames), bpf)
    cx = boxes[:, :, 0].reshape(-1) * BOX_PE_SCALE
    cy = boxes[:, :, 1].reshape(-1) * BOX_PE_SCALE
    return np.concatenate(
        [
            sinusoid_rows(t_pos, dim // 2, dtype),
            sinusoid_rows(cx, dim // 4, dtype),
            sinusoid_rows(cy, dim // 4, dtype),
        ],
        axis=1,
    )


# ---------------------------------------------------------------------------
# transformer block
# ---------------------------------------------------------------------------


def multi_head_attention(
    query: Tensor, keyval: Tensor, w: AttentionWeights, heads: int
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention; returns (output, head-averaged weights)."""
    dim = query.shape[1]
    if dim % heads != 0:
        raise ConfigError(f"dim {dim} not divisible by {heads} heads")
    dh = dim // heads
    q = matmul(query, w.wq)
    k = matmul(keyval, w.wk)
    v = matmul(keyval, w.wv)
    outs = []
    attn_sum = None
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        logits = scale(matmul(slice_cols(q, lo, hi), transpose(slice_cols(k, lo, hi))), 1.0 / math.sqrt(dh))
        attn = softmax_rows(logits)
        attn_sum = attn if attn_sum is None else add(attn_sum, attn)
        outs.append(matmul(attn, slice_cols(v, lo, hi)))
    merged = outs[0] if heads == 1 else concat_cols(outs)
    return matmul(merged, w.wo), scale(attn_sum, 1.0 / heads)


def feed_forward(x: Tensor, w: FeedForwardWeights) -> Tensor:
    hidden = relu(add_row(matmul(x, w.w1), w.b1))
    return add_row(matmul(hidden, w.w2), w.b2)


def transformer_block(
    query: Tensor, keyval: Tensor, w: BlockWeights, heads: int
) -> tuple[Tensor, Tensor]:
    """Post-norm block: attention + residual + norm, FFN + residual + norm."""
    attn_out, attn_avg = multi_head_attention(query, keyval, w.attn, heads)
    x = layer_norm(add(query, attn_out), w.attn_norm_gain, w.attn_norm_bias)
    out = layer_norm(add(x, feed_forward(x, w.ffn)), w.ffn_norm_gain, w.ffn_norm_bias)
    return out, attn_avg


# ---------------------------------------------------------------------------
# multi-relation encoding
# ---------------------------------------------------------------------------


def encode_video(
    video: VideoFeatures,
    weights: RelationEncoderWeights,
    relations: tuple[str, ...],
    use_positional_encoding: bool = True,
    dtype=np.float32,
) -> EncodedVideo:
    """Run the enabled relation transformers and stack their output rows.

    Row order is fixed: gg rows (one per frame), then go rows (one per
    frame), then oo rows in (t*B + b) order, for whichever relations are
    enabled.
    """
    if not relations:
        raise ConfigError("at least one relation must be enabled")
    for r in relations:
        if r not in RELATIONS:
            raise ConfigError(f"unknown relation {r!r}")
        if r not in weights.blocks:
            raise ContractError(f"relation {r!r} enabled but has no weights")
    frames, dim = video.global_feats.shape
    bpf = video.object_feats.shape[1] if video.object_feats.ndim == 3 else 0
    needs_objects = [r for r in relations if r in ("go", "oo")]
    if needs_objects and bpf < 1:
        raise ConfigError(f"relations {needs_objects} need object features, video has none")

    g_in = video.global_feats.astype(dtype)
    if use_positional_encoding:
        g_in = g_in + positional_encoding_1d(frames, dim, dtype)
    g_in = Tensor(g_in)

    o_in = None
    if needs_objects:
        flat = video.object_feats.reshape(frames * bpf, dim).astype(dtype)
        if use_positional_encoding:
            flat = flat + positional_encoding_3d(video.boxes, dim, dtype)
        o_in = Tensor(flat)

    parts: list[Tensor] = []
    origins: list[tuple[str, int, int | None]] = []
    heads = weights.heads
    if "gg" in relations:
        out, _ = transformer_block(g_in, g_in, weights.blocks["gg"], heads)
        parts.append(out)
        origins.extend(("gg", t, None) for t in range(frames))
    if "go" in relations:
        out, _ = transformer_block(g_in, o_in, weights.blocks["go"], heads)
        parts.append(out)
        origins.extend(("go", t, None) for t in range(frames))
    if "oo" in relations:
        out, _ = transformer_block(o_in, o_in, weights.blocks["oo"], heads)
        parts.append(out)
        origins.extend(("oo", t, b) for t in range(frames) for b in range(bpf))
    rows = parts[0] if len(parts) == 1 else concat_rows(parts)
    return EncodedVideo(rows=rows, origins=origins, frames=frames, boxes_per_frame=bpf)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> Tensor:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return Tensor(rng.standard_normal((fan_in, fan_out)) * std, requires_grad=True, dtype=dtype)


def init_attention(rng: np.random.Generator, dim: int, dtype) -> AttentionWeights:
    return AttentionWeights(
        wq=glorot(rng, dim, dim, dtype),
        wk=glorot(rng, dim, dim, dtype),
        wv=glorot(rng, dim, dim, dtype),
        wo=glorot(rng, dim, dim, dtype),
    )


def init_feed_forward(rng: np.random.Generator, dim: int, hidden: int, dtype) -> FeedForwardWeights:
    return FeedForwardWeights(
        w1=glorot(rng, dim, hidden, dtype),
        b1=Tensor(np.zeros(hidden), requires_grad=True, dtype=dtype),
        w2=glorot(rng, hidden, dim, dtype),
        b2=Tensor(np.zeros(dim), requires_grad=True, dtype=dtype),
    )


def init_block(rng: np.random.Generator, dim: int, ffn_mult: int, dtype) -> BlockWeights:
    return BlockWeights(
        attn=init_attention(rng, dim, dtype),
        attn_norm_gain=Tensor(np.ones(dim), requires_grad=True, dtype=dtype),
        attn_norm_bias=Tensor(np.zeros(dim), requires_grad=True, dtype=dtype),
        ffn=init_feed_forward(rng, dim, ffn_mult * dim, dtype),
        ffn_norm_gain=Tensor(np.ones(dim), requires_grad=True, dtype=dtype),
        ffn_norm_bias=Tensor(np.zeros(dim), requires_grad=True, dtype=dtype),
    )


def init_relation_encoder(
    rng: np.random.Generator,
    dim: int,
    heads: int,
    relations: tuple[str, ...],
    ffn_mult: int = 4,
    dtype=np.float32,
) -> RelationEncoderWeights:
    blocks = {r: init_block(rng, dim, ffn_mult, dtype) for r in RELATIONS if r in relations}
    return RelationEncoderWeights(blocks=blocks, heads=heads)
