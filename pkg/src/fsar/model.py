"""Full model: relation encoder plus prototype decoder, with one flat
parameter registry for the optimizer and checkpoints."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fsar.data import VideoFeatures, philox
from fsar.decoder import (
    PrototypeDecoderWeights,
    VideoPrototypes,
    decode_prototypes,
    init_prototype_decoder,
)
from fsar.encoder import (
    AttentionWeights,
    BlockWeights,
    EncodedVideo,
    FeedForwardWeights,
    RelationEncoderWeights,
    encode_video,
    init_relation_encoder,
)
from fsar.errors import ConfigError
from fsar.tensor import Tensor

PARAM_INIT_STREAM = 0


@dataclass
class PrototypeModel:
    encoder: RelationEncoderWeights
    decoder: PrototypeDecoderWeights
    relations: tuple[str, ...]
    use_positional_encoding: bool
    dim: int

    def encode(self, video: VideoFeatures) -> VideoPrototypes:
        return decode_prototypes(self.encode_rows(video), self.decoder)

    def encode_rows(self, video: VideoFeatures) -> EncodedVideo:
        dtype = self._dtype()
        return encode_video(
            video,
            self.encoder,
            self.relations,
            use_positional_encoding=self.use_positional_encoding,
            dtype=dtype,
        )

    def _dtype(self):
        return self.decoder.cross_attn.wq.dtype

    def parameters(self) -> dict[str, Tensor]:
        """Flat name -> tensor map; iteration order is sorted and stable."""
        out: dict[str, Tensor] = {}

        def put_attn(prefix: str, a: AttentionWeights) -> None:
            out[f"{prefix}.wq"] = a.wq
            out[f"{prefix}.wk"] = a.wk
            out[f"{prefix}.wv"] = a.wv
            out[f"{prefix}.wo"] = a.wo

        def put_ffn(prefix: str, f: FeedForwardWeights) -> None:
            out[f"{prefix}.w1"] = f.w1
            out[f"{prefix}.b1"] = f.b1
            out[f"{prefix}.w2"] = f.w2
            out[f"{prefix}.b2"] = f.b2

        def put_block(prefix: str, b: BlockWeights) -> None:
            put_attn(f"{prefix}.attn", b.attn)
            out[f"{prefix}.attn_norm.gain"] = b.attn_norm_gain
            out[f"{prefix}.attn_norm.bias"] = b.attn_norm_bias
            put_ffn(f"{prefix}.ffn", b.ffn)
            out[f"{prefix}.ffn_norm.gain"] = b.ffn_norm_gain
            out[f"{prefix}.ffn_norm.bias"] = b.ffn_norm_bias

        for rel, block in self.encoder.blocks.items():
            put_block(f"encoder.{rel}", block)
        dec = self.decoder
        if dec.global_tokens is not None:
            out["decoder.tokens.global"] = dec.global_tokens
        if dec.focused_tokens is not None:
            out["decoder.tokens.focused"] = dec.focused_tokens
        put_attn("decoder.self_attn", dec.self_attn)
        out["decoder.self_norm.gain"] = dec.self_norm_gain
        out["decoder.self_norm.bias"] = dec.self_norm_bias
        put_attn("decoder.cross_attn", dec.cross_attn)
        out["decoder.cross_norm.gain"] = dec.cross_norm_gain
        out["decoder.cross_norm.bias"] = dec.cross_norm_bias
        put_ffn("decoder.ffn", dec.ffn)
        out["decoder.out_norm.gain"] = dec.out_norm_gain
        out["decoder.out_norm.bias"] = dec.out_norm_bias
        return dict(sorted(out.items()))

    def load_parameter_data(self, values: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(values)
        extra = set(values) - set(params)
        if missing or extra:
            raise ConfigError(f"parameter sets differ: missing={sorted(missing)} extra={sorted(extra)}")
        for name, tensor in params.items():
            arr = np.asarray(values[name], dtype=tensor.dtype)
            if arr.shape != tensor.shape:
                raise ConfigError(f"parameter {name}: shape {arr.shape} != {tensor.shape}")
            tensor.data = arr.copy()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.parameters().items()}


def resolve_dtype(precision: str):
    if precision == "f32":
        return np.float32
    if precision == "f64":
        return np.float64
    raise ConfigError(f"unknown precision {precision!r} (expected f32 or f64)")


def init_model(
    dim: int,
    heads: int,
    num_global: int,
    num_focused: int,
    relations: tuple[str, ...],
    use_positional_encoding: bool = True,
    ffn_mult: int = 4,
    precision: str = "f32",
    seed: int = 0,
) -> PrototypeModel:
    if dim % heads != 0:
        raise ConfigError(f"dim {dim} must be divisible by heads {heads}")
    dtype = resolve_dtype(precision)
    rng = philox(seed, PARAM_INIT_STREAM)
    encoder = init_relation_encoder(rng, dim, heads, tuple(relations), ffn_mult, dtype)
    decoder = init_prototype_decoder(rng, dim, heads, num_global, num_focused, ffn_mult, dtype)
    return PrototypeModel(
        encoder=encoder,
        decoder=decoder,
        relations=tuple(relations),
        use_positional_encoding=use_positional_encoding,
        dim=dim,
    )
