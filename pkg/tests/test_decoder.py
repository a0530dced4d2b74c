"""Prototype decoding: shapes, attention laws, oracle parity, gradients."""

from __future__ import annotations

import numpy as np
import pytest

from fsar.data import philox
from fsar.decoder import decode_prototypes, init_prototype_decoder
from fsar.encoder import EncodedVideo
from fsar.errors import ConfigError, ContractError
from fsar.tensor import Tensor, concat_rows, mul, sum_all

from conftest import check_gradient

F64 = np.float64


def make_encoded(rows: np.ndarray) -> EncodedVideo:
    n = rows.shape[0]
    return EncodedVideo(
        rows=Tensor(rows, dtype=F64),
        origins=[("gg", t, None) for t in range(n)],
        frames=n,
        boxes_per_frame=0,
    )


def test_output_shapes():
    rng = philox(1)
    w = init_prototype_decoder(rng, dim=16, heads=2, num_global=5, num_focused=3, dtype=F64)
    protos = decode_prototypes(make_encoded(rng.standard_normal((10, 16))), w)
    assert protos.global_protos.shape == (5, 16)
    assert protos.focused_protos.shape == (3, 16)
    assert protos.global_attn.shape == (5, 10)
    assert protos.focused_attn.shape == (3, 10)


def test_attention_rows_sum_to_one():
    rng = philox(2)
    w = init_prototype_decoder(rng, dim=16, heads=4, num_global=4, num_focused=4, dtype=F64)
    protos = decode_prototypes(make_encoded(rng.standard_normal((12, 16))), w)
    for attn in (protos.global_attn, protos.focused_attn):
        assert np.abs(attn.data.sum(axis=1) - 1.0).max() < 1e-5


def test_identical_rows_give_uniform_attention():
    rng = philox(3)
    w = init_prototype_decoder(rng, dim=8, heads=2, num_global=3, num_focused=2, dtype=F64)
    rows = np.tile(rng.standard_normal((1, 8)), (7, 1))
    protos = decode_prototypes(make_encoded(rows), w)
    assert np.abs(protos.global_attn.data - 1 / 7).max() < 1e-6
    assert np.abs(protos.focused_attn.data - 1 / 7).max() < 1e-6


def reference_decoder(rows: np.ndarray, w) -> tuple[np.ndarray, np.ndarray]:
    """Formula-level reimplementation of the decoder layer (single source of truth
    for the oracle tests): token self-attention, cross-attention, FFN, with
    residual + layer norm after each step."""

    def ln(x, gain, bias, eps=1e-5):
        mu = x.mean(axis=1, keepdims=True)
        return (x - mu) / np.sqrt(x.var(axis=1, keepdims=True) + eps) * gain + bias

    def softmax(x):
        e = np.exp(x - x.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def mha(query, keyval, a, heads):
        dim = query.shape[1]
        dh = dim // heads
        q, k, v = query @ a.wq.data, keyval @ a.wk.data, keyval @ a.wv.data
        outs, attns = [], []
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            attn = softmax(q[:, sl] @ k[:, sl].T / np.sqrt(dh))
            attns.append(attn)
            outs.append(attn @ v[:, sl])
        return np.concatenate(outs, axis=1) @ a.wo.data, np.mean(attns, axis=0)

    groups = [t.data for t in (w.global_tokens, w.focused_tokens) if t is not None]
    tokens = np.concatenate(groups, axis=0)
    self_out, _ = mha(tokens, tokens, w.self_attn, w.heads)
    mixed = ln(tokens + self_out, w.self_norm_gain.data, w.self_norm_bias.data)
    cross_out, attn = mha(mixed, rows, w.cross_attn, w.heads)
    fused = ln(mixed + cross_out, w.cross_norm_gain.data, w.cross_norm_bias.data)
    hidden = np.maximum(fused @ w.ffn.w1.data + w.ffn.b1.data, 0)
    protos = ln(fused + (hidden @ w.ffn.w2.data + w.ffn.b2.data),
                w.out_norm_gain.data, w.out_norm_bias.data)
    return protos, attn


def test_single_head_tiny_case_matches_reference():
    # one token per group, two encoded rows, d=2: the cross-attention reduces
    # to the plain FFN(A V) composition the reference spells out
    rng = philox(4)
    w = init_prototype_decoder(rng, dim=2, heads=1, num_global=1, num_focused=1,
                               ffn_mult=2, dtype=F64)
    rows = rng.standard_normal((2, 2))
    protos = decode_prototypes(make_encoded(rows), w)
    expected_protos, expected_attn = reference_decoder(rows, w)
    got = np.concatenate([protos.global_protos.data, protos.focused_protos.data])
    got_attn = np.concatenate([protos.global_attn.data, protos.focused_attn.data])
    assert np.abs(got - expected_protos).max() < 1e-10
    assert np.abs(got_attn - expected_attn).max() < 1e-10


def test_multi_head_case_matches_reference():
    rng = philox(5)
    w = init_prototype_decoder(rng, dim=8, heads=2, num_global=3, num_focused=2, dtype=F64)
    rows = rng.standard_normal((6, 8))
    protos = decode_prototypes(make_encoded(rows), w)
    expected_protos, expected_attn = reference_decoder(rows, w)
    got = np.concatenate([protos.global_protos.data, protos.focused_protos.data])
    got_attn = np.concatenate([protos.global_attn.data, protos.focused_attn.data])
    assert np.abs(got - expected_protos).max() < 1e-10
    assert np.abs(got_attn - expected_attn).max() < 1e-10


def test_decoding_is_deterministic():
    rng = philox(6)
    w = init_prototype_decoder(rng, dim=8, heads=2, num_global=2, num_focused=2, dtype=F64)
    rows = rng.standard_normal((5, 8))
    a = decode_prototypes(make_encoded(rows), w)
    b = decode_prototypes(make_encoded(rows), w)
    assert np.array_equal(a.global_protos.data, b.global_protos.data)
    assert np.array_equal(a.focused_attn.data, b.focused_attn.data)


def test_empty_focused_group_supported():
    rng = philox(7)
    w = init_prototype_decoder(rng, dim=8, heads=2, num_global=3, num_focused=0, dtype=F64)
    protos = decode_prototypes(make_encoded(rng.standard_normal((4, 8))), w)
    assert protos.global_protos.shape == (3, 8)
    assert protos.focused_protos.shape == (0, 8)
    assert protos.focused_attn.shape == (0, 4)


def test_zero_tokens_rejected():
    with pytest.raises(ConfigError):
        init_prototype_decoder(philox(8), dim=8, heads=2, num_global=0, num_focused=0, dtype=F64)


def test_dim_mismatch_rejected():
    rng = philox(9)
    w = init_prototype_decoder(rng, dim=8, heads=2, num_global=1, num_focused=1, dtype=F64)
    with pytest.raises(ContractError):
        decode_prototypes(make_encoded(rng.standard_normal((3, 4))), w)


def test_prototype_gradients_match_finite_differences():
    rng = philox(10)
    w = init_prototype_decoder(rng, dim=4, heads=2, num_global=2, num_focused=2,
                               ffn_mult=2, dtype=F64)
    rows = rng.standard_normal((3, 4))
    proj = Tensor(rng.standard_normal((4, 4)), dtype=F64)

    def make_loss():
        protos = decode_prototypes(make_encoded(rows), w)
        return sum_all(mul(concat_rows([protos.global_protos, protos.focused_protos]), proj))

    params = {
        "tokens_global": w.global_tokens,
        "tokens_focused": w.focused_tokens,
        "cross_wq": w.cross_attn.wq,
        "cross_wk": w.cross_attn.wk,
        "cross_wv": w.cross_attn.wv,
        "self_wo": w.self_attn.wo,
        "ffn_w1": w.ffn.w1,
        "out_gain": w.out_norm_gain,
    }
    check_gradient(make_loss, params, h=1e-6, tol=1e-6)
