import math

import numpy as np
import pytest

from permhop.embedding import embed
from permhop.perms import Permutation
from permhop.task import InputPerms, Query, sample_input
from permhop.transformer import (
    AttentionLayer,
    TransformerParams,
    attention_forward,
    forward,
    load_checkpoint,
    readout_probs,
    save_checkpoint,
    softmax_columns,
    value_matrix_for,
)


def test_softmax_columns_uniform_and_shift_invariance():
    S = softmax_columns(np.zeros((4, 4)))
    np.testing.assert_allclose(S, np.full((4, 4), 0.25))
    rng = np.random.default_rng(0)
    Z = rng.standard_normal((5, 3))
    shifted = Z + rng.standard_normal(3)[None, :]
    np.testing.assert_allclose(softmax_columns(Z), softmax_columns(shifted), atol=1e-14)


def test_softmax_columns_hand_value_and_nan():
    S = softmax_columns(np.array([[math.log(1.0)], [math.log(3.0)]]))
    np.testing.assert_allclose(S[:, 0], [0.25, 0.75], atol=1e-15)
    with pytest.raises(ValueError):
        softmax_columns(np.array([[np.nan, 0.0], [0.0, 0.0]]))


def test_softmax_columns_large_logits_stable():
    S = softmax_columns(np.array([[900.0, -900.0], [0.0, 0.0]]))
    assert np.isfinite(S).all()
    np.testing.assert_allclose(S.sum(axis=0), [1.0, 1.0])


def test_attention_forward_zero_weights():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((4, 3))
    layer = AttentionLayer(np.zeros((4, 4)), np.zeros((4, 4)))
    out, S = attention_forward(X, layer)
    np.testing.assert_array_equal(out, X)
    np.testing.assert_allclose(S, np.full((3, 3), 1 / 3))


def test_attention_forward_zero_kq_uniform_value():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((4, 5))
    V = rng.standard_normal((4, 4))
    out, _ = attention_forward(X, AttentionLayer(np.zeros((4, 4)), V))
    mean = X.mean(axis=1, keepdims=True)
    np.testing.assert_allclose(out, X + (V @ mean) @ np.ones((1, 5)), atol=1e-14)


def test_attention_forward_hand_instance():
    X = np.eye(2)
    layer = AttentionLayer(math.log(3.0) * np.eye(2), np.eye(2))
    out, S = attention_forward(X, layer)
    np.testing.assert_allclose(S[:, 0], [0.75, 0.25], atol=1e-15)
    np.testing.assert_allclose(out[:, 0], [1.75, 0.25], atol=1e-15)


def test_forward_caches_everything_and_is_deterministic():
    rng = np.random.default_rng(3)
    sigma = sample_input(3, 2, rng)
    L = 2
    d = 2 * 3 * (L + 2)
    layers = tuple(
        AttentionLayer(0.1 * rng.standard_normal((d, d)), value_matrix_for(l, L, 6))
        for l in range(1, L + 1)
    )
    readouts = tuple(0.1 * rng.standard_normal((d, 3)) for _ in range(L))
    params = TransformerParams(layers, readouts, 2, 3)
    X0 = embed(sigma, L)
    c1 = forward(params, X0)
    c2 = forward(params, X0)
    assert len(c1.x) == L + 1 and len(c1.scores) == L
    for a, b in zip(c1.x, c2.x):
        assert np.array_equal(a, b)
    for S in c1.scores:
        np.testing.assert_allclose(S.sum(axis=0), np.ones(6), atol=1e-12)


def test_forward_zero_kq_block_average():
    # with canonical values and zero key-query, block l+2 of every column is
    # the average of block l+1 over all columns
    sigma = InputPerms((Permutation([2, 1]), Permutation.identity(2)))
    L = 2
    kN = 4
    d = kN * (L + 2)
    layers = tuple(
        AttentionLayer(np.zeros((d, d)), value_matrix_for(l, L, kN)) for l in (1, 2)
    )
    readouts = tuple(np.zeros((d, 2)) for _ in range(L))
    params = TransformerParams(layers, readouts, 2, 2)
    cache = forward(params, embed(sigma, L))
    X1 = cache.x[1]
    expect = cache.x[0][kN : 2 * kN, :].mean(axis=1)
    for c in range(4):
        np.testing.assert_allclose(X1[2 * kN : 3 * kN, c], expect, atol=1e-15)


def test_readout_probs_uniform_and_normalized():
    rng = np.random.default_rng(4)
    sigma = sample_input(3, 2, rng)
    L = 2
    d = 6 * (L + 2)
    layers = tuple(
        AttentionLayer(np.zeros((d, d)), value_matrix_for(l, L, 6)) for l in (1, 2)
    )
    params = TransformerParams(
        layers, (np.zeros((d, 3)), rng.standard_normal((d, 3))), 2, 3
    )
    cache = forward(params, embed(sigma, L))
    p = readout_probs(params, cache, 1, Query(1, 2))
    np.testing.assert_allclose(p, np.full(3, 1 / 3))
    p2 = readout_probs(params, cache, 2, Query(2, 3))
    assert (p2 >= 0).all() and abs(p2.sum() - 1.0) < 1e-12
    with pytest.raises(ValueError):
        readout_probs(params, cache, 3, Query(1, 1))


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    L, k, N = 2, 2, 3
    d = k * N * (L + 2)
    layers = tuple(
        AttentionLayer(rng.standard_normal((d, d)), rng.standard_normal((d, d)))
        for _ in range(L)
    )
    readouts = tuple(rng.standard_normal((d, N)) for _ in range(L))
    params = TransformerParams(layers, readouts, k, N)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, params)
    back = load_checkpoint(path)
    assert back.k == k and back.N == N and back.L == L and back.m is None
    for a, b in zip(params.layers, back.layers):
        assert np.array_equal(a.w_kq, b.w_kq)
        assert np.array_equal(a.w_ov, b.w_ov)
    for a, b in zip(params.readouts, back.readouts):
        assert np.array_equal(a, b)
