import numpy as np
import pytest

from permhop.embedding import (
    column_index,
    decode,
    embed,
    embed_msparse,
    msparse_position_vectors,
    position_of,
)
from permhop.perms import Permutation
from permhop.task import InputPerms, sample_input


def test_column_index_and_position_of():
    assert column_index(1, 1, 3, 4) == 1
    assert column_index(2, 3, 2, 5) == 8
    for k, N in [(3, 4), (1, 2), (5, 5)]:
        for i in range(1, k + 1):
            for j in range(1, N + 1):
                flat = column_index(i, j, k, N)
                assert position_of(flat, k, N) == (i, j)
    with pytest.raises(ValueError):
        column_index(0, 1, 3, 4)
    with pytest.raises(ValueError):
        position_of(13, 3, 4)


def test_embed_smallest_instance():
    sigma = InputPerms((Permutation.identity(2),))
    seq = embed(sigma, 1)
    assert seq.data.shape == (6, 2)  # d = kN(L+2) = 2*3
    np.testing.assert_array_equal(seq.data[:, 0], [1, 0, 1, 0, 0, 0])
    np.testing.assert_array_equal(seq.data[:, 1], [0, 1, 0, 1, 0, 0])


def test_embed_columns_have_two_unit_entries():
    rng = np.random.default_rng(0)
    sigma = sample_input(4, 3, rng)
    seq = embed(sigma, 2)
    assert seq.data.shape == (12 * 4, 12)
    for c in range(12):
        col = seq.data[:, c]
        assert np.count_nonzero(col) == 2
        assert set(np.unique(col)) <= {0.0, 1.0}


def test_embed_second_block_position():
    sigma = InputPerms((Permutation.identity(3), Permutation([3, 2, 1])))
    seq = embed(sigma, 2)
    c = column_index(2, 1, 2, 3) - 1
    block2 = seq.data[6:12, c]
    # one-hot at intra-block position (2-1)*3 + 3 = 6
    assert block2[5] == 1.0 and block2.sum() == 1.0


def test_embed_injective_and_reconstructible():
    rng = np.random.default_rng(1)
    matrices = set()
    inputs = set()
    for _ in range(30):
        sigma = sample_input(3, 2, rng)
        seq = embed(sigma, 1)
        matrices.add(seq.data.tobytes())
        inputs.add(tuple(p.images for p in sigma.perms))
        # recover sigma_i(j) from each column's second block
        T = 6
        for i in range(1, 3):
            for j in range(1, 4):
                c = column_index(i, j, 2, 3) - 1
                row = int(np.argmax(seq.data[T : 2 * T, c]))
                assert row == (i - 1) * 3 + sigma.perms[i - 1](j) - 1
    assert len(matrices) == len(inputs)


def test_embed_dimension_formula():
    # L = log2(k)+1 gives d = kN(3 + log2 k)
    for k in (1, 2, 4, 8):
        L = k.bit_length()
        N = 3
        sigma = InputPerms(tuple(Permutation.identity(N) for _ in range(k)))
        seq = embed(sigma, L)
        assert seq.data.shape[0] == k * N * (L + 2) == k * N * (3 + (L - 1))


def test_msparse_position_vectors():
    P = msparse_position_vectors(4, (2,))
    assert P.shape == (4, 3)
    np.testing.assert_allclose((P[:, 1:] ** 2).sum(axis=1), 1.0, atol=1e-15)
    assert P[1, 0] == 1.0 and P[0, 0] == 0.0
    # k=4: i=1 and i=3 trig parts are antipodal
    assert abs(P[0, 1:] @ P[2, 1:] + 1.0) < 1e-15


def test_embed_msparse_shapes_and_blocks():
    rng = np.random.default_rng(2)
    sigma = sample_input(3, 4, rng)
    ms = embed_msparse(sigma, (1, 3), 3)
    assert ms.data.shape == ((2 + 2) * 3 * 5, 12)
    # full sparse set: one-hot part covers every block index
    full = embed_msparse(sigma, (1, 2, 3, 4), 3)
    P = msparse_position_vectors(4, (1, 2, 3, 4))
    assert np.array_equal(P[:, :4], np.eye(4))
    w = (4 + 2) * 3
    c = 0  # column (1,1)
    np.testing.assert_allclose(full.data[:w, c], np.kron(P[0], [1, 0, 0]))


def test_decode():
    assert decode([0.1, 0.7, 0.2]) == 2
    assert decode([0.0, 0.0, 0.0]) == 1  # ties break low
    onehot = np.zeros(5)
    onehot[3] = 1.0
    assert decode(onehot) == 4
    with pytest.raises(ValueError):
        decode([])
