"""One-hot block embeddings and the position/column bookkeeping.

A length-T = kN sequence has one column per position (i, j).  Each column of
the plain embedding stacks L+2 blocks of size kN:

    block 1:  one-hot at (i, j)
    block 2:  one-hot at (i, s_i(j))
    blocks 3..L+2:  zeros (scratch space filled by the attention layers)

so d = kN(L+2).  The m-sparse variant replaces the k-dimensional block index
one-hot with an (m+2)-vector: an m-slot one-hot marking membership in the
sparse index set, stacked on the unit vector (cos 2*pi*i/k, sin 2*pi*i/k).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from permhop.task import InputPerms


def column_index(i: int, j: int, k: int, N: int) -> int:
    """Flatten (i, j) in [k] x [N] to a 1-based column index."""
    if not 1 <= i <= k or not 1 <= j <= N:
        raise ValueError(f"position ({i}, {j}) out of range [{k}] x [{N}]")
    return (i - 1) * N + j


def position_of(flat: int, k: int, N: int) -> tuple[int, int]:
    """Inverse of column_index."""
    if not 1 <= flat <= k * N:
        raise ValueError(f"flat index {flat} out of range 1..{k * N}")
    return (flat - 1) // N + 1, (flat - 1) % N + 1


@dataclass(frozen=True)
class EmbeddedSequence:
    """d x T matrix of float64, d = kN(L+2), T = kN; immutable."""

    data: np.ndarray
    k: int
    N: int
    L: int

    @property
    def d(self) -> int:
        return self.k * self.N * (self.L + 2)

    @property
    def T(self) -> int:
        return self.k * self.N


@dataclass(frozen=True)
class MSparseEmbedding:
    """d' x T matrix, d' = (m+2)N(L+2), with its sparse index set."""

    data: np.ndarray
    k: int
    N: int
    L: int
    sparse_set: tuple[int, ...]

    @property
    def m(self) -> int:
        return len(self.sparse_set)

    @property
    def d(self) -> int:
        return (self.m + 2) * self.N * (self.L + 2)

    @property
    def T(self) -> int:
        return self.k * self.N


def embed(sigma: InputPerms, L: int) -> EmbeddedSequence:
    """Plain block embedding of a context tuple."""
    if L < 1:
        raise ValueError("L must be >= 1")
    k, N = sigma.k, sigma.n
    T = k * N
    d = T * (L + 2)
    X = np.zeros((d, T))
    for i in range(1, k + 1):
        p = sigma.perms[i - 1]
        for j in range(1, N + 1):
            c = column_index(i, j, k, N) - 1
            X[c, c] = 1.0
            X[T + (i - 1) * N + (p(j) - 1), c] = 1.0
    X.setflags(write=False)
    return EmbeddedSequence(X, k, N, L)


def msparse_position_vectors(k: int, sparse_set: tuple[int, ...]) -> np.ndarray:
    """Rows i = 1..k of the (m+2)-dim block-position code p_i.

    p_i = [one-hot in the sorted sparse set (zero if i is outside it);
           cos(2*pi*i/k); sin(2*pi*i/k)].
    """
    m = len(sparse_set)
    ordered = sorted(sparse_set)
    if ordered != list(sparse_set):
        raise ValueError("sparse_set must be sorted ascending")
    if len(set(ordered)) != m or (m and not (1 <= ordered[0] and ordered[-1] <= k)):
        raise ValueError(f"sparse_set must be distinct indices in 1..{k}")
    P = np.zeros((k, m + 2))
    for y, idx in enumerate(ordered):
        P[idx - 1, y] = 1.0
    ang = 2.0 * np.pi * np.arange(1, k + 1) / k
    P[:, m] = np.cos(ang)
    P[:, m + 1] = np.sin(ang)
    return P


def embed_msparse(
    sigma: InputPerms, sparse_set: tuple[int, ...], L: int
) -> MSparseEmbedding:
    """m-sparse embedding: block-position one-hots replaced by p_i codes."""
    if L < 1:
        raise ValueError("L must be >= 1")
    k, N = sigma.k, sigma.n
    m = len(sparse_set)
    if m > k:
        raise ValueError(f"sparse set size {m} exceeds k={k}")
    P = msparse_position_vectors(k, tuple(sparse_set))
    T = k * N
    w = (m + 2) * N  # width of one block
    X = np.zeros((w * (L + 2), T))
    for i in range(1, k + 1):
        p = sigma.perms[i - 1]
        for j in range(1, N + 1):
            c = column_index(i, j, k, N) - 1
            X[0:w, c] = np.kron(P[i - 1], _onehot(N, j))
            X[w : 2 * w, c] = np.kron(P[i - 1], _onehot(N, p(j)))
    X.setflags(write=False)
    return MSparseEmbedding(X, k, N, L, tuple(sparse_set))


def _onehot(N: int, j: int) -> np.ndarray:
    e = np.zeros(N)
    e[j - 1] = 1.0
    return e


def decode(logits) -> int:
    """Argmax readout, 1-based; ties break toward the smallest index."""
    v = np.asarray(logits, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("decode expects a non-empty vector")
    return int(np.argmax(v)) + 1
