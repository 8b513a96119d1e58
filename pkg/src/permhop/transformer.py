"""Attention-only transformer: residual single-head layers, full caching.

The model is

    X^(l) = X^(l-1) + W_ov X^(l-1) S(X^(l-1)^T W_kq X^(l-1)),

with the softmax applied column-wise, no masking, no MLPs, no layer norm.
Every intermediate state and every T x T score matrix is retained: the
weight verifier reads the states and the gradient engine reads the scores.

This module is the clarity-first reference path.  The batched engine in
`permhop.grad` computes the same quantities for training-sized workloads and
is tested against this one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from permhop.embedding import EmbeddedSequence
from permhop.task import Query

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AttentionLayer:
    """One layer's key-query and output-value matrices (d x d each)."""

    w_kq: np.ndarray
    w_ov: np.ndarray

    def __post_init__(self):
        if self.w_kq.shape != self.w_ov.shape or self.w_kq.shape[0] != self.w_kq.shape[1]:
            raise ValueError("layer matrices must be square and share d")


@dataclass(frozen=True)
class TransformerParams:
    """L attention layers plus one d x N readout per stage.

    ``m`` is None for the plain embedding (d = kN(L+2)); for m-sparse weights
    it is the sparse-set size and d = (m+2)N(L+2).
    """

    layers: tuple[AttentionLayer, ...]
    readouts: tuple[np.ndarray, ...]
    k: int
    N: int
    m: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "readouts", tuple(self.readouts))
        if len(self.readouts) != len(self.layers):
            raise ValueError("need one readout per layer")
        d = self.d
        for layer in self.layers:
            if layer.w_kq.shape != (d, d):
                raise ValueError("layer dimension does not match k, N, L")
        for psi in self.readouts:
            if psi.shape != (d, self.N):
                raise ValueError(f"readout must be {d} x {self.N}")

    @property
    def L(self) -> int:
        return len(self.layers)

    @property
    def block(self) -> int:
        """Width of one embedding block."""
        width = self.k if self.m is None else self.m + 2
        return width * self.N

    @property
    def d(self) -> int:
        return self.block * (self.L + 2)

    @property
    def T(self) -> int:
        return self.k * self.N


@dataclass(frozen=True)
class ForwardCache:
    """States X^(0)..X^(L) and scores S^(1)..S^(L) of one forward pass."""

    x: tuple[np.ndarray, ...]
    scores: tuple[np.ndarray, ...]


def value_matrix_for(layer: int, L: int, block: int) -> np.ndarray:
    """The canonical fixed value matrix of one layer.

    A pure block shift: copies embedding block layer+1 into block layer+2
    (1-based), leaving everything else untouched through the residual.
    """
    shift = np.zeros((L + 2, L + 2))
    shift[layer + 1, layer] = 1.0
    return np.kron(shift, np.eye(block))


def softmax_columns(scores: np.ndarray) -> np.ndarray:
    """Column-wise softmax, stabilized by subtracting each column's max.

    The stabilization is load-bearing: trained logits reach magnitudes well
    past the overflow point of exp.
    """
    z = np.asarray(scores, dtype=float)
    if np.isnan(z).any():
        raise ValueError("NaN entries in attention scores")
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def attention_forward(
    X: np.ndarray, layer: AttentionLayer
) -> tuple[np.ndarray, np.ndarray]:
    """One residual attention step; returns (new state, score matrix)."""
    d = layer.w_kq.shape[0]
    if X.shape[0] != d:
        raise ValueError(f"state has {X.shape[0]} rows, layer expects {d}")
    S = softmax_columns(X.T @ layer.w_kq @ X)
    return X + layer.w_ov @ X @ S, S


def forward(params: TransformerParams, X0) -> ForwardCache:
    """Run all layers, retaining every state and score matrix."""
    X = X0.data if hasattr(X0, "data") else np.asarray(X0, dtype=float)
    xs = [X]
    scores = []
    for layer in params.layers:
        X, S = attention_forward(X, layer)
        xs.append(X)
        scores.append(S)
    return ForwardCache(tuple(xs), tuple(scores))


def readout_logits(
    params: TransformerParams, cache: ForwardCache, stage: int, q: Query
) -> np.ndarray:
    """Stage readout applied to the final-layer column at the query."""
    if not 1 <= stage <= params.L:
        raise ValueError(f"stage {stage} out of range 1..{params.L}")
    c = (q.i - 1) * params.N + (q.j - 1)
    return params.readouts[stage - 1].T @ cache.x[-1][:, c]


def readout_probs(
    params: TransformerParams, cache: ForwardCache, stage: int, q: Query
) -> np.ndarray:
    """Softmax of the stage readout at the query; sums to one."""
    u = readout_logits(params, cache, stage, q)
    return softmax_columns(u.reshape(-1, 1))[:, 0]


def save_checkpoint(path, params: TransformerParams) -> None:
    """Versioned binary checkpoint: dims header plus row-major matrices."""
    arrays = {
        "version": np.int64(CHECKPOINT_VERSION),
        "k": np.int64(params.k),
        "N": np.int64(params.N),
        "L": np.int64(params.L),
        "m": np.int64(-1 if params.m is None else params.m),
    }
    for idx, layer in enumerate(params.layers, start=1):
        arrays[f"w_kq_{idx}"] = layer.w_kq
        arrays[f"w_ov_{idx}"] = layer.w_ov
    for idx, psi in enumerate(params.readouts, start=1):
        arrays[f"psi_{idx}"] = psi
    np.savez_compressed(path, **arrays)


def load_checkpoint(path) -> TransformerParams:
    with np.load(path) as z:
        version = int(z["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        k, N, L = int(z["k"]), int(z["N"]), int(z["L"])
        m = int(z["m"]) if "m" in z else -1
        layers = tuple(
            AttentionLayer(z[f"w_kq_{i}"], z[f"w_ov_{i}"]) for i in range(1, L + 1)
        )
        readouts = tuple(z[f"psi_{i}"] for i in range(1, L + 1))
    return TransformerParams(layers, readouts, k, N, None if m < 0 else m)
