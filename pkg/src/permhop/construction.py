"""Hand-built weights that solve the composition task exactly (up to softmax
temperature), plus a verifier that checks them against the group oracle.

The recipe, at finite inverse temperature beta:

* layer 1 scores beta whenever the key's first block is (i, p_i(j)) for the
  query (i, j) -- the hidden tuple lives in this matrix and nowhere else;
* layer l+1 (l >= 1) compares the key's first block against the query's
  block l+2 shifted one step in the block index, scoring beta on the match;
  block indices wrap modulo k throughout;
* every value matrix copies block l+1 of the attended column into block l+2
  of the query column;
* readouts sum block l+2 over the k block-slots, which is an exact one-hot
  readout of the length-2^(l-1) chain at every query in the saturated limit.

The m-sparse variant swaps the block-index one-hot for the (m+2)-dim code of
`embedding.msparse_position_vectors`; matching on the trig pair costs a
separation of only beta*(1 - cos(2*pi/k)), hence the two-scale config.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from permhop.embedding import embed, embed_msparse, msparse_position_vectors
from permhop.perms import Permutation
from permhop.task import (
    HiddenPerms,
    InputPerms,
    composed_permutation,
    hop,
    sample_input,
)
from permhop.transformer import (
    AttentionLayer,
    TransformerParams,
    forward,
    value_matrix_for,
)


@dataclass(frozen=True)
class ConstructionConfig:
    """Finite-temperature settings standing in for the saturated limit."""

    beta: float = 60.0
    beta1: float = 40.0
    beta2: float = 400.0
    tol: float = 1e-6

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.beta1 < 10 or self.beta2 < 10 * self.beta1:
            raise ValueError("m-sparse scales need beta1 >= 10 and beta2 >= 10*beta1")
        if not 0 < self.tol <= 1:
            raise ValueError("tol must lie in (0, 1]")


def _require_power_of_two(k: int) -> int:
    if k < 1 or k & (k - 1):
        raise ValueError(f"k must be a power of two, got {k}")
    return k.bit_length() - 1  # log2 k


def _wrap0(i: int, k: int) -> int:
    return i % k


def uniform_readout(stage: int, k: int, N: int, L: int, scale: float = 1.0) -> np.ndarray:
    """Readout summing block stage+2 over the k block-slots.

    Reads the chain value regardless of the query's start block, so it
    decodes cyclic queries too; at the start-1 query it coincides with a
    single-slot readout in the saturated limit.
    """
    kN = k * N
    psi = np.zeros((kN * (L + 2), N))
    psi[kN * (stage + 1) : kN * (stage + 2), :] = scale * np.kron(
        np.ones(k), np.eye(N)
    ).T
    return psi


def build_exact(pi: HiddenPerms, cfg: ConstructionConfig) -> TransformerParams:
    """Weights expressing the k-step task exactly as beta -> infinity."""
    k, N = pi.k, pi.n
    L = _require_power_of_two(k) + 1
    kN = k * N
    d = kN * (L + 2)

    layers = []

    # Layer 1: key block 1 against query block 1, seeded with the hidden tuple.
    A = np.zeros((kN, kN))
    for i in range(k):
        p = pi.perms[i]
        for j in range(N):
            A[i * N + (p(j + 1) - 1), i * N + j] = cfg.beta
    w1 = np.zeros((d, d))
    w1[:kN, :kN] = A
    layers.append(AttentionLayer(w1, value_matrix_for(1, L, kN)))

    # Layers l+1: key block 1 against query block l+2 through a one-step
    # cyclic shift of the block index.
    shift = np.zeros((k, k))
    for a in range(k):
        shift[_wrap0(a + 1, k), a] = 1.0
    hopblock = cfg.beta * np.kron(shift, np.eye(N))
    for layer in range(2, L + 1):
        w = np.zeros((d, d))
        w[:kN, kN * layer : kN * (layer + 1)] = hopblock
        layers.append(AttentionLayer(w, value_matrix_for(layer, L, kN)))

    readouts = tuple(uniform_readout(stage, k, N, L) for stage in range(1, L + 1))
    return TransformerParams(tuple(layers), readouts, k, N)


def build_msparse(
    pi: HiddenPerms, sparse_set: tuple[int, ...], cfg: ConstructionConfig
) -> TransformerParams:
    """m-sparse weights: embedding width (m+2)N(L+2).

    The hidden permutations outside `sparse_set` must be the identity.
    Only the final-stage readout is meaningful (at queries in block 1, per
    the construction); earlier readouts are zero.
    """
    k, N = pi.k, pi.n
    L = _require_power_of_two(k) + 1
    m = len(sparse_set)
    if m > k:
        raise ValueError(f"sparse set size {m} exceeds k={k}")
    for i in range(1, k + 1):
        if i not in sparse_set and not pi.perms[i - 1].is_identity():
            raise ValueError(f"hidden permutation {i} outside the sparse set is not identity")
    P = msparse_position_vectors(k, tuple(sparse_set))
    w = (m + 2) * N
    d = w * (L + 2)

    # Layer 1: trig term scores beta1 on matching elements; the beta2 term
    # pins attention to (i, p_i(j)) for the sparse blocks.
    trig = np.zeros((m + 2, m + 2))
    trig[m:, m:] = np.eye(2)
    A1 = cfg.beta1 * np.kron(trig, np.eye(N))
    for y, idx in enumerate(sorted(sparse_set)):
        p = pi.perms[idx - 1]
        sel = np.zeros((m + 2, m + 2))
        sel[y, y] = 1.0
        adj = np.zeros((N, N))
        for j in range(1, N + 1):
            adj[p(j) - 1, j - 1] = 1.0
        A1 += cfg.beta2 * np.kron(sel, adj)
    w1 = np.zeros((d, d))
    w1[:w, :w] = A1
    layers = [AttentionLayer(w1, value_matrix_for(1, L, w))]

    # Layers l+1: rotate the trig pair one block step, zero the one-hot part.
    ang = 2.0 * np.pi / k
    rot = np.zeros((m + 2, m + 2))
    rot[m:, m:] = [[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]]
    hopblock = cfg.beta2 * np.kron(rot, np.eye(N))
    for layer in range(2, L + 1):
        wl = np.zeros((d, d))
        wl[:w, w * layer : w * (layer + 1)] = hopblock
        layers.append(AttentionLayer(wl, value_matrix_for(layer, L, w)))

    # Final readout: block L+2 weighted by the code of block-slot k,
    # normalized so the saturated logits are exactly the one-hot label.
    pk = P[k - 1] / float(P[k - 1] @ P[k - 1])
    psi_last = np.zeros((d, N))
    psi_last[w * (L + 1) :, :] = np.kron(pk[:, None], np.eye(N))
    readouts = tuple([np.zeros((d, N)) for _ in range(L - 1)] + [psi_last])
    return TransformerParams(tuple(layers), readouts, k, N, m)


def prescribed_position(
    pi: HiddenPerms, sigma: InputPerms, layer: int, i: int, j: int
) -> tuple[int, int]:
    """Key position (block, element) that layer `layer` should attend to
    from query (i, j): layer 1 targets (i, p_i(j)); layer l >= 2 targets the
    half-chain position (i + 2^(l-2), hop(i, 2^(l-2), j)), wrapped."""
    k = pi.k
    if layer == 1:
        return i, pi.perms[i - 1](j)
    step = 2 ** (layer - 2)
    return (i + step - 1) % k + 1, hop(pi, sigma, i, step, j)


@dataclass
class VerificationReport:
    """Outcome of checking constructed weights against the group oracle."""

    trials: int
    failures: int
    min_attention_per_layer: list[float]
    max_readout_deviation: float
    tol: float
    first_unsaturated_layer: int | None
    per_trial_pass: list[bool] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.failures == 0 and self.first_unsaturated_layer is None

    def to_json(self) -> str:
        return json.dumps(
            {
                "trials": self.trials,
                "failures": self.failures,
                "min_attention_per_layer": self.min_attention_per_layer,
                "max_readout_deviation": self.max_readout_deviation,
                "tol": self.tol,
                "first_unsaturated_layer": self.first_unsaturated_layer,
                "passed": self.passed,
            },
            indent=2,
        )


def verify_construction(
    params: TransformerParams,
    pi: HiddenPerms,
    trials: int,
    rng: np.random.Generator,
    tol: float = 1e-6,
    sparse_set: tuple[int, ...] | None = None,
) -> VerificationReport:
    """Run random (sigma, x) instances through the weights.

    A trial passes when the decoded final-stage output at the query (1, x)
    matches the materialized composition oracle.  Attention mass at every
    prescribed (layer, query) position and the final readout's deviation
    from a one-hot are tracked across all trials.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    k, N, L = params.k, params.N, params.L
    min_attn = np.ones(L)
    max_dev = 0.0
    per_trial = []
    failures = 0
    for _ in range(trials):
        sigma = sample_input(N, k, rng)
        x = int(rng.integers(1, N + 1))
        if sparse_set is None:
            X0 = embed(sigma, L)
        else:
            X0 = embed_msparse(sigma, sparse_set, L)
        cache = forward(params, X0)
        for layer in range(1, L + 1):
            S = cache.scores[layer - 1]
            for i in range(1, k + 1):
                for j in range(1, N + 1):
                    bi, bj = prescribed_position(pi, sigma, layer, i, j)
                    mass = S[(bi - 1) * N + (bj - 1), (i - 1) * N + (j - 1)]
                    if mass < min_attn[layer - 1]:
                        min_attn[layer - 1] = mass
        target = composed_permutation(pi, sigma)(x)
        logits = params.readouts[L - 1].T @ cache.x[-1][:, x - 1]
        onehot = np.zeros(N)
        onehot[target - 1] = 1.0
        max_dev = max(max_dev, float(np.abs(logits - onehot).max()))
        ok = int(np.argmax(logits)) + 1 == target
        per_trial.append(bool(ok))
        failures += not ok
    unsat = None
    for layer in range(L):
        if min_attn[layer] < 1.0 - tol:
            unsat = layer + 1
            break
    return VerificationReport(
        trials=trials,
        failures=failures,
        min_attention_per_layer=[float(v) for v in min_attn],
        max_readout_deviation=max_dev,
        tol=tol,
        first_unsaturated_layer=unsat,
        per_trial_pass=per_trial,
    )
