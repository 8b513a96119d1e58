"""Interleaved composition targets and labeled-data sampling.

A target is a tuple of k hidden permutations (the "in-weights" secret); an
input is a tuple of k context permutations plus a start element.  The basic
primitive is the partial chain

    hop(i, r, j) = s_{i+r-1}(p_{i+r-1}( ... s_i(p_i(j)) ... ))

with all block indices wrapped cyclically into {1..k}.  The full k-step
target is hop(1, k, .) and its cyclic variant is hop(i, k, .).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from permhop.perms import Permutation, compose, sample_uniform


def _wrap(i: int, k: int) -> int:
    return (i - 1) % k + 1


def _check_tuple(perms, kind: str):
    if len(perms) == 0:
        raise ValueError(f"{kind} needs at least one permutation")
    n = perms[0].n
    for p in perms:
        if p.n != n:
            raise ValueError(f"{kind} mixes sizes {n} and {p.n}")
    return n


@dataclass(frozen=True)
class HiddenPerms:
    """The target's secret tuple (p_1..p_k)."""

    perms: tuple[Permutation, ...]

    def __post_init__(self):
        object.__setattr__(self, "perms", tuple(self.perms))
        _check_tuple(self.perms, "HiddenPerms")

    @property
    def n(self) -> int:
        return self.perms[0].n

    @property
    def k(self) -> int:
        return len(self.perms)


@dataclass(frozen=True)
class InputPerms:
    """A context tuple (s_1..s_k), one permutation per block."""

    perms: tuple[Permutation, ...]

    def __post_init__(self):
        object.__setattr__(self, "perms", tuple(self.perms))
        _check_tuple(self.perms, "InputPerms")

    @property
    def n(self) -> int:
        return self.perms[0].n

    @property
    def k(self) -> int:
        return len(self.perms)

    def to_json(self) -> list[list[int]]:
        return [p.to_json() for p in self.perms]

    @classmethod
    def from_json(cls, data) -> "InputPerms":
        return cls(tuple(Permutation.from_json(row) for row in data))


@dataclass(frozen=True)
class Query:
    """A position (block i, element j), both 1-based."""

    i: int
    j: int


@dataclass(frozen=True)
class HopSample:
    """One labeled training triple: (sigma, query, hop length) -> label."""

    sigma: InputPerms
    query: Query
    r: int
    label: int


def hop(pi: HiddenPerms, sigma: InputPerms, i: int, r: int, j: int) -> int:
    """Apply the length-r interleaved chain starting at block i to j."""
    k, n = pi.k, pi.n
    if sigma.k != k or sigma.n != n:
        raise ValueError("hidden and input tuples disagree on (N, k)")
    if not 1 <= i <= k:
        raise ValueError(f"block index {i} out of range 1..{k}")
    if not 1 <= j <= n:
        raise ValueError(f"element {j} out of range 1..{n}")
    if r < 1:
        raise ValueError("hop length must be >= 1")
    x = j
    for t in range(r):
        b = _wrap(i + t, k)
        x = sigma.perms[b - 1](pi.perms[b - 1](x))
    return x


def eval_kfold(pi: HiddenPerms, sigma: InputPerms, x: int) -> int:
    """The full k-step target: hop(1, k, x)."""
    return hop(pi, sigma, 1, pi.k, x)


def eval_cyclic(pi: HiddenPerms, sigma: InputPerms, i: int, x: int) -> int:
    """The cyclic variant: the full chain started at block i."""
    return hop(pi, sigma, i, pi.k, x)


def composed_permutation(pi: HiddenPerms, sigma: InputPerms, i: int = 1) -> Permutation:
    """Materialize the single permutation equal to hop(i, k, .).

    Independent route to the same function as chaining `hop`; the
    construction verifier and the task tests use it as an oracle.
    """
    k = pi.k
    acc = Permutation.identity(pi.n)
    for t in range(k):
        b = _wrap(i + t, k)
        acc = compose(sigma.perms[b - 1], compose(pi.perms[b - 1], acc))
    return acc


def sample_input(N: int, k: int, rng: np.random.Generator) -> InputPerms:
    return InputPerms(tuple(sample_uniform(N, rng) for _ in range(k)))


def sample_hidden(N: int, k: int, rng: np.random.Generator) -> HiddenPerms:
    return HiddenPerms(tuple(sample_uniform(N, rng) for _ in range(k)))


def sample_hidden_msparse(
    N: int, k: int, m: int, rng: np.random.Generator
) -> tuple[HiddenPerms, tuple[int, ...]]:
    """Hidden tuple with exactly m slots drawn uniformly, identity elsewhere.

    Returns the tuple and the chosen index set (sorted, 1-based).
    """
    if not 1 <= m <= k:
        raise ValueError(f"sparse count m={m} must satisfy 1 <= m <= k={k}")
    chosen = np.sort(rng.choice(k, size=m, replace=False)) + 1
    perms = [
        sample_uniform(N, rng) if i in chosen else Permutation.identity(N)
        for i in range(1, k + 1)
    ]
    return HiddenPerms(tuple(perms)), tuple(int(c) for c in chosen)


def sample_batch(
    pi: HiddenPerms, M: int, r: int, rng: np.random.Generator
) -> list[HopSample]:
    """M independent samples of the hop-r task: fresh sigma per sample,
    query (i, j) uniform over [k] x [N]."""
    if M < 1:
        raise ValueError("batch size must be >= 1")
    out = []
    for _ in range(M):
        sigma = sample_input(pi.n, pi.k, rng)
        i = int(rng.integers(1, pi.k + 1))
        j = int(rng.integers(1, pi.n + 1))
        out.append(HopSample(sigma, Query(i, j), r, hop(pi, sigma, i, r, j)))
    return out


def sample_batch_mixture(
    pi: HiddenPerms, M: int, hops: tuple[int, ...], rng: np.random.Generator
) -> list[HopSample]:
    """M sequences, each labeled at every hop length in `hops`.

    All samples of one sequence share the sigma object and the query, so the
    gradient engine can run a single forward pass per sequence.
    """
    out = []
    for _ in range(M):
        sigma = sample_input(pi.n, pi.k, rng)
        i = int(rng.integers(1, pi.k + 1))
        j = int(rng.integers(1, pi.n + 1))
        q = Query(i, j)
        for r in hops:
            out.append(HopSample(sigma, q, r, hop(pi, sigma, i, r, j)))
    return out


def hop_labels_vectorized(
    pi_images: np.ndarray,
    sigma_images: np.ndarray,
    starts0: np.ndarray,
    elements0: np.ndarray,
    hops: tuple[int, ...],
) -> np.ndarray:
    """Labels (0-based) for a batch at several hop lengths, sharing chains.

    pi_images: (k, N) 0-based; sigma_images: (B, k, N) 0-based;
    starts0/elements0: (B,) 0-based query blocks and elements.
    Returns (B, len(hops)) with hops assumed sorted ascending.
    """
    B = sigma_images.shape[0]
    k = pi_images.shape[0]
    rows = np.arange(B)
    x = elements0.copy()
    out = np.empty((B, len(hops)), dtype=np.int64)
    want = {r: idx for idx, r in enumerate(hops)}
    for t in range(max(hops)):
        blk = (starts0 + t) % k
        x = sigma_images[rows, blk, pi_images[blk, x]]
        if t + 1 in want:
            out[:, want[t + 1]] = x
    return out


def sample_batch_images(
    pi: HiddenPerms, M: int, hops: tuple[int, ...], rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized batch draw: (sigma images (M,k,N), query columns (M,),
    labels (M,len(hops))), everything 0-based.

    Row-wise `Generator.permuted` shuffles are unbiased and deterministic
    per seed, so this is the fast twin of sample_batch for the trainers.
    """
    if M < 1:
        raise ValueError("batch size must be >= 1")
    N, k = pi.n, pi.k
    base = np.tile(np.arange(N, dtype=np.int64), (M, k, 1))
    sigma_images = rng.permuted(base, axis=2)
    starts0 = rng.integers(0, k, size=M)
    elements0 = rng.integers(0, N, size=M)
    pi_images = np.stack([p._img0 for p in pi.perms])  # noqa: SLF001
    labels0 = hop_labels_vectorized(pi_images, sigma_images, starts0, elements0, hops)
    return sigma_images, starts0 * N + elements0, labels0


def samples_to_jsonl(samples: list[HopSample]) -> str:
    lines = []
    for s in samples:
        lines.append(
            json.dumps(
                {
                    "sigma": s.sigma.to_json(),
                    "i": s.query.i,
                    "j": s.query.j,
                    "r": s.r,
                    "label": s.label,
                },
                separators=(",", ":"),
            )
        )
    return "\n".join(lines) + "\n"


def samples_from_jsonl(text: str) -> list[HopSample]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        out.append(
            HopSample(
                InputPerms.from_json(d["sigma"]),
                Query(int(d["i"]), int(d["j"])),
                int(d["r"]),
                int(d["label"]),
            )
        )
    return out
