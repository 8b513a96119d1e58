"""Correlation geometry of composition functions.

Two composition targets correlate only through the pointwise agreement of
their hidden tuples: the inner product

    <f, f'> = P[f(sigma, x) = f'(sigma, x)] - 1/N

has the closed form  prod_i (agreement(p_i, q_i) - 1) / (N (N-1)^(k-1)).
Greedy packings of permutations (pairwise agreement < r) and of index
tuples (pairwise coordinate agreement <= k/2) combine into large families
with pairwise correlation at most (2r/N)^(k/2).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from permhop.perms import Permutation, agreement, enumerate_all, sample_uniform
from permhop.task import HiddenPerms, eval_cyclic, eval_kfold, sample_input

EXHAUSTIVE_TUPLE_LIMIT = 10_000_000


@dataclass(frozen=True)
class FunctionPair:
    """Two targets sharing (N, k), compared under the task inner product."""

    pi: HiddenPerms
    rho: HiddenPerms

    def __post_init__(self):
        if self.pi.n != self.rho.n or self.pi.k != self.rho.k:
            raise ValueError("pair must share N and k")


@dataclass
class NearOrthFamily:
    """A set of targets with certified pairwise correlation bound."""

    r: int
    members: list[HiddenPerms]
    perm_pool: list[Permutation]
    index_pool: list[tuple[int, ...]]
    bound: float
    max_abs_inner: float
    certified_size_bound: bool  # greedy-size guarantee only in exhaustive mode

    def to_json(self) -> str:
        return json.dumps(
            {
                "r": self.r,
                "bound": self.bound,
                "max_abs_inner": self.max_abs_inner,
                "certified_size_bound": self.certified_size_bound,
                "members": [[list(p.images) for p in m.perms] for m in self.members],
            }
        )


def inner_product_closed(pair: FunctionPair) -> float:
    """Exact inner product from the agreement counts."""
    N, k = pair.pi.n, pair.pi.k
    if N < 2:
        raise ValueError("the closed form divides by N-1; need N >= 2")
    prod = 1.0
    for p, q in zip(pair.pi.perms, pair.rho.perms):
        prod *= agreement(p, q) - 1
    return prod / (N * (N - 1) ** (k - 1))


def inner_product_mc(
    pair: FunctionPair,
    samples: int,
    rng: np.random.Generator,
    cyclic: bool = False,
) -> tuple[float, float]:
    """Monte-Carlo estimate: agreement frequency minus 1/N, with its
    binomial standard error.  The cyclic flag also draws the start block."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    N, k = pair.pi.n, pair.pi.k
    hits = 0
    for _ in range(samples):
        sigma = sample_input(N, k, rng)
        x = int(rng.integers(1, N + 1))
        if cyclic:
            i = int(rng.integers(1, k + 1))
            hits += eval_cyclic(pair.pi, sigma, i, x) == eval_cyclic(
                pair.rho, sigma, i, x
            )
        else:
            hits += eval_kfold(pair.pi, sigma, x) == eval_kfold(pair.rho, sigma, x)
    p_hat = hits / samples
    se = math.sqrt(max(p_hat * (1 - p_hat), 1e-12) / samples)
    return p_hat - 1.0 / N, se


def exhaustive_agreement_probability(pair: FunctionPair) -> float:
    """P[f = f'] by full enumeration of (sigma, x); factorial^k work."""
    N, k = pair.pi.n, pair.pi.k
    if math.factorial(N) ** k * N > 10_000_000:
        raise ValueError("instance too large for exhaustive enumeration")
    pool = enumerate_all(N)
    hits = total = 0
    from permhop.task import InputPerms

    for combo in itertools.product(pool, repeat=k):
        sigma = InputPerms(combo)
        for x in range(1, N + 1):
            total += 1
            hits += eval_kfold(pair.pi, sigma, x) == eval_kfold(pair.rho, sigma, x)
    return hits / total


def greedy_perm_packing(
    N: int,
    r: int,
    mode: str = "exhaustive",
    budget: int = 1000,
    rng: np.random.Generator | None = None,
) -> list[Permutation]:
    """Greedy packing of S_N with pairwise agreement < r.

    Exhaustive mode scans all of S_N in lexicographic order (N <= 8) and is
    maximal with respect to that order; sampled mode draws `budget` uniform
    candidates and keeps the compatible ones.
    """
    if r < 1:
        raise ValueError("agreement radius must be >= 1")
    if mode == "exhaustive":
        candidates = enumerate_all(N)  # enforces the N <= 8 cap
    elif mode == "sampled":
        if budget < 1:
            raise ValueError("sampled mode needs budget >= 1")
        if rng is None:
            raise ValueError("sampled mode needs an rng")
        candidates = (sample_uniform(N, rng) for _ in range(budget))
    else:
        raise ValueError(f"unknown mode {mode!r}")

    kept_imgs: list[np.ndarray] = []
    kept: list[Permutation] = []
    for cand in candidates:
        img = np.asarray(cand.images)
        if kept_imgs:
            agree = (np.stack(kept_imgs) == img).sum(axis=1)
            if int(agree.max()) >= r:
                continue
            if int(agree.max()) == cand.n and mode == "sampled":
                continue  # duplicate draw
        kept_imgs.append(img)
        kept.append(cand)
    if mode == "sampled":
        # drop exact duplicates that slipped past the agreement test (r > N)
        uniq, out = set(), []
        for p in kept:
            if p.images not in uniq:
                uniq.add(p.images)
                out.append(p)
        kept = out
    return kept


def greedy_tuple_packing(
    pool_size: int,
    k: int,
    mode: str = "exhaustive",
    budget: int = 1000,
    rng: np.random.Generator | None = None,
) -> list[tuple[int, ...]]:
    """Greedy packing of [pool_size]^k with pairwise coordinate agreement
    at most k/2 (so any two kept tuples differ in more than k/2 slots)."""
    if pool_size < 2 or k < 2:
        raise ValueError("need pool_size >= 2 and k >= 2")
    if mode == "exhaustive":
        if pool_size**k > EXHAUSTIVE_TUPLE_LIMIT:
            raise ValueError(
                f"{pool_size}^{k} exceeds the exhaustive limit; use sampled mode"
            )
        candidates = itertools.product(range(1, pool_size + 1), repeat=k)
    elif mode == "sampled":
        if budget < 1:
            raise ValueError("sampled mode needs budget >= 1")
        if rng is None:
            raise ValueError("sampled mode needs an rng")
        candidates = (
            tuple(int(v) + 1 for v in rng.integers(0, pool_size, size=k))
            for _ in range(budget)
        )
    else:
        raise ValueError(f"unknown mode {mode!r}")

    kept_arr: list[np.ndarray] = []
    kept: list[tuple[int, ...]] = []
    limit = k / 2.0
    for cand in candidates:
        arr = np.asarray(cand)
        if kept_arr:
            agree = (np.stack(kept_arr) == arr).sum(axis=1)
            if float(agree.max()) > limit:
                continue
        kept_arr.append(arr)
        kept.append(tuple(cand))
    return kept


def build_near_orth_family(
    N: int,
    k: int,
    r: int,
    mode: str = "exhaustive",
    rng: np.random.Generator | None = None,
    perm_budget: int = 2000,
    tuple_budget: int = 4000,
    verify_pairs: int = 10_000,
) -> NearOrthFamily:
    """Compose the two packings into a family and verify its correlation
    bound |<f, f'>| <= (2r/N)^(k/2) on all pairs (or a random subset when
    there are more than `verify_pairs` of them)."""
    pool = greedy_perm_packing(N, r, mode, perm_budget, rng)
    M = len(pool)
    if M < 2:
        raise ValueError("permutation pool too small to form tuples")
    tuple_mode = mode
    if mode == "exhaustive" and M**k > EXHAUSTIVE_TUPLE_LIMIT:
        tuple_mode = "sampled"
        if rng is None:
            rng = np.random.default_rng(0)
    index_pool = greedy_tuple_packing(M, k, tuple_mode, tuple_budget, rng)
    members = [
        HiddenPerms(tuple(pool[a - 1] for a in alpha)) for alpha in index_pool
    ]
    bound = (2.0 * r / N) ** (k / 2.0)

    n_members = len(members)
    max_abs = 0.0
    if n_members >= 2:
        all_pairs = n_members * (n_members - 1) // 2
        if all_pairs <= verify_pairs:
            pairs = itertools.combinations(range(n_members), 2)
        else:
            check_rng = rng or np.random.default_rng(0)
            pairs = (
                tuple(sorted(check_rng.choice(n_members, size=2, replace=False)))
                for _ in range(verify_pairs)
            )
        for a, b in pairs:
            val = abs(inner_product_closed(FunctionPair(members[a], members[b])))
            max_abs = max(max_abs, val)
        if max_abs > bound + 1e-12:
            raise AssertionError(
                f"family violates its correlation bound: {max_abs} > {bound}"
            )
    return NearOrthFamily(
        r=r,
        members=members,
        perm_pool=pool,
        index_pool=index_pool,
        bound=bound,
        max_abs_inner=max_abs,
        certified_size_bound=(mode == "exhaustive" and tuple_mode == "exhaustive"),
    )


def packing_witness(
    N: int, k: int, mode: str = "sampled", rng: np.random.Generator | None = None
) -> tuple[NearOrthFamily, float]:
    """Family at radius N/8 together with its min pairwise squared distance
    2(1 - 1/N) - 2<f, f'>, asserted to be at least 1/2."""
    r = max(2, N // 8)
    if N < 16:
        r = 2  # radius clamped; the N/8 choice needs N >= 16
    fam = build_near_orth_family(N, k, r, mode=mode, rng=rng)
    if len(fam.members) < 2:
        raise ValueError("witness needs at least two members")
    min_dist = math.inf
    pairs = itertools.combinations(range(len(fam.members)), 2)
    budgeted = itertools.islice(pairs, 20_000)
    for a, b in budgeted:
        ip = inner_product_closed(FunctionPair(fam.members[a], fam.members[b]))
        min_dist = min(min_dist, 2.0 * (1.0 - 1.0 / N) - 2.0 * ip)
    if min_dist < 0.5:
        raise AssertionError(f"packing distance {min_dist} fell below 1/2")
    return fam, min_dist
