import itertools
import math

import numpy as np
import pytest

from permhop.perms import Permutation, agreement, compose, sample_uniform
from permhop.sqgeom import (
    FunctionPair,
    build_near_orth_family,
    exhaustive_agreement_probability,
    greedy_perm_packing,
    greedy_tuple_packing,
    inner_product_closed,
    inner_product_mc,
    packing_witness,
)
from permhop.task import HiddenPerms, sample_hidden


def _pair_of(images_a, images_b):
    pa = HiddenPerms(tuple(Permutation(img) for img in images_a))
    pb = HiddenPerms(tuple(Permutation(img) for img in images_b))
    return FunctionPair(pa, pb)


def test_closed_form_hand_values():
    idp = [1, 2, 3]
    swap = [2, 1, 3]
    rot = [1, 3, 2]
    # agreements both 1: (1-1)^2 = 0
    assert inner_product_closed(_pair_of([idp, idp], [swap, swap])) == 0.0
    # one factor (3-1), one (1-1): still 0
    assert inner_product_closed(_pair_of([idp, idp], [idp, swap])) == 0.0
    assert inner_product_closed(_pair_of([idp, idp], [rot, rot])) == 0.0
    # identical tuples: squared norm 1 - 1/N
    assert inner_product_closed(_pair_of([idp, idp], [idp, idp])) == pytest.approx(2 / 3)


def test_norm_is_one_minus_inv_n():
    rng = np.random.default_rng(0)
    for N, k in [(3, 2), (5, 3), (7, 4)]:
        pi = sample_hidden(N, k, rng)
        assert inner_product_closed(FunctionPair(pi, pi)) == pytest.approx(1 - 1 / N)


def test_single_agreement_annihilates():
    rng = np.random.default_rng(1)
    for _ in range(20):
        pi = sample_hidden(4, 3, rng)
        rho_perms = list(sample_hidden(4, 3, rng).perms)
        # force one slot to agree in exactly one position with pi
        base = pi.perms[1]
        cand = None
        while cand is None:
            q = sample_uniform(4, rng)
            if agreement(base, q) == 1:
                cand = q
        rho_perms[1] = cand
        val = inner_product_closed(FunctionPair(pi, HiddenPerms(tuple(rho_perms))))
        assert val == 0.0


def test_closed_form_rejects_n1():
    with pytest.raises(ValueError):
        inner_product_closed(_pair_of([[1]], [[1]]))


def test_closed_vs_exhaustive_108_cases():
    rng = np.random.default_rng(2)
    for _ in range(10):
        pair = FunctionPair(sample_hidden(3, 2, rng), sample_hidden(3, 2, rng))
        exact = exhaustive_agreement_probability(pair) - 1 / 3
        assert abs(exact - inner_product_closed(pair)) < 1e-12


def test_mc_exact_for_identical_pair():
    rng = np.random.default_rng(3)
    pi = sample_hidden(4, 2, rng)
    est, se = inner_product_mc(FunctionPair(pi, pi), 500, rng)
    assert est == pytest.approx(1 - 1 / 4)


def test_mc_matches_closed_form():
    rng = np.random.default_rng(4)
    pair = FunctionPair(sample_hidden(5, 3, rng), sample_hidden(5, 3, rng))
    closed = inner_product_closed(pair)
    est, se = inner_product_mc(pair, 200_000, rng)
    assert abs(est - closed) <= 4 * se


def test_mc_cyclic_matches_non_cyclic():
    rng = np.random.default_rng(5)
    pair = FunctionPair(sample_hidden(4, 2, rng), sample_hidden(4, 2, rng))
    closed = inner_product_closed(pair)
    est, se = inner_product_mc(pair, 150_000, rng, cyclic=True)
    assert abs(est - closed) <= 4 * se


def test_relabeling_invariance():
    rng = np.random.default_rng(6)
    for _ in range(10):
        N, k = 5, 3
        pi = sample_hidden(N, k, rng)
        rho = sample_hidden(N, k, rng)
        gamma = sample_uniform(N, rng)
        from permhop.perms import inverse

        conj = lambda p: compose(gamma, compose(p, inverse(gamma)))
        pi2 = HiddenPerms(tuple(conj(p) for p in pi.perms))
        rho2 = HiddenPerms(tuple(conj(p) for p in rho.perms))
        a = inner_product_closed(FunctionPair(pi, rho))
        b = inner_product_closed(FunctionPair(pi2, rho2))
        assert a == pytest.approx(b, abs=1e-15)


def test_perm_packing_vacuous_radius():
    out = greedy_perm_packing(3, 4, mode="exhaustive")
    assert len(out) == 6


def test_perm_packing_size_bound_and_constraint():
    out = greedy_perm_packing(4, 2, mode="exhaustive")
    assert len(out) >= 2  # the r! lower bound
    for a, b in itertools.combinations(out, 2):
        assert agreement(a, b) < 2
    out5 = greedy_perm_packing(5, 2, mode="exhaustive")
    for a, b in itertools.combinations(out5, 2):
        assert agreement(a, b) <= 1


def test_perm_packing_sampled_mode():
    rng = np.random.default_rng(7)
    out = greedy_perm_packing(12, 3, mode="sampled", budget=300, rng=rng)
    assert len(out) >= 2
    for a, b in itertools.combinations(out, 2):
        assert agreement(a, b) < 3
    with pytest.raises(ValueError):
        greedy_perm_packing(12, 3, mode="exhaustive")
    with pytest.raises(ValueError):
        greedy_perm_packing(4, 2, mode="sampled", budget=0, rng=rng)


def test_tuple_packing():
    out = greedy_tuple_packing(2, 2, mode="exhaustive")
    assert len(out) >= 1  # M^{k/2} 2^{-k} = 1
    out34 = greedy_tuple_packing(3, 4, mode="exhaustive")
    assert len(out34) >= 3
    for a, b in itertools.combinations(out34, 2):
        agree = sum(x == y for x, y in zip(a, b))
        assert agree <= 2  # differ in more than k/2 coordinates
    with pytest.raises(ValueError):
        greedy_tuple_packing(100, 8, mode="exhaustive")  # blowup guard


def test_family_bound_n8_r2_k4():
    rng = np.random.default_rng(8)
    fam = build_near_orth_family(8, 4, 2, mode="exhaustive", rng=rng)
    assert fam.bound == pytest.approx(0.25)
    assert fam.max_abs_inner <= 0.25
    assert fam.certified_size_bound in (True, False)


def test_family_size_n8_r3_k4():
    rng = np.random.default_rng(9)
    fam = build_near_orth_family(8, 4, 3, mode="exhaustive", rng=rng)
    assert len(fam.members) >= 3
    assert fam.max_abs_inner <= (6 / 8) ** 2
    blob = fam.to_json()
    assert '"members"' in blob


def test_family_of_size_one_is_vacuous():
    # a radius-1 packing keeps exactly one permutation per agreement class;
    # with pool size >= 2 but tuple budget tiny the family can shrink to 1
    rng = np.random.default_rng(10)
    fam = build_near_orth_family(4, 2, 2, mode="sampled", rng=rng,
                                 perm_budget=50, tuple_budget=1)
    assert len(fam.members) >= 1
    assert fam.max_abs_inner <= fam.bound + 1e-12


def test_packing_witness_n16_k2():
    rng = np.random.default_rng(11)
    fam, min_dist = packing_witness(16, 2, mode="sampled", rng=rng)
    assert len(fam.members) >= 2
    assert min_dist >= 0.5


def test_witness_distance_arithmetic():
    # any pair with inner product <= 1/4 at N >= 4 sits at squared distance
    # 2 - 2/N - 2<f,f'> >= 1
    N = 4
    bound = 2 - 2 / N - 2 * 0.25
    assert bound >= 1.0
