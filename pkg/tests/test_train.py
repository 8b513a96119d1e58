import math

import numpy as np
import pytest

from permhop import grad
from permhop.construction import ConstructionConfig, build_exact
from permhop.embedding import embed
from permhop.perms import Permutation
from permhop.task import HiddenPerms, Query, sample_hidden, sample_input
from permhop.train import (
    TrainConfig,
    csv_header,
    evaluate,
    init_params,
    reports_to_csv,
    saturation,
    train_curriculum,
    train_mixture,
)
from permhop.transformer import TransformerParams, forward, readout_probs


def small_cfg(**kw):
    base = dict(k=4, N=3, beta0=0.5, eta=6125.8, M=12000, seed=3, eval_size=300)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(k=3, N=3)
    with pytest.raises(ValueError):
        TrainConfig(k=4, N=1)
    with pytest.raises(ValueError):
        TrainConfig(k=4, N=3, eta=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(k=4, N=3, M=(100, 100))  # needs L=3 entries
    assert TrainConfig(k=4, N=3, M=(100, 200, 300)).stage_M(2) == 200


def test_init_params_patterns():
    cfg = small_cfg(beta0=0.7)
    params = init_params(cfg)
    L, kN = cfg.L, cfg.k * cfg.N
    assert params.L == L
    for layer in params.layers:
        assert not layer.w_kq.any()
    for psi in params.readouts:
        nz = psi[psi != 0]
        assert nz.size == kN
        assert np.all(nz == cfg.beta0)
    # uniform output probabilities for every query and stage
    rng = np.random.default_rng(0)
    sigma = sample_input(cfg.N, cfg.k, rng)
    cache = forward(params, embed(sigma, L))
    for stage in range(1, L + 1):
        p = readout_probs(params, cache, stage, Query(2, 1))
        np.testing.assert_allclose(p, np.full(cfg.N, 1 / cfg.N), atol=1e-12)


def test_evaluate_at_init_and_on_construction():
    cfg = small_cfg()
    rng = np.random.default_rng(1)
    pi = sample_hidden(cfg.N, cfg.k, rng)
    params = init_params(cfg)
    loss, acc, dev = evaluate(params, pi, 1, 300, rng)
    assert loss == pytest.approx(math.log(cfg.N), abs=1e-9)
    assert abs(acc - 1 / cfg.N) < 0.15
    # construction weights with saturating readouts solve every stage
    cons = build_exact(pi, ConstructionConfig(beta=60.0))
    sharp = TransformerParams(
        cons.layers, tuple(60.0 * psi for psi in cons.readouts), cfg.k, cfg.N
    )
    for stage in (1, cons.L):
        loss, acc, dev = evaluate(sharp, pi, stage, 200, rng)
        assert acc == 1.0
        assert dev < 1e-6
        assert loss < 1e-6


def test_sup_dev_below_half_forces_full_accuracy():
    cfg = small_cfg()
    rng = np.random.default_rng(2)
    pi = sample_hidden(cfg.N, cfg.k, rng)
    cons = build_exact(pi, ConstructionConfig(beta=60.0))
    sharp = TransformerParams(
        cons.layers, tuple(60.0 * psi for psi in cons.readouts), cfg.k, cfg.N
    )
    _, acc, dev = evaluate(sharp, pi, cons.L, 150, rng)
    assert dev < 0.5 and acc == 1.0


def test_saturation_uniform_at_zero_kq():
    cfg = small_cfg()
    rng = np.random.default_rng(3)
    pi = sample_hidden(cfg.N, cfg.k, rng)
    params = init_params(cfg)
    for layer in range(1, cfg.L + 1):
        assert saturation(params, pi, layer, 50, rng) == 1.0 / (cfg.k * cfg.N)


def test_saturation_on_construction():
    cfg = small_cfg()
    rng = np.random.default_rng(4)
    pi = sample_hidden(cfg.N, cfg.k, rng)
    cons = build_exact(pi, ConstructionConfig(beta=60.0))
    for layer in range(1, cons.L + 1):
        assert saturation(cons, pi, layer, 60, rng) >= 1.0 - 1e-6


def test_curriculum_small_run_learns_all_hops():
    cfg = small_cfg()
    rng = np.random.default_rng(5)
    pi = sample_hidden(cfg.N, cfg.k, rng)
    params, reports = train_curriculum(pi, cfg)
    assert len(reports) == cfg.L
    for t, rep in enumerate(reports, start=1):
        r = 2 ** (t - 1)
        assert rep.hop_loss[r] < 0.05
        assert rep.hop_accuracy[r] >= 0.99
        assert rep.saturation[t - 1] >= 0.99
    # monotone curriculum: each hop improves at its own stage
    for t in range(2, cfg.L + 1):
        r = 2 ** (t - 1)
        assert reports[t - 1].hop_accuracy[r] > reports[t - 2].hop_accuracy[r]


def test_curriculum_identity_hidden_still_needs_learning():
    cfg = small_cfg()
    e = Permutation.identity(cfg.N)
    pi = HiddenPerms((e,) * cfg.k)
    params, reports = train_curriculum(pi, cfg)
    final = reports[-1]
    assert final.hop_accuracy[2 ** (cfg.L - 1)] >= 0.99


def test_values_frozen_and_determinism():
    cfg = small_cfg(M=2000, eval_size=100)
    rng = np.random.default_rng(6)
    pi = sample_hidden(cfg.N, cfg.k, rng)
    init = init_params(cfg)
    p1, _ = train_curriculum(pi, cfg)
    p2, _ = train_curriculum(pi, cfg)
    for a, b, c in zip(p1.layers, p2.layers, init.layers):
        assert np.array_equal(a.w_kq, b.w_kq)  # bit-identical reruns
        assert a.w_ov is c.w_ov or np.array_equal(a.w_ov, c.w_ov)  # frozen
    for a, b in zip(p1.readouts, p2.readouts):
        assert np.array_equal(a, b)


def test_mixture_saturation_ordering():
    cfg = small_cfg(M=12000)
    rng = np.random.default_rng(7)
    pi = sample_hidden(cfg.N, cfg.k, rng)
    params, reports = train_mixture(pi, cfg)
    kN = cfg.k * cfg.N
    assert len(reports) == cfg.L + 1
    for t in range(1, cfg.L + 1):
        rep = reports[t - 1]
        assert rep.saturation[t - 1] >= 0.99
        if t < cfg.L:
            assert rep.saturation[t] <= 10.0 / kN
    final = reports[-1]
    assert all(v < 0.05 for v in final.hop_loss.values())


def test_mixture_losses_stuck_until_readout_step():
    cfg = small_cfg(M=12000)
    rng = np.random.default_rng(8)
    pi = sample_hidden(cfg.N, cfg.k, rng)
    _, reports = train_mixture(pi, cfg)
    before = reports[cfg.L - 1]
    # attention learned but readouts still at their small initialization:
    # losses bounded away from zero until the final step
    assert all(v > 0.5 for v in before.hop_loss.values())
    assert all(v < 0.05 for v in reports[-1].hop_loss.values())


def test_csv_schema_and_content():
    cfg = small_cfg(M=500, eval_size=60)
    rng = np.random.default_rng(9)
    pi = sample_hidden(cfg.N, cfg.k, rng)
    _, reports = train_curriculum(pi, cfg)
    text = reports_to_csv("runA", reports, cfg.L)
    lines = text.strip().splitlines()
    assert lines[0].split(",") == csv_header(cfg.L)
    assert lines[0].startswith("schema_version,run_id,stage,hop,loss,accuracy")
    # one row per (stage, hop)
    assert len(lines) == 1 + cfg.L * cfg.L
    first = lines[1].split(",")
    assert first[0] == "1" and first[1] == "runA" and first[2] == "1"
