"""Command-line harness: construct-verify | train | sq-probe | grad-check.

Every run resolves its configuration (preset, then JSON file, then CLI
overrides), validates it, writes the resolved copy beside its outputs, and
exits with 0 on success, 1 on an acceptance failure, 2 on a configuration
error, 3 on a numerical fault.  The default output directory comes from
the PERMHOP_OUT environment variable (falling back to ./permhop-runs).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from permhop import grad, sqgeom, train
from permhop.construction import (
    ConstructionConfig,
    build_exact,
    build_msparse,
    verify_construction,
)
from permhop.perms import Permutation
from permhop.task import sample_batch, sample_hidden, sample_hidden_msparse
from permhop.transformer import AttentionLayer, TransformerParams, save_checkpoint
from permhop.presets import PRESETS

EXIT_OK = 0
EXIT_ACCEPT = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    pass


def _require(cond: bool, message: str):
    if not cond:
        raise ConfigError(message)


def _power_of_two(k) -> bool:
    return isinstance(k, int) and k >= 1 and not (k & (k - 1))


def _out_dir(cfg: dict) -> Path:
    base = cfg.get("out") or os.environ.get("PERMHOP_OUT", "permhop-runs")
    run_id = cfg.get("run_id") or time.strftime("%Y%m%d-%H%M%S")
    path = Path(base) / run_id
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_resolved(out: Path, cfg: dict):
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _load_config(args) -> dict:
    cfg: dict = {}
    if args.preset:
        _require(args.preset in PRESETS, f"unknown preset {args.preset!r}")
        cfg.update(PRESETS[args.preset])
    if args.config:
        cfg.update(json.loads(Path(args.config).read_text()))
    for item in args.set or []:
        key, _, raw = item.partition("=")
        _require(bool(raw), f"override {item!r} is not key=value")
        cfg[key] = json.loads(raw)
    return cfg


# ---------------------------------------------------------------------------
# construct-verify


def cmd_construct_verify(cfg: dict) -> int:
    _require(_power_of_two(cfg.get("k")), "k must be a power of two (the exact weights halve the chain each layer)")
    _require(isinstance(cfg.get("N"), int) and cfg["N"] >= 2, "N must be an integer >= 2")
    trials = cfg.get("trials", 100)
    _require(isinstance(trials, int) and trials >= 1, "trials must be >= 1")
    tol = cfg.get("tol", 1e-6)
    m = cfg.get("m")
    out = _out_dir(cfg)
    _write_resolved(out, cfg)
    rng = np.random.default_rng([int(cfg.get("seed", 0)), 1])
    if m is None:
        ccfg = ConstructionConfig(beta=float(cfg.get("beta", 60.0)), tol=tol)
        pi = sample_hidden(cfg["N"], cfg["k"], rng)
        params = build_exact(pi, ccfg)
        report = verify_construction(params, pi, trials, rng, tol=tol)
    else:
        _require(isinstance(m, int) and 1 <= m <= cfg["k"], "m must satisfy 1 <= m <= k")
        ccfg = ConstructionConfig(
            beta1=float(cfg.get("beta1", 40.0)),
            beta2=float(cfg.get("beta2", 400.0)),
            tol=tol,
        )
        pi, sparse = sample_hidden_msparse(cfg["N"], cfg["k"], m, rng)
        params = build_msparse(pi, sparse, ccfg)
        report = verify_construction(params, pi, trials, rng, tol=tol, sparse_set=sparse)
    (out / "report.json").write_text(report.to_json() + "\n")
    print(report.to_json())
    return EXIT_OK if report.passed else EXIT_ACCEPT


# ---------------------------------------------------------------------------
# train


def cmd_train(cfg: dict) -> int:
    _require(cfg.get("mode") in ("curriculum", "mixture"), "mode must be curriculum or mixture")
    _require(_power_of_two(cfg.get("k")), "k must be a power of two (stage t trains hop length 2^(t-1))")
    _require(isinstance(cfg.get("N"), int) and cfg["N"] >= 2, "N must be an integer >= 2")
    M = cfg.get("M", 16000)
    M = tuple(M) if isinstance(M, list) else M
    out = _out_dir(cfg)
    _write_resolved(out, cfg)
    tcfg = train.TrainConfig(
        k=cfg["k"],
        N=cfg["N"],
        beta0=float(cfg.get("beta0", 0.5)),
        eta=float(cfg["eta"]),
        M=M,
        seed=int(cfg.get("seed", 0)),
        eval_size=int(cfg.get("eval_size", 2000)),
    )
    pi = sample_hidden(cfg["N"], cfg["k"], np.random.default_rng([tcfg.seed, 1]))
    trainer = train.train_curriculum if cfg["mode"] == "curriculum" else train.train_mixture
    try:
        params, reports = trainer(pi, tcfg)
    except grad.NumericalFault as fault:
        print(f"numerical fault: {fault}", file=sys.stderr)
        return EXIT_NUMERIC
    run_id = out.name
    (out / "stage_reports.csv").write_text(
        train.reports_to_csv(run_id, reports, tcfg.L)
    )
    save_checkpoint(out / "params.npz", params)

    status = EXIT_OK
    loss_bar = cfg.get("require_stage_loss")
    acc_bar = cfg.get("require_stage_accuracy")
    sat_factor = cfg.get("saturation_next_max_factor")
    kN = cfg["k"] * cfg["N"]
    for rep in reports:
        stage = rep.stage
        if stage > tcfg.L:  # mixture readout step: check the final losses
            if loss_bar is not None and any(v >= loss_bar for v in rep.hop_loss.values()):
                status = EXIT_ACCEPT
            continue
        r = 2 ** (stage - 1)
        if cfg["mode"] == "curriculum":
            if loss_bar is not None and rep.hop_loss[r] >= loss_bar:
                status = EXIT_ACCEPT
            if acc_bar is not None and rep.hop_accuracy[r] < acc_bar:
                status = EXIT_ACCEPT
        if sat_factor is not None:
            if rep.saturation[stage - 1] < 0.99:
                status = EXIT_ACCEPT
            if stage < tcfg.L and rep.saturation[stage] > sat_factor / kN:
                status = EXIT_ACCEPT
        print(
            f"stage {stage}: loss[hop {r}]={rep.hop_loss.get(r, float('nan')):.4f} "
            f"acc={rep.hop_accuracy.get(r, float('nan')):.4f} "
            f"saturation={['%.4f' % s for s in rep.saturation]}"
        )
    print(f"wrote {out / 'stage_reports.csv'} and {out / 'params.npz'}")
    return status


# ---------------------------------------------------------------------------
# sq-probe


def cmd_sq_probe(cfg: dict) -> int:
    N = cfg.get("N")
    _require(isinstance(N, int) and N >= 2, "N must be an integer >= 2 (the inner product divides by N-1)")
    k = cfg.get("k")
    _require(isinstance(k, int) and k >= 1, "k must be an integer >= 1")
    out = _out_dir(cfg)
    _write_resolved(out, cfg)
    rng = np.random.default_rng([int(cfg.get("seed", 0)), 2])
    summary: dict = {"N": N, "k": k}
    status = EXIT_OK
    if cfg.get("family"):
        r = int(cfg.get("r", 3))
        fam = sqgeom.build_near_orth_family(N, k, r, mode="exhaustive" if N <= 8 else "sampled", rng=rng)
        summary["family"] = {
            "r": r,
            "size": len(fam.members),
            "bound": fam.bound,
            "max_abs_inner": fam.max_abs_inner,
            "certified_size_bound": fam.certified_size_bound,
        }
        if fam.max_abs_inner > fam.bound:
            status = EXIT_ACCEPT
    else:
        pairs = int(cfg.get("pairs", 20))
        samples = int(cfg.get("samples", 200000))
        rows = []
        for _ in range(pairs):
            pair = sqgeom.FunctionPair(sample_hidden(N, k, rng), sample_hidden(N, k, rng))
            closed = sqgeom.inner_product_closed(pair)
            est, se = sqgeom.inner_product_mc(pair, samples, rng)
            rows.append(
                {"closed": closed, "mc": est, "se": se, "sigmas": abs(est - closed) / max(se, 1e-12)}
            )
            if abs(est - closed) > 4 * se:
                status = EXIT_ACCEPT
        summary["comparisons"] = rows
        summary["max_sigmas"] = max(r["sigmas"] for r in rows)
    (out / "sq_probe.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps({k: v for k, v in summary.items() if k != "comparisons"}, indent=2))
    return status


# ---------------------------------------------------------------------------
# grad-check


def cmd_grad_check(cfg: dict) -> int:
    k = cfg.get("k", 4)
    N = cfg.get("N", 3)
    _require(_power_of_two(k), "k must be a power of two")
    _require(isinstance(N, int) and N >= 2, "N must be >= 2")
    h = float(cfg.get("h", 1e-5))
    out = _out_dir(cfg)
    _write_resolved(out, cfg)
    rng = np.random.default_rng([int(cfg.get("seed", 0)), 3])
    L = k.bit_length()
    d = k * N * (L + 2)
    layers = tuple(
        AttentionLayer(0.4 * rng.standard_normal((d, d)), 0.4 * rng.standard_normal((d, d)))
        for _ in range(L)
    )
    readouts = tuple(0.4 * rng.standard_normal((d, N)) for _ in range(L))
    params = TransformerParams(layers, readouts, k, N)
    pi = sample_hidden(N, k, rng)
    batch = sample_batch(pi, int(cfg.get("batch", 8)), 2, rng)
    spec = grad.stage_spec(2, batch)
    with warnings.catch_warnings():
        warnings.simplefilter("always" if not 1e-7 <= h <= 1e-3 else "ignore")
        bundle = grad.gradient(params, spec)
        if cfg.get("inject_corruption"):
            bad = [g.copy() for g in bundle.d_kq]
            r, c = np.unravel_index(np.argmax(np.abs(bad[0])), bad[0].shape)
            bad[0][r, c] *= 1.1
            bundle = grad.GradBundle(tuple(bad), bundle.d_psi)
        report = grad.finite_diff_check(
            params, spec, h=h, n_coords=int(cfg.get("n_coords", 240)), rng=rng, grad=bundle
        )
    result = {
        "max_rel_err": report.max_rel_err,
        "worst_coord": list(report.worst_coord),
        "n_coords": report.n_coords,
        "passed": bool(report.passed),
    }
    (out / "grad_check.json").write_text(json.dumps(result, indent=2) + "\n")
    print(json.dumps(result, indent=2))
    return EXIT_OK if report.passed else EXIT_ACCEPT


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="permhop",
        description="interleaved permutation-composition laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("construct-verify", "train", "sq-probe", "grad-check"):
        p = sub.add_parser(name)
        p.add_argument("--preset", help="named preset from permhop.presets")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory (default $PERMHOP_OUT)")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=JSON",
            help="override one config field, value parsed as JSON",
        )
        if name == "train":
            p.add_argument("--mode", choices=("curriculum", "mixture"))
        if name == "grad-check":
            p.add_argument("--inject-corruption", action="store_true")
            p.add_argument("--h", type=float)

    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.out:
            cfg["out"] = args.out
        if getattr(args, "mode", None):
            cfg["mode"] = args.mode
        if getattr(args, "h", None) is not None:
            cfg["h"] = args.h
        if getattr(args, "inject_corruption", False):
            cfg["inject_corruption"] = True
        handler = {
            "construct-verify": cmd_construct_verify,
            "train": cmd_train,
            "sq-probe": cmd_sq_probe,
            "grad-check": cmd_grad_check,
        }[args.command]
        return handler(cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except grad.NumericalFault as fault:
        print(f"numerical fault: {fault}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
