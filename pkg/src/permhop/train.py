"""One-step stage-wise (curriculum) and data-mixture trainers.

Both trainers share the same initialization: zero key-query matrices,
readouts beta0 * (block l+2 summed over block-slots), and value matrices
frozen at the canonical block shift.  Each curriculum stage takes exactly
one gradient step on all key-query matrices against the stage loss and then
one step on the readouts against the same batch at the updated keys.  The
mixture trainer takes L key-query steps against the summed loss (fresh
mixed batch per step) and a single readout step at the end.

Hyperparameter note: the theory prescribes batch sizes and learning rates
with unspecified constants, infeasible verbatim at desk scale.  The shipped
presets were found by a documented grid search (eta over {0.5,1,2,4} x
k^2 N^3 / beta0 * ln(kN/0.01), M over {1,4,16} x 10^3); see cli.py.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from permhop import grad
from permhop.construction import prescribed_position, uniform_readout
from permhop.embedding import embed
from permhop.task import HiddenPerms, hop, sample_batch_images, sample_input
from permhop.transformer import AttentionLayer, TransformerParams, value_matrix_for

CSV_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    k: int
    N: int
    beta0: float = 0.5
    eta: float = 1.0
    M: int | tuple[int, ...] = 1000
    seed: int = 0
    eval_size: int = 2000
    steps_per_stage: int = 1  # >1 is an exploration mode, off by default

    def __post_init__(self):
        if self.k < 1 or self.k & (self.k - 1):
            raise ValueError(f"k must be a power of two, got {self.k}")
        if self.N < 2:
            raise ValueError("N must be >= 2")
        sizes = (self.M,) if isinstance(self.M, int) else tuple(self.M)
        if not isinstance(self.M, int) and len(sizes) != self.L:
            raise ValueError(f"per-stage M needs exactly L={self.L} entries")
        if self.beta0 <= 0 or self.eta <= 0 or min(sizes) < 1 or self.eval_size < 1:
            raise ValueError("beta0, eta, M, eval_size must be positive")
        if self.steps_per_stage < 1:
            raise ValueError("steps_per_stage must be >= 1")

    @property
    def L(self) -> int:
        return self.k.bit_length()  # log2(k) + 1

    def stage_M(self, stage: int) -> int:
        """Batch size for one stage; M may be a single int or one per stage."""
        if isinstance(self.M, int):
            return self.M
        return self.M[stage - 1]


@dataclass
class StageReport:
    """Metrics recorded after one training stage (or mixture step)."""

    stage: int
    hop_loss: dict[int, float]
    hop_accuracy: dict[int, float]
    hop_sup_dev: dict[int, float]
    saturation: list[float]
    grad_norms: list[float]


def init_params(cfg: TrainConfig) -> TransformerParams:
    """The exact training initialization; value matrices are frozen."""
    L, kN = cfg.L, cfg.k * cfg.N
    d = kN * (L + 2)
    layers = tuple(
        AttentionLayer(np.zeros((d, d)), value_matrix_for(layer, L, kN))
        for layer in range(1, L + 1)
    )
    readouts = tuple(
        uniform_readout(stage, cfg.k, cfg.N, L, scale=cfg.beta0)
        for stage in range(1, L + 1)
    )
    return TransformerParams(layers, readouts, cfg.k, cfg.N)


def _with_kq(params: TransformerParams, bundle: grad.GradBundle, eta: float):
    layers = tuple(
        AttentionLayer(layer.w_kq - eta * g, layer.w_ov)
        for layer, g in zip(params.layers, bundle.d_kq)
    )
    return replace(params, layers=layers)


def _with_psi(params: TransformerParams, bundle: grad.GradBundle, eta: float):
    readouts = tuple(
        psi - eta * g for psi, g in zip(params.readouts, bundle.d_psi)
    )
    return replace(params, readouts=readouts)


def _eval_queries(params, pi, n_eval, rng):
    """Fresh sigmas covering at least n_eval queries, one forward each."""
    k, N, L = params.k, params.N, params.L
    T = k * N
    n_sigma = max(1, -(-n_eval // T))
    sigmas = [sample_input(N, k, rng) for _ in range(n_sigma)]
    return sigmas


def evaluate(
    params: TransformerParams,
    pi: HiddenPerms,
    stage: int,
    n_eval: int,
    rng: np.random.Generator,
) -> tuple[float, float, float]:
    """(loss, accuracy, sup deviation) of the stage readout on fresh draws.

    sup_dev is the empirical max over the drawn queries of the infinity
    distance between the output distribution and the one-hot label.
    """
    if n_eval < 1:
        raise ValueError("n_eval must be >= 1")
    k, N, L = params.k, params.N, params.L
    info = grad.analyze(params, [stage])
    sigmas = _eval_queries(params, pi, n_eval, rng)
    r = 2 ** (stage - 1)
    psi = params.readouts[stage - 1]

    chunk = grad.default_chunk(params.d, params.T)
    losses, correct, sup_dev, seen = [], 0, 0.0, 0
    for start in range(0, len(sigmas), chunk):
        batch = sigmas[start : start + chunk]
        X0 = np.stack([embed(s, L).data for s in batch])
        xs, _, _ = grad._forward_chunk(
            params, info, X0, L, need_wx=False, in_place=info.buffer_ok
        )
        U = np.matmul(xs[L].transpose(0, 2, 1), psi)
        U -= U.max(axis=2, keepdims=True)
        P = np.exp(U)
        P /= P.sum(axis=2, keepdims=True)
        for b, sigma in enumerate(batch):
            for i in range(1, k + 1):
                for j in range(1, N + 1):
                    if seen >= n_eval:
                        break
                    seen += 1
                    y = hop(pi, sigma, i, r, j)
                    c = (i - 1) * N + (j - 1)
                    p = P[b, c]
                    losses.append(-math.log(max(p[y - 1], 1e-30)))
                    correct += int(np.argmax(p)) + 1 == y
                    onehot = np.zeros(N)
                    onehot[y - 1] = 1.0
                    sup_dev = max(sup_dev, float(np.abs(p - onehot).max()))
    return float(np.mean(losses)), correct / seen, sup_dev


def saturation(
    params: TransformerParams,
    pi: HiddenPerms,
    layer: int,
    samples: int,
    rng: np.random.Generator,
) -> float:
    """Min over sampled queries of the attention mass at the prescribed key.

    Layer 1's prescribed key is (i, p_i(j)); layer l >= 2 targets the
    half-chain position (i + 2^(l-2), hop(i, 2^(l-2), j)).
    """
    if not 1 <= layer <= params.L:
        raise ValueError(f"layer {layer} out of range 1..{params.L}")
    k, N, L = params.k, params.N, params.L
    T = k * N
    info = grad.analyze(params, [])
    if info.w_zero[layer - 1]:
        return 1.0 / T  # uniform attention, exactly
    n_sigma = max(1, -(-samples // T))
    sigmas = [sample_input(N, k, rng) for _ in range(n_sigma)]
    chunk = grad.default_chunk(params.d, params.T)
    seen, min_mass = 0, 1.0
    for start in range(0, len(sigmas), chunk):
        batch = sigmas[start : start + chunk]
        X0 = np.stack([embed(s, L).data for s in batch])
        _, scores, _ = grad._forward_chunk(
            params, info, X0, layer, need_wx=False, in_place=info.buffer_ok
        )
        S = scores[layer - 1]
        for b, sigma in enumerate(batch):
            for i in range(1, k + 1):
                for j in range(1, N + 1):
                    if seen >= samples:
                        break
                    seen += 1
                    bi, bj = prescribed_position(pi, sigma, layer, i, j)
                    mass = S[b, (bi - 1) * N + (bj - 1), (i - 1) * N + (j - 1)]
                    min_mass = min(min_mass, float(mass))
    return min_mass


def _report(params, pi, cfg, stage, bundle, rng_eval) -> StageReport:
    L = params.L
    hop_loss, hop_acc, hop_dev = {}, {}, {}
    for s in range(1, L + 1):
        l, a, dv = evaluate(params, pi, s, cfg.eval_size, rng_eval)
        r = 2 ** (s - 1)
        hop_loss[r], hop_acc[r], hop_dev[r] = l, a, dv
    sats = [
        saturation(params, pi, layer, min(cfg.eval_size, 4 * params.T), rng_eval)
        for layer in range(1, L + 1)
    ]
    norms = bundle.inf_norms()["kq"] if bundle is not None else [0.0] * L
    return StageReport(stage, hop_loss, hop_acc, hop_dev, sats, norms)


def train_curriculum(
    pi: HiddenPerms, cfg: TrainConfig
) -> tuple[TransformerParams, list[StageReport]]:
    """L stages; stage t trains on hop 2^(t-1): one step on all key-query
    matrices, then one step on the readouts at the updated keys."""
    if pi.k != cfg.k or pi.n != cfg.N:
        raise ValueError("hidden tuple disagrees with config dims")
    rng_data, rng_eval = np.random.default_rng(cfg.seed).spawn(2)
    params = init_params(cfg)
    reports = []
    for t in range(1, cfg.L + 1):
        last_bundle = None
        for _ in range(cfg.steps_per_stage):
            imgs, queries, labels = sample_batch_images(
                pi, cfg.stage_M(t), (2 ** (t - 1),), rng_data
            )
            spec = grad.compiled_stage(t, imgs, queries, labels)
            res = grad.run(params, spec)
            params = _with_kq(params, res.bundle, cfg.eta)
            res2 = grad.run(params, spec, kq_grad=False)
            params = _with_psi(params, res2.bundle, cfg.eta)
            last_bundle = res.bundle
        reports.append(_report(params, pi, cfg, t, last_bundle, rng_eval))
    return params, reports


def train_mixture(
    pi: HiddenPerms, cfg: TrainConfig
) -> tuple[TransformerParams, list[StageReport]]:
    """L key-query steps against the summed all-hop loss (fresh mixed batch
    per step), then one readout step; reports after every step, the last
    one labeled stage L+1."""
    if pi.k != cfg.k or pi.n != cfg.N:
        raise ValueError("hidden tuple disagrees with config dims")
    rng_data, rng_eval = np.random.default_rng(cfg.seed).spawn(2)
    params = init_params(cfg)
    hops = tuple(2 ** (s - 1) for s in range(1, cfg.L + 1))
    reports = []
    spec = None
    for t in range(1, cfg.L + 1):
        imgs, queries, labels = sample_batch_images(pi, cfg.stage_M(t), hops, rng_data)
        spec = grad.compiled_mixture(imgs, queries, labels)
        res = grad.run(params, spec)
        params = _with_kq(params, res.bundle, cfg.eta)
        reports.append(_report(params, pi, cfg, t, res.bundle, rng_eval))
    # the readout step reuses the last mixed batch at the updated keys, the
    # closest reading of the single-loss pseudocode (and it makes L=1
    # mixture coincide with curriculum stage 1)
    res = grad.run(params, spec, kq_grad=False)
    params = _with_psi(params, res.bundle, cfg.eta)
    reports.append(_report(params, pi, cfg, cfg.L + 1, res.bundle, rng_eval))
    return params, reports


# ---------------------------------------------------------------------------
# CSV export (schema shared with the baseline trainer)


def csv_header(L: int) -> list[str]:
    return (
        ["schema_version", "run_id", "stage", "hop", "loss", "accuracy"]
        + [f"saturation_layer_{i}" for i in range(1, L + 1)]
        + [f"grad_norm_layer_{i}" for i in range(1, L + 1)]
    )


def reports_to_csv(run_id: str, reports: list[StageReport], L: int) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(csv_header(L))
    for rep in reports:
        for r in sorted(rep.hop_loss):
            writer.writerow(
                [CSV_SCHEMA_VERSION, run_id, rep.stage, r]
                + [f"{rep.hop_loss[r]:.10g}", f"{rep.hop_accuracy[r]:.10g}"]
                + [f"{v:.10g}" for v in rep.saturation]
                + [f"{v:.10g}" for v in rep.grad_norms]
            )
    return buf.getvalue()
