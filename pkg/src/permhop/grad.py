"""Exact reverse-mode gradients of the stage and mixture losses.

Gradients are taken with respect to every key-query matrix and every stage
readout; value matrices are held fixed and never receive a gradient (the
separate probe below measures what their gradient would be at
initialization).  Backpropagation runs through the full computation: the
softmax Jacobian diag(s) - s s^T per column, the residual stream, and the
state appearing on both the key and query sides of the score matrix.

The engine is batched and chunked.  Two exact shortcuts make training-scale
workloads cheap, and both are bit-equivalent to the generic path:

* a layer whose key-query matrix is identically zero has uniform attention,
  so its scores are never materialized through matmuls;
* when every value matrix is the canonical block shift and a stage's
  readout touches no block above its own, layers deeper than that stage
  cannot influence the stage's logits, so the pass is truncated there and
  the deeper gradients are exact zeros.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from permhop.embedding import embed
from permhop.task import HopSample
from permhop.transformer import TransformerParams, value_matrix_for

LOG_CLAMP = math.log(1e-30)


def default_chunk(d: int, T: int) -> int:
    """Batch rows per chunk; 64 keeps the working set inside cache across
    the measured model sizes and beat every larger setting."""
    return 64


class NumericalFault(RuntimeError):
    """Raised when a forward state or score matrix stops being finite."""

    def __init__(self, layer: int, what: str):
        super().__init__(f"non-finite values first appeared in layer {layer} ({what})")
        self.layer = layer


class ClampWarning(UserWarning):
    """A predicted probability underflowed and was clamped at 1e-30."""


@dataclass(frozen=True)
class LossSpec:
    """A stage or mixture cross-entropy objective over a sample batch.

    Stage terms are grouped by hop length: stage l covers hop 2^(l-1).  A
    mixture spec may carry several hop lengths; samples sharing a sigma
    object and query are evaluated with one forward pass.
    """

    kind: str
    batch: tuple[HopSample, ...]
    stage: int | None = None

    def __post_init__(self):
        if self.kind not in ("stage", "mixture"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not self.batch:
            raise ValueError("empty batch")
        object.__setattr__(self, "batch", tuple(self.batch))
        if self.kind == "stage":
            if self.stage is None or self.stage < 1:
                raise ValueError("stage losses need a stage index >= 1")
            want = 2 ** (self.stage - 1)
            for s in self.batch:
                if s.r != want:
                    raise ValueError(
                        f"stage {self.stage} expects hop length {want}, got {s.r}"
                    )


def stage_spec(stage: int, batch) -> LossSpec:
    return LossSpec("stage", tuple(batch), stage)


def mixture_spec(batch) -> LossSpec:
    return LossSpec("mixture", tuple(batch))


def stage_of_hop(r: int) -> int:
    stage = r.bit_length()
    if r < 1 or 2 ** (stage - 1) != r:
        raise ValueError(f"hop length {r} is not a power of two")
    return stage


@dataclass(frozen=True)
class GradBundle:
    """Gradients mirroring TransformerParams: L key-query and L readout."""

    d_kq: tuple[np.ndarray, ...]
    d_psi: tuple[np.ndarray, ...]

    def inf_norms(self) -> dict[str, list[float]]:
        return {
            "kq": [float(np.abs(g).max()) for g in self.d_kq],
            "psi": [float(np.abs(g).max()) for g in self.d_psi],
        }


@dataclass
class EngineResult:
    loss: float
    stage_losses: dict[int, float]
    bundle: GradBundle | None
    d_ov: dict[int, np.ndarray]
    clamped: bool


# ---------------------------------------------------------------------------
# batch compilation


@dataclass
class CompiledBatch:
    """Array-form batch: the fast twin of a LossSpec over HopSamples.

    images are 0-based sigma image arrays (B, k, N); queries are 0-based
    flattened columns (B,); terms maps a stage to (group indices, 0-based
    labels).  Building one from `task.sample_batch_images` skips all
    per-sample Python objects; the engine treats both forms identically.
    """

    images: np.ndarray
    queries: np.ndarray
    terms: dict[int, tuple[np.ndarray, np.ndarray]]


def compiled_stage(stage, images, queries, labels0) -> CompiledBatch:
    B = images.shape[0]
    return CompiledBatch(
        images, queries, {stage: (np.arange(B), labels0.reshape(B, -1)[:, 0])}
    )


def compiled_mixture(images, queries, labels0) -> CompiledBatch:
    B = images.shape[0]
    idx = np.arange(B)
    terms = {s + 1: (idx, labels0[:, s]) for s in range(labels0.shape[1])}
    return CompiledBatch(images, queries, terms)


def _compile(params: TransformerParams, spec) -> CompiledBatch:
    if isinstance(spec, CompiledBatch):
        if spec.images.shape[1:] != (params.k, params.N):
            raise ValueError("compiled batch dimensions disagree with the model")
        if max(spec.terms) > params.L:
            raise ValueError("compiled batch carries a stage beyond L")
        return spec
    images: list[np.ndarray] = []
    index: dict[tuple[int, int, int], int] = {}
    queries: list[int] = []
    per_stage: dict[int, tuple[list[int], list[int]]] = {}
    for s in spec.batch:
        stage = stage_of_hop(s.r)
        if stage > params.L:
            raise ValueError(f"hop length {s.r} needs stage {stage} > L={params.L}")
        if spec.kind == "stage" and stage != spec.stage:
            raise ValueError("sample hop length disagrees with stage")
        if s.sigma.k != params.k or s.sigma.n != params.N:
            raise ValueError("sample dimensions disagree with the model")
        key = (id(s.sigma), s.query.i, s.query.j)
        g = index.get(key)
        if g is None:
            g = len(images)
            index[key] = g
            images.append(
                np.stack([p._img0 for p in s.sigma.perms])  # noqa: SLF001
            )
            queries.append((s.query.i - 1) * params.N + (s.query.j - 1))
        rows = per_stage.setdefault(stage, ([], []))
        rows[0].append(g)
        rows[1].append(s.label - 1)
    terms = {
        stage: (np.asarray(gs, dtype=np.int64), np.asarray(ls, dtype=np.int64))
        for stage, (gs, ls) in sorted(per_stage.items())
    }
    return CompiledBatch(np.stack(images), np.asarray(queries, dtype=np.int64), terms)


# ---------------------------------------------------------------------------
# structural analysis of the parameters


@dataclass
class _Info:
    w_zero: list[bool]
    v_canonical: list[bool]
    psi_max_block: list[int]
    inject_at: dict[int, int]
    w_rows: list[int]  # row extent of each key-query matrix
    w_cols: list[int]  # column extent
    x_lim: list[int]  # filled-row extent of each layer's input state
    buffer_ok: bool = False


def analyze(params: TransformerParams, stages, force_generic: bool = False) -> _Info:
    """Structural facts used for the exact shortcuts.

    ``inject_at[stage]`` is the layer where the stage's loss pullback may
    enter the backward sweep.  It is the stage itself when every deeper
    value matrix is the canonical block shift and the stage's readout reads
    no block above its own: deeper layers then neither see the pullback nor
    feed the read blocks, so the skipped backward work is exactly zero.

    The extents bound where matrices and states can be nonzero, so matmuls
    run on the occupied corner only; results are exactly equal to the dense
    computation because everything outside the extents is identically zero.
    """
    L, blk, d = params.L, params.block, params.d
    w_zero, w_rows, w_cols, v_canonical = [], [], [], []
    for idx, layer in enumerate(params.layers):
        nz_r = np.flatnonzero(layer.w_kq.any(axis=1))
        nz_c = np.flatnonzero(layer.w_kq.any(axis=0))
        w_zero.append(nz_r.size == 0)
        w_rows.append(int(nz_r.max()) + 1 if nz_r.size else 0)
        w_cols.append(int(nz_c.max()) + 1 if nz_c.size else 0)
        v_canonical.append(
            not force_generic
            and np.array_equal(layer.w_ov, value_matrix_for(idx + 1, L, blk))
        )
    psi_max_block = []
    for psi in params.readouts:
        nz = np.flatnonzero(psi.reshape(L + 2, -1).any(axis=1))
        psi_max_block.append(int(nz.max()) if nz.size else -1)
    inject_at = {}
    for stage in stages:
        shallow = all(v_canonical[stage:]) and psi_max_block[stage - 1] <= stage + 1
        inject_at[stage] = stage if shallow else L
    # the embedding fills blocks 1..2; canonical layer l adds block l+2,
    # a generic value matrix may touch anything
    x_lim = []
    lim = 2 * blk
    for layer in range(1, L + 1):
        x_lim.append(min(lim, d))
        lim = min(lim + blk, d) if v_canonical[layer - 1] else d
    x_lim.append(lim)
    # states grow incrementally and never rewrite older blocks, so the whole
    # sweep can share one buffer as long as nothing reads past the extent
    buffer_ok = all(v_canonical) and all(
        max(w_rows[i], w_cols[i]) <= x_lim[i] for i in range(L)
    )
    return _Info(
        w_zero, v_canonical, psi_max_block, inject_at, w_rows, w_cols, x_lim, buffer_ok
    )


# ---------------------------------------------------------------------------
# batched forward / backward over one chunk


def _embed_images(images: np.ndarray, d: int) -> np.ndarray:
    """Vectorized block embedding of a chunk of sigma image arrays."""
    B, k, N = images.shape
    T = k * N
    X0 = np.zeros((B, d, T))
    cols = np.arange(T)
    X0[:, cols, cols] = 1.0
    rows2 = T + np.arange(k)[None, :, None] * N + images
    X0[np.arange(B)[:, None], rows2.reshape(B, T), cols[None, :]] = 1.0
    return X0


def _uniform_value(X: np.ndarray) -> np.ndarray:
    # X @ S for uniform S: every output column is the column mean
    return np.repeat(X.mean(axis=2, keepdims=True), X.shape[2], axis=2)


def _forward_chunk(
    params, info: _Info, X0: np.ndarray, depth: int, need_wx: bool, in_place: bool = False
):
    """Returns (states, scores, wx) lists; scores[l] is None for uniform.

    wx caches the leading w_rows rows of W_kq @ X for reuse in backward.
    With in_place=True (requires info.buffer_ok) every state aliases X0:
    blocks are appended in place and never rewritten, so the final buffer is
    a valid view of each intermediate state on its occupied rows.
    """
    xs = [X0]
    scores: list[np.ndarray | None] = []
    wxs: list[np.ndarray | None] = []
    X = X0
    for layer in range(1, depth + 1):
        if info.w_zero[layer - 1]:
            S = None
            wxs.append(None)
        else:
            W = params.layers[layer - 1].w_kq
            rh, ch = info.w_rows[layer - 1], info.w_cols[layer - 1]
            WX = np.matmul(W[:rh, :ch], X[:, :ch, :])
            Z = np.matmul(X[:, :rh, :].transpose(0, 2, 1), WX)
            if not np.isfinite(Z).all():
                raise NumericalFault(layer, "attention scores")
            Z -= Z.max(axis=1, keepdims=True)
            S = np.exp(Z)
            S /= S.sum(axis=1, keepdims=True)
            wxs.append(WX if need_wx else None)
        if in_place:
            blk = params.block
            lo = blk * layer
            Y = X[:, lo : lo + blk, :]
            new = _uniform_value(Y) if S is None else np.matmul(Y, S)
            # only the appended block is new; the rest was checked already
            if not np.isfinite(new).all():
                raise NumericalFault(layer, "residual state")
            X[:, lo + blk : lo + 2 * blk, :] = new
        else:
            X = _apply_value(params, info, layer, X, S)
            lim = info.x_lim[min(layer, len(info.x_lim) - 1)]
            if not np.isfinite(X[:, :lim, :]).all():
                raise NumericalFault(layer, "residual state")
        xs.append(X)
        scores.append(S)
    return xs, scores, wxs


def _apply_value(params, info: _Info, layer: int, X: np.ndarray, S):
    blk = params.block
    if info.v_canonical[layer - 1]:
        lo = blk * layer  # 0-based block `layer` is read, block layer+1 written
        Y = X[:, lo : lo + blk, :]
        out = X.copy()
        if S is None:
            out[:, lo + blk : lo + 2 * blk, :] += _uniform_value(Y)
        else:
            out[:, lo + blk : lo + 2 * blk, :] += np.matmul(Y, S)
        return out
    V = params.layers[layer - 1].w_ov
    ctx = _uniform_value(X) if S is None else np.matmul(X, S)
    return X + np.matmul(V, ctx)


def _softmax_vjp(S, dS, T: int) -> np.ndarray:
    if S is None:
        return (dS - dS.mean(axis=1, keepdims=True)) / T
    tmp = S * dS
    return tmp - S * tmp.sum(axis=1, keepdims=True)


def run(
    params: TransformerParams,
    spec: LossSpec,
    *,
    want_grad: bool = True,
    kq_grad: bool = True,
    value_grad_layers: tuple[int, ...] = (),
    chunk: int | None = None,
    force_generic: bool = False,
) -> EngineResult:
    """Evaluate the loss and, optionally, its exact gradients over a batch.

    kq_grad=False skips the backward sweep and leaves the key-query
    gradients at zero (used by readout-only steps, where only d_psi is
    consumed); it does not change d_psi or the loss.
    """
    if params.m is not None:
        raise ValueError("the gradient engine runs on the plain embedding only")
    comp = _compile(params, spec)
    info = analyze(params, comp.terms.keys(), force_generic)
    L, d, T, blk, N = params.L, params.d, params.T, params.block, params.N

    if chunk is None:
        chunk = default_chunk(d, T)
    counts = {stage: len(gs) for stage, (gs, _) in comp.terms.items()}
    loss_sums = {stage: 0.0 for stage in comp.terms}
    d_kq = [np.zeros((d, d)) for _ in range(L)] if want_grad else None
    d_psi = [np.zeros((d, N)) for _ in range(L)] if want_grad else None
    d_ov = {layer: np.zeros((d, d)) for layer in value_grad_layers}
    clamped = False
    need_psi = want_grad
    need_G = (want_grad and kq_grad) or bool(value_grad_layers)
    top = max([*info.inject_at.values(), *value_grad_layers, 1])

    B_total = comp.images.shape[0]
    for start in range(0, B_total, chunk):
        stop = min(start + chunk, B_total)
        X0 = _embed_images(comp.images[start:stop], d)
        xs, scores, wxs = _forward_chunk(
            params, info, X0, L, need_G, in_place=info.buffer_ok
        )

        # per-stage logits, losses, and pullbacks local to this chunk;
        # logits and readout gradients always use the full final state
        inject: dict[int, list] = {}
        for stage, (gs, labels) in comp.terms.items():
            m = (gs >= start) & (gs < stop)
            if not m.any():
                continue
            g_loc = gs[m] - start
            y = labels[m]
            cols = comp.queries[gs[m]]
            Xq = xs[L][g_loc, :, cols]  # (n, d)
            U = Xq @ params.readouts[stage - 1]  # (n, N)
            U -= U.max(axis=1, keepdims=True)
            logZ = np.log(np.exp(U).sum(axis=1))
            logp = U[np.arange(len(y)), y] - logZ
            if (logp < LOG_CLAMP).any():
                clamped = True
                logp = np.maximum(logp, LOG_CLAMP)
            loss_sums[stage] += float(-logp.sum())
            if need_psi or need_G:
                dU = np.exp(U - logZ[:, None])
                dU[np.arange(len(y)), y] -= 1.0
                dU /= counts[stage]
                if need_psi:
                    d_psi[stage - 1] += Xq.T @ dU
                inject.setdefault(info.inject_at[stage], []).append(
                    (g_loc, cols, dU, stage)
                )

        if not need_G:
            continue

        G = np.zeros_like(X0)
        for layer in range(top, 0, -1):
            for g_loc, cols, dU, stage in inject.get(layer, ()):
                np.add.at(
                    G,
                    (g_loc[:, None], np.arange(d)[None, :], cols[:, None]),
                    dU @ params.readouts[stage - 1].T,
                )
            X = xs[layer - 1]
            S = scores[layer - 1]
            xl = info.x_lim[layer - 1]

            if layer in d_ov:
                Xl = X[:, :xl, :]
                ctx = _uniform_value(Xl) if S is None else np.matmul(Xl, S)
                nb = X.shape[0]
                d_ov[layer][:, :xl] += (
                    G.transpose(1, 0, 2).reshape(d, nb * T)
                    @ ctx.transpose(1, 0, 2).reshape(xl, nb * T).T
                )

            if not (want_grad and kq_grad) and layer == 1:
                break
            if info.v_canonical[layer - 1]:
                lo = blk * layer
                dS = np.matmul(
                    X[:, lo : lo + blk, :].transpose(0, 2, 1),
                    G[:, lo + blk : lo + 2 * blk, :],
                )
            else:
                VX = np.matmul(params.layers[layer - 1].w_ov, X)
                dS = np.matmul(VX.transpose(0, 2, 1), G)
            dZ = _softmax_vjp(S, dS, T)
            if want_grad and kq_grad:
                # dW is supported on the occupied corner of the state
                nb = X.shape[0]
                Xl = X[:, :xl, :]
                XdZ = np.matmul(Xl, dZ)
                d_kq[layer - 1][:xl, :xl] += (
                    XdZ.transpose(1, 0, 2).reshape(xl, nb * T)
                    @ Xl.transpose(1, 0, 2).reshape(xl, nb * T).T
                )
            if layer > 1:
                # residual is the identity: G carries over, plus the value
                # path and the two score paths (key side and query side)
                if info.v_canonical[layer - 1]:
                    lo = blk * layer
                    Gw = G[:, lo + blk : lo + 2 * blk, :]
                    if S is None:
                        G[:, lo : lo + blk, :] += np.repeat(
                            Gw.mean(axis=2, keepdims=True), T, axis=2
                        )
                    else:
                        G[:, lo : lo + blk, :] += np.matmul(Gw, S.transpose(0, 2, 1))
                else:
                    V = params.layers[layer - 1].w_ov
                    VtG = np.matmul(V.T, G)
                    if S is None:
                        G += np.repeat(VtG.mean(axis=2, keepdims=True), T, axis=2)
                    else:
                        G += np.matmul(VtG, S.transpose(0, 2, 1))
                if not info.w_zero[layer - 1]:
                    W = params.layers[layer - 1].w_kq
                    rh, ch = info.w_rows[layer - 1], info.w_cols[layer - 1]
                    WX = wxs[layer - 1]
                    if WX is None:
                        WX = np.matmul(W[:rh, :ch], X[:, :ch, :])
                    G[:, :rh, :] += np.matmul(WX, dZ.transpose(0, 2, 1))
                    G[:, :ch, :] += np.matmul(
                        W[:rh, :ch].transpose(), np.matmul(X[:, :rh, :], dZ)
                    )

    total = 0.0
    stage_losses = {}
    for stage in sorted(loss_sums):
        val = loss_sums[stage] / counts[stage]
        stage_losses[stage] = val
        total += val
    bundle = GradBundle(tuple(d_kq), tuple(d_psi)) if want_grad else None
    return EngineResult(total, stage_losses, bundle, d_ov, clamped)


def loss(params: TransformerParams, spec: LossSpec) -> float:
    """Mean cross-entropy of the spec; warns if any probability was clamped."""
    res = run(params, spec, want_grad=False)
    if res.clamped:
        warnings.warn("predicted probability clamped at 1e-30", ClampWarning)
    return res.loss


def gradient(params: TransformerParams, spec: LossSpec) -> GradBundle:
    """Exact gradient of loss(params, spec) for all W_kq and readouts."""
    res = run(params, spec)
    if res.clamped:
        warnings.warn("predicted probability clamped at 1e-30", ClampWarning)
    return res.bundle


# ---------------------------------------------------------------------------
# finite-difference certification


@dataclass
class FDReport:
    max_rel_err: float
    worst_coord: tuple[str, int, int, int]  # (group, layer, row, col)
    n_coords: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < 1e-5


def finite_diff_check(
    params: TransformerParams,
    spec: LossSpec,
    h: float = 1e-5,
    n_coords: int = 200,
    rng: np.random.Generator | None = None,
    grad: GradBundle | None = None,
) -> FDReport:
    """Central-difference check of the analytic gradient on random coords.

    Samples at least n_coords coordinates spread over every layer and every
    readout.  Relative error uses |a - b| / max(1, |a|, |b|); coordinates
    where both sides are below 1e-12 count as exact.
    """
    if not 1e-7 <= h <= 1e-3:
        warnings.warn(f"h={h} is outside the validated range [1e-7, 1e-3]")
    rng = rng or np.random.default_rng(0)
    if grad is None:
        grad = gradient(params, spec)

    work = TransformerParams(
        tuple(
            type(layer)(layer.w_kq.copy(), layer.w_ov) for layer in params.layers
        ),
        tuple(psi.copy() for psi in params.readouts),
        params.k,
        params.N,
        params.m,
    )
    groups = []
    for idx in range(params.L):
        groups.append(("kq", idx, work.layers[idx].w_kq, grad.d_kq[idx]))
        groups.append(("psi", idx, work.readouts[idx], grad.d_psi[idx]))
    per_group = max(1, -(-n_coords // len(groups)))

    worst = 0.0
    worst_coord = ("kq", 0, 0, 0)
    checked = 0
    for name, idx, mat, gmat in groups:
        # half the budget goes to the largest analytic entries (the most
        # consequential coordinates), half to uniform coverage
        n_top = per_group // 2
        flat = np.argsort(np.abs(gmat), axis=None)[::-1][:n_top]
        rows = np.concatenate(
            [flat // mat.shape[1], rng.integers(0, mat.shape[0], size=per_group - n_top)]
        )
        cols = np.concatenate(
            [flat % mat.shape[1], rng.integers(0, mat.shape[1], size=per_group - n_top)]
        )
        for r, c in zip(rows, cols):
            orig = mat[r, c]
            mat[r, c] = orig + h
            lp = run(work, spec, want_grad=False).loss
            mat[r, c] = orig - h
            lm = run(work, spec, want_grad=False).loss
            mat[r, c] = orig
            fd = (lp - lm) / (2.0 * h)
            an = gmat[r, c]
            if abs(fd) < 1e-12 and abs(an) < 1e-12:
                err = 0.0
            else:
                err = abs(fd - an) / max(1.0, abs(fd), abs(an))
            checked += 1
            if err > worst:
                worst = err
                worst_coord = (name, idx + 1, int(r), int(c))
    return FDReport(worst, worst_coord, checked)


# ---------------------------------------------------------------------------
# value-matrix gradient probe at the training initialization


def value_grad_probe(
    k: int, N: int, L: int, beta0: float, M: int, rng: np.random.Generator
) -> float:
    """Infinity norm of the batch-averaged first-layer value gradient.

    At the training initialization the population version vanishes, so the
    returned norm is pure sample noise and should decay like 1/sqrt(M).
    """
    from permhop.task import sample_batch, sample_hidden
    from permhop.train import TrainConfig, init_params

    cfg = TrainConfig(k=k, N=N, beta0=beta0, eta=1.0, M=M, seed=0)
    if cfg.L != L:
        raise ValueError(f"L must be log2(k)+1 = {cfg.L}")
    params = init_params(cfg)
    pi = sample_hidden(N, k, rng)
    batch = sample_batch(pi, M, 1, rng)
    res = run(params, stage_spec(1, batch), want_grad=False, value_grad_layers=(1,))
    return float(np.abs(res.d_ov[1]).max())
