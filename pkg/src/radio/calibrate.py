"""Desk-scale calibration loop: EMA gradient variances, PCA projection,
bias correction, and the full rate-distortion driver.

The driver alternates, for up to 64 outer iterations: accumulate
statistics on the currently-quantized model (one PCA coefficient
back-propagated per sample, tokens strided), re-solve the bit depths (a
short run of plain additive dual ascent followed by the exact-rate
bisection), compand-quantize, and correct biases.  The iterate with the
lowest distortion on the calibration set is returned along with the full
per-iteration trace.

The constants below are shared with the checkpoint stats exporter so the
desk-scale and real-scale paths agree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .allocate import (
    BitAllocation,
    integerize,
    marginal_distortion,
    solve_rate,
)
from .grouping import GroupingPlan, overhead_bits, pruned_fraction, subgroup_rows
from .model import ToyModel, forward, token_sq_grad_sums
from .pack import quantize_matrix
from .quantize import CompanderParams, mmse_step, rtn_quantize, uniform_quantize
from .stats import GroupStats, StatsSet

# Shared calibration constants (documented in README; the exporter mirrors
# them so stats computed at model scale match the desk-scale semantics).
ALPHA = 0.1  # EMA coefficient; effective memory ~= 10 minibatches
PCA_K = 16  # retained PCA coefficients (capped by the embedding width)
TOKEN_TARGET = 17  # tokens kept per sequence by the sub-sampling operator
INNER_DUAL_STEPS = 10
INIT_V = 1e-6
MAX_ITER = 64


class CalibrationError(ValueError):
    pass


def token_selection(length: int, target: int = TOKEN_TARGET) -> np.ndarray:
    """Every ceil(L/target)-th token position."""
    stride = max(1, math.ceil(length / target))
    return np.arange(0, length, stride)


def jacobi_eigh(a: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100):
    """Cyclic Jacobi eigensolver for symmetric matrices.

    Returns (eigenvalues, eigenvectors) sorted by descending eigenvalue;
    iterates until the off-diagonal Frobenius norm falls below tol.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n) or not np.allclose(a, a.T, atol=1e-12):
        raise CalibrationError("jacobi_eigh requires a symmetric matrix")
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = math.sqrt(np.sum(np.tril(a, -1) ** 2) * 2.0)
        if off <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= tol / (n * n):
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(theta, 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot_p, rot_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * rot_p - s * rot_q
                a[:, q] = s * rot_p + c * rot_q
                rot_p, rot_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rot_p - s * rot_q
                a[q, :] = s * rot_p + c * rot_q
                rot_p, rot_q = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * rot_p - s * rot_q
                v[:, q] = s * rot_p + c * rot_q
    eigvals = np.diag(a).copy()
    order = np.argsort(-eigvals, kind="stable")
    return eigvals[order], v[:, order]


def pca_basis(outputs, k: int) -> np.ndarray:
    """Top-k eigenvectors of the embedding-dimension covariance.

    `outputs` is a sequence of (L, E) matrices; rows pool across the
    sequence.  Each eigenvector's largest-magnitude component is made
    positive so the basis is sign-deterministic.
    """
    rows = np.concatenate([np.asarray(z, dtype=np.float64) for z in outputs], axis=0)
    e = rows.shape[1]
    if k > e:
        raise CalibrationError(f"k={k} exceeds embedding width {e}")
    centered = rows - rows.mean(axis=0)
    cov = centered.T @ centered / rows.shape[0]
    _, vecs = jacobi_eigh(cov)
    u = vecs[:, :k].copy()
    for j in range(k):
        i = int(np.argmax(np.abs(u[:, j])))
        if u[i, j] < 0:
            u[:, j] = -u[:, j]
    return u


@dataclass(frozen=True)
class CalibState:
    """EMA statistics carried across minibatches."""

    xbars: tuple[np.ndarray, ...]  # per-layer running input means
    g2: np.ndarray  # per-group EMA gradient variances
    U: np.ndarray  # PCA basis, orthonormal columns
    alpha: float
    iteration: int
    coeff_cursor: int  # cycles through PCA coefficients, one per sample


def plan_model(model: ToyModel, group_size: int) -> list[GroupingPlan]:
    """Column groups with M = ceil(rows / group_size) row sub-groups.

    Gradient variances are unknown at planning time, so row scores use the
    per-row weight second moments.
    """
    if group_size < 1:
        raise CalibrationError("group size must be positive")
    plans = []
    for w in model.weights:
        rows, cols = w.shape
        m = max(1, math.ceil(rows / group_size))
        scores = np.mean(w**2, axis=1)
        plans.append(subgroup_rows(scores, m).bind(cols))
    return plans


def group_slices(plans: list[GroupingPlan]) -> list[tuple[int, int]]:
    slices, start = [], 0
    for plan in plans:
        slices.append((start, start + plan.group_count))
        start = slices[-1][1]
    return slices


def init_state(model: ToyModel, calib: list[np.ndarray], plans: list[GroupingPlan]) -> CalibState:
    """PCA basis from the unquantized model's outputs; zeroed EMA state."""
    outputs = [forward(model, x)[0] for x in calib]
    k = min(PCA_K, model.weights[-1].shape[1])
    u = pca_basis(outputs, k)
    n_groups = sum(p.group_count for p in plans)
    return CalibState(
        xbars=tuple(np.zeros(w.shape[0]) for w in model.weights),
        g2=np.zeros(n_groups),
        U=u,
        alpha=ALPHA,
        iteration=0,
        coeff_cursor=0,
    )


def _per_group_means(sq_sums: list[np.ndarray], plans: list[GroupingPlan]) -> np.ndarray:
    out = []
    for layer_sq, plan in zip(sq_sums, plans):
        for g in range(plan.group_count):
            line, members = plan.group_members(g)
            out.append(float(np.mean(layer_sq[members, line])))
    return np.array(out)


def accumulate(
    state: CalibState,
    model_q: ToyModel,
    batch: list[np.ndarray],
    plans: list[GroupingPlan],
) -> CalibState:
    """EMA updates of the input means and gradient variances for one batch.

    Each sample back-propagates a single PCA coefficient (cycled) through
    the strided token selection; the squared-gradient sums are rescaled by
    E * L/L_sel to estimate the full-output Jacobian energy.
    """
    xbars = [x.copy() for x in state.xbars]
    g2 = state.g2.copy()
    cursor = state.coeff_cursor
    k = state.U.shape[1]
    e_out = model_q.weights[-1].shape[1]
    a = state.alpha
    for x in batch:
        length = x.shape[0]
        sel = token_selection(length)
        _, inputs = forward(model_q, x)
        for n, layer_in in enumerate(inputs):
            xbars[n] = (1.0 - a) * xbars[n] + a * layer_in.mean(axis=0)
        u = state.U[:, cursor % k]
        cursor += 1
        sq = token_sq_grad_sums(model_q, x, sel, u)
        scale = e_out * (length / len(sel))
        q = scale * _per_group_means(sq, plans)
        if not np.all(np.isfinite(q)):
            raise CalibrationError("divergent statistics: non-finite gradients")
        g2 = (1.0 - a) * g2 + a * q
    return replace(
        state,
        xbars=tuple(xbars),
        g2=g2,
        iteration=state.iteration + 1,
        coeff_cursor=cursor,
    )


def build_stats(
    model: ToyModel,
    plans: list[GroupingPlan],
    g2: np.ndarray,
    rate: float,
    b_max: int = 8,
    dist: str = "Gaussian",
) -> StatsSet:
    """Assemble the allocator's input from weights plus EMA variances."""
    groups = []
    i = 0
    for n, (w, plan) in enumerate(zip(model.weights, plans)):
        for g in range(plan.group_count):
            line, members = plan.group_members(g)
            vals = w[members, line]
            s2 = float(np.var(vals))
            groups.append(
                GroupStats(
                    group_id=f"l{n}.g{g}",
                    P=len(members),
                    G2=float(g2[i]),
                    S2=max(s2, np.finfo(np.float64).tiny),
                    mu=float(np.mean(vals)),
                    dist=dist,
                )
            )
            i += 1
    return StatsSet(groups=tuple(groups), rate=rate, b_max=b_max)


def dual_ascent_warmup(stats: StatsSet, v: float, steps: int = INNER_DUAL_STEPS) -> float:
    """Warm-up inner loop: a fixed number of additive dual updates."""
    p = np.array([g.P for g in stats.groups], dtype=np.float64)
    c = np.array([g.G2 * g.S2 for g in stats.groups], dtype=np.float64)
    for _ in range(steps):
        depths = np.zeros_like(c)
        pos = c > 0
        depths[pos] = np.clip(
            0.5 * np.log2(2.0 * math.log(2.0) * c[pos] / v), 0.0, float(stats.b_max)
        )
        err = float(np.dot(p, depths) / p.sum()) - stats.rate
        v_next = v + 2.0 * err
        v = v_next if v_next > 0 else 0.5 * v
    return v


def bias_correct(
    model: ToyModel, model_q: ToyModel, xbars
) -> tuple[np.ndarray, ...]:
    """Biases that zero the mean affine output error at the given inputs.

    With layer output x @ W + b and input mean xbar, the corrected bias is
    b + xbar @ (W - W_q): the quantized affine map then matches the
    original's mean output exactly.
    """
    out = []
    for w, wq, b, xbar in zip(model.weights, model_q.weights, model.biases, xbars):
        out.append(b + np.asarray(xbar) @ (w - wq))
    return tuple(out)


def measure_distortion(model: ToyModel, model_q: ToyModel, calib) -> float:
    """Mean squared output difference over the calibration set."""
    total = 0.0
    for x in calib:
        za, _ = forward(model, x)
        zb, _ = forward(model_q, x)
        total += float(np.sum((za - zb) ** 2))
    return total / len(calib)


def predicted_distortion(stats: StatsSet, alloc: BitAllocation) -> float:
    """High-rate model: sum of P*H*G2*S2*2^(-2B) over groups."""
    depths = alloc.depths if alloc.depths is not None else alloc.depths_cont
    return sum(marginal_distortion(g, float(b)) for g, b in zip(stats.groups, depths))


def quantize_model(
    model: ToyModel,
    plans: list[GroupingPlan],
    depths: list[int],
    calibrate: bool = False,
) -> tuple[ToyModel, list[CompanderParams]]:
    """Compand-quantize every weight matrix at the given per-group depths."""
    slices = group_slices(plans)
    new_weights, params = [], []
    for w, plan, (start, end) in zip(model.weights, plans, slices):
        _, p, deq = quantize_matrix(w, plan, depths[start:end], calibrate=calibrate)
        new_weights.append(deq)
        params.extend(p)
    return model.with_weights(new_weights), params


def make_calib_set(
    n_samples: int, length: int, width: int, seed: int
) -> list[np.ndarray]:
    """Seeded Gaussian token sequences standing in for calibration text."""
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((length, width)) for _ in range(n_samples)]


@dataclass(frozen=True)
class RadioResult:
    stats: StatsSet
    alloc: BitAllocation
    params: list[CompanderParams]
    biases: tuple[np.ndarray, ...]
    model_q: ToyModel
    plans: list[GroupingPlan]
    trace: list[dict]
    best_iter: int
    distortion: float
    xbars: tuple[np.ndarray, ...]


def radio_run(
    model: ToyModel,
    calib: list[np.ndarray],
    rate: float,
    group_size: int = 512,
    max_iter: int = MAX_ITER,
    batch_size: int = 8,
    method: str = "bisect",
    b_max: int = 8,
    dist: str = "Laplace",
) -> RadioResult:
    """Full rate-distortion optimization loop on a toy model.

    Returns the iterate with the lowest calibration-set distortion plus
    the complete per-iteration trace.  Deterministic given the model seed
    and the calibration set.
    """
    if not 0 < rate <= b_max:
        raise CalibrationError("rate must lie in (0, b_max]")
    plans = plan_model(model, group_size)
    state = init_state(model, calib, plans)
    v = INIT_V
    model_q = model  # depths start at infinity: nothing quantized yet
    best: RadioResult | None = None
    trace: list[dict] = []

    for it in range(1, max_iter + 1):
        lo = ((it - 1) * batch_size) % len(calib)
        batch = [calib[(lo + j) % len(calib)] for j in range(batch_size)]
        state = accumulate(state, model_q, batch, plans)

        stats = build_stats(model, plans, state.g2, rate, b_max, dist=dist)
        v = dual_ascent_warmup(stats, v)
        cont = solve_rate(stats, method=method)
        alloc = integerize(stats, cont)
        v = cont.V if cont.V is not None else v

        model_q, params = quantize_model(model, plans, list(alloc.depths))
        biases = bias_correct(model, model_q, state.xbars)
        model_q = model_q.with_weights(model_q.weights, biases)

        distortion = measure_distortion(model, model_q, calib)
        trace.append(
            {
                "iter": it,
                "rate": alloc.achieved_rate,
                "distortion": distortion,
                "pruned_frac": pruned_fraction(alloc, stats),
            }
        )
        if best is None or distortion < best.distortion:
            best = RadioResult(
                stats=stats,
                alloc=alloc,
                params=params,
                biases=biases,
                model_q=model_q,
                plans=plans,
                trace=trace,
                best_iter=it,
                distortion=distortion,
                xbars=state.xbars,
            )
    assert best is not None
    best = _calibrate_best(model, calib, best)
    return replace(
        best, trace=trace, stats=build_stats(model, plans, state.g2, rate, b_max, dist=dist)
    )


def _calibrate_best(model: ToyModel, calib, best: RadioResult) -> RadioResult:
    """Post-processing step: grid-search (S, mu) per group on the winning
    depths, keeping the calibrated model only if it measures better."""
    model_c, params_c = quantize_model(
        model, best.plans, list(best.alloc.depths), calibrate=True
    )
    biases_c = bias_correct(model, model_c, best.xbars)
    model_c = model_c.with_weights(model_c.weights, biases_c)
    dist_c = measure_distortion(model, model_c, calib)
    if dist_c >= best.distortion:
        return best
    return replace(
        best, model_q=model_c, params=params_c, biases=biases_c, distortion=dist_c
    )


def model_overhead(plans: list[GroupingPlan], alloc: BitAllocation) -> tuple[int, float]:
    """Total signaling bits across layers and their payload fraction."""
    slices = group_slices(plans)
    bits = 0
    payload = 0
    for plan, (start, end) in zip(plans, slices):
        depths = alloc.depths[start:end]
        sub = BitAllocation(
            depths=depths,
            depths_cont=alloc.depths_cont[start:end],
            V=alloc.V,
            achieved_rate=0.0,
        )
        if any(d > 0 for d in depths):
            b, _ = overhead_bits(plan, sub)
        else:
            index_bits = math.ceil(math.log2(plan.M)) if plan.M > 1 else 0
            b = plan.group_count * 36 + plan.n_cross * index_bits
        bits += b
        for g, d in enumerate(depths):
            _, members = plan.group_members(g)
            payload += len(members) * d
    if payload == 0:
        raise CalibrationError("all-zero depths carry no payload")
    return bits, bits / payload


def rtn_model(model: ToyModel, plans: list[GroupingPlan], depth: int) -> ToyModel:
    """Round-to-nearest baseline: per-group full-range uniform grid."""
    new_weights = []
    for w, plan in zip(model.weights, plans):
        deq = np.empty_like(w)
        for g in range(plan.group_count):
            line, members = plan.group_members(g)
            _, d = rtn_quantize(w[members, line], depth)
            deq[members, line] = d
        new_weights.append(deq)
    return model.with_weights(new_weights)


def uniform_mmse_model(
    model: ToyModel, plans: list[GroupingPlan], depth: int
) -> ToyModel:
    """Mid-rise uniform quantization at the empirical MMSE step, per group.

    This is the quantizer family the high-rate distortion law is derived
    for; the linearization checks use it.
    """
    new_weights = []
    for w, plan in zip(model.weights, plans):
        deq = np.empty_like(w)
        for g in range(plan.group_count):
            line, members = plan.group_members(g)
            vals = w[members, line]
            mu = float(vals.mean())
            step = mmse_step(vals - mu, depth)
            deq[members, line] = mu + uniform_quantize(vals - mu, depth, step)
        new_weights.append(deq)
    return model.with_weights(new_weights)
