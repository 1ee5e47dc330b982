"""Rate-constrained bit-depth assignment.

Each group's marginal output distortion under quantization follows the
high-rate law  d_n(B) = P_n * H_n * G2_n * S2_n * 2**(-2B).  Minimizing the
sum at a fixed average rate has the closed-form water-filling solution

    B_n(V) = clamp(0.5 * log2(2 ln2 * G2_n * S2_n / V), 0, b_max)

where the dual variable V is the common marginal distortion per bit at the
optimum.  The size-weighted mean of B_n(V) is continuous and nonincreasing
in V, so the dual search is a bisection on log V; the classic additive
dual ascent (step 2 on the per-weight rate error, damped on oscillation)
is available behind ``method="dual-ascent"``.  Integerization re-bisects V
on the rounded-rate step function and repairs the remaining budget
greedily.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .stats import GroupStats, StatsSet

RATE_TOL = 1e-6
TWO_LN2 = 2.0 * math.log(2.0)


class AllocationError(ValueError):
    pass


@dataclass(frozen=True)
class BitAllocation:
    """Per-group depths plus the dual variable and achieved rate.

    ``depths`` is None for the continuous (pre-rounding) stage; ``V`` is
    None for allocations that did not come out of a dual search (brute
    force).  ``achieved_rate`` is the size-weighted mean of the integer
    depths when present, of the continuous depths otherwise.
    """

    depths: tuple[int, ...] | None
    depths_cont: tuple[float, ...]
    V: float | None
    achieved_rate: float


def marginal_distortion(g: GroupStats, B: float) -> float:
    """High-rate distortion contribution of one group at depth B."""
    if B < 0:
        raise AllocationError("bit depth must be nonnegative")
    return g.P * g.H * g.G2 * g.S2 * 2.0 ** (-2.0 * B)


def _sensitivities(stats: StatsSet) -> tuple[np.ndarray, np.ndarray]:
    c = np.array([g.G2 * g.S2 for g in stats.groups], dtype=np.float64)
    p = np.array([g.P for g in stats.groups], dtype=np.float64)
    return c, p


def continuous_allocate(stats: StatsSet, V: float) -> np.ndarray:
    """Closed-form clamped depths for a given dual variable V > 0."""
    if not V > 0:
        raise AllocationError("V must be positive")
    c, _ = _sensitivities(stats)
    depths = np.zeros_like(c)
    pos = c > 0
    depths[pos] = 0.5 * np.log2(TWO_LN2 * c[pos] / V)
    return np.clip(depths, 0.0, float(stats.b_max))


def _mean_rate(depths: np.ndarray, p: np.ndarray) -> float:
    return float(np.dot(p, depths) / p.sum())


def solve_rate(stats: StatsSet, method: str = "bisect") -> BitAllocation:
    """Find V such that the mean continuous depth matches the target rate.

    Both methods meet |mean depth - R| <= 1e-6 bit.  A target of 0 or of
    b_max (or one that only the clamp boundary can approach, e.g. when
    some groups carry zero gradient variance) is reported as the boundary
    solution rather than an error.
    """
    c, p = _sensitivities(stats)
    if not np.any(c > 0):
        raise AllocationError("degenerate statistics: all groups have G2*S2 = 0")
    r = float(stats.rate)
    b_max = float(stats.b_max)

    c_pos = c[c > 0]
    # Brackets: at v_hi every depth is 0, at v_lo every active depth is b_max.
    v_hi = TWO_LN2 * float(c_pos.max()) * 2.0
    v_lo = TWO_LN2 * float(c_pos.min()) * 4.0 ** (-b_max) * 0.5

    def rate_at(v: float) -> float:
        return _mean_rate(continuous_allocate(stats, v), p)

    max_rate = rate_at(v_lo)
    if r >= max_rate:  # boundary: target at or above what clamping allows
        depths = continuous_allocate(stats, v_lo)
        return BitAllocation(None, tuple(depths), v_lo, _mean_rate(depths, p))
    if r <= 0.0:
        depths = continuous_allocate(stats, v_hi)
        return BitAllocation(None, tuple(depths), v_hi, 0.0)

    if method == "bisect":
        v = _bisect_dual(rate_at, v_lo, v_hi, r)
    elif method == "dual-ascent":
        v = _dual_ascent(rate_at, r, v_floor=v_lo, v_ceil=v_hi)
    else:
        raise AllocationError(f"unknown method {method!r}")
    depths = continuous_allocate(stats, v)
    return BitAllocation(None, tuple(depths), v, _mean_rate(depths, p))


def _bisect_dual(rate_at, v_lo: float, v_hi: float, r: float) -> float:
    lo, hi = math.log(v_lo), math.log(v_hi)
    v = v_lo
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        v = math.exp(mid)
        err = rate_at(v) - r
        if abs(err) <= RATE_TOL * 0.01:
            break
        if err > 0:  # rate too high -> raise V
            lo = mid
        else:
            hi = mid
    return v


def _dual_ascent(rate_at, r: float, v_floor: float, v_ceil: float) -> float:
    # Additive dual update V += beta * (mean rate - R), started from
    # a small V.  The raw iteration oscillates once the rate curve is steep,
    # so beta is halved whenever the rate error changes sign; each flip
    # brackets the solution and the damping then contracts onto it.
    v = 1e-6
    beta = 2.0
    prev_sign = 0.0
    for _ in range(20_000):
        err = rate_at(v) - r
        if abs(err) <= RATE_TOL:
            return v
        sign = math.copysign(1.0, err)
        if prev_sign and sign != prev_sign:
            beta *= 0.5
        prev_sign = sign
        v_next = v + beta * err
        if v_next <= 0:
            v_next = 0.5 * v
        v = min(max(v_next, v_floor * 1e-3), v_ceil * 1e3)
    raise AllocationError("dual ascent failed to reach the rate tolerance")


def integerize(stats: StatsSet, cont: BitAllocation) -> BitAllocation:
    """Round a continuous allocation to integer depths at rate <= R.

    Re-bisects V on the rounded-rate step function, then repairs the
    leftover budget greedily: candidates are promoted in order of the
    marginal distortion they would remove (for unclamped groups this is
    exactly the rounding-residual order), ties broken toward the larger
    residual then the earlier position.  A bounded pairwise exchange pass
    polishes small problems where rounding residuals of unequal-size
    groups trade off against each other.
    """
    c, p = _sensitivities(stats)
    r = float(stats.rate)
    b_max = stats.b_max
    total_p = p.sum()

    # Integer Lagrangian rounding: depth b is worth incrementing while the
    # distortion drop 0.75*c*4^-b still exceeds V*P, i.e. while the
    # continuous depth exceeds b - 1 + log4(4 ln4 / 3).  That makes the
    # round-up threshold on the residual 0.443, not 0.5.
    offset = 1.0 + math.log(3.0 / (4.0 * math.log(4.0))) / math.log(4.0)

    def rounded(v: float) -> np.ndarray:
        depths = np.zeros_like(c)
        pos = c > 0
        x = 0.5 * np.log2(TWO_LN2 * c[pos] / v)
        depths[pos] = np.clip(np.floor(x + offset), 0.0, float(b_max))
        return depths

    # Bracket on the rounded-rate function: v_hi side is feasible (rate 0).
    c_pos = c[c > 0]
    v_hi = TWO_LN2 * float(c_pos.max()) * 4.0
    v_lo = TWO_LN2 * float(c_pos.min()) * 4.0 ** (-float(b_max)) * 0.25
    if _mean_rate(rounded(v_lo), p) <= r + 1e-12:
        v = v_lo
    else:
        lo, hi = math.log(v_lo), math.log(v_hi)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if _mean_rate(rounded(math.exp(mid)), p) > r + 1e-12:
                lo = mid
            else:
                hi = mid
        v = math.exp(hi)

    depths = rounded(v).astype(np.int64)
    cont_at_v = continuous_allocate(stats, v)
    rate = _mean_rate(depths.astype(np.float64), p)

    # Promoting group i removes 0.75*c_i*4^-b distortion at a budget cost of
    # P_i bits; the greedy ranks by that density.  At the continuous optimum
    # the density equals (3/4 ln4)*V*4^residual for every unclamped group,
    # so density order and rounding-residual order coincide there; clamped
    # groups are ranked by their true density.
    residual = cont_at_v - depths
    coef = np.array([g.P * g.H * g.G2 * g.S2 for g in stats.groups])
    order = sorted(
        range(len(depths)),
        key=lambda i: (-(coef[i] * 4.0 ** (-float(depths[i])) / p[i]), -residual[i], i),
    )
    for i in order:
        if depths[i] >= b_max or c[i] == 0:
            continue
        candidate = rate + p[i] / total_p
        if candidate <= r + 1e-12:
            depths[i] += 1
            rate = candidate

    if len(depths) <= 256:
        depths = _exchange_polish(depths, coef, p, r, b_max)

    return BitAllocation(
        depths=tuple(int(b) for b in depths),
        depths_cont=tuple(float(b) for b in cont_at_v),
        V=v,
        achieved_rate=_mean_rate(depths.astype(np.float64), p),
    )


def _exchange_polish(
    depths: np.ndarray, coef: np.ndarray, p: np.ndarray, r: float, b_max: int
) -> np.ndarray:
    """Trade bits between groups while that lowers total distortion.

    Moves shift up to two bits off one or two groups onto one or two
    others (including promotions funded by leftover budget alone); these
    are the patterns unequal group sizes leave behind after the greedy.
    Every move preserves rate <= r and strictly decreases the objective,
    so the loop terminates.
    """
    depths = depths.copy()
    total_p = p.sum()
    n = len(depths)
    rate = float(np.dot(p, depths) / total_p)

    sides: list[tuple[tuple[int, ...], tuple[int, ...]]] = [((), ())]
    for i in range(n):
        sides.append(((i,), (1,)))
        sides.append(((i,), (2,)))
    if n <= 16:
        for i in range(n):
            for j in range(i + 1, n):
                sides.append(((i, j), (1, 1)))

    def delta(idx, k, sign):
        return sum(
            coef[i] * (4.0 ** (-float(depths[i] + sign * s)) - 4.0 ** (-float(depths[i])))
            for i, s in zip(idx, k)
        )

    for _ in range(128):
        best_gain, best_move = 1e-18, None
        for d_idx, d_k in sides:
            if any(depths[i] < s for i, s in zip(d_idx, d_k)):
                continue
            cost = delta(d_idx, d_k, -1)
            freed = sum(s * p[i] for i, s in zip(d_idx, d_k))
            for u_idx, u_k in sides:
                if not u_idx or set(u_idx) & set(d_idx):
                    continue
                if any(depths[j] + s > b_max for j, s in zip(u_idx, u_k)):
                    continue
                spent = sum(s * p[j] for j, s in zip(u_idx, u_k))
                if rate + (spent - freed) / total_p > r + 1e-12:
                    continue
                gain = -delta(u_idx, u_k, +1) - cost
                if gain > best_gain:
                    best_gain, best_move = gain, (d_idx, d_k, u_idx, u_k)
        if best_move is None:
            break
        d_idx, d_k, u_idx, u_k = best_move
        for i, s in zip(d_idx, d_k):
            depths[i] -= s
        for j, s in zip(u_idx, u_k):
            depths[j] += s
        rate = float(np.dot(p, depths) / total_p)
    return depths


def allocate(stats: StatsSet, method: str = "bisect") -> BitAllocation:
    """Continuous dual solve followed by integerization."""
    return integerize(stats, solve_rate(stats, method=method))


def brute_force_allocate(stats: StatsSet) -> BitAllocation:
    """Exact minimizer over all integer depth vectors (oracle, <= 6 groups).

    Minimizes the summed marginal distortion subject to the size-weighted
    rate not exceeding the target.  Ties resolve to the lexicographically
    smallest depth vector.
    """
    n = len(stats.groups)
    if n > 6:
        raise AllocationError("brute force enumeration limited to 6 groups")
    b_max = stats.b_max
    c, p = _sensitivities(stats)
    coef = np.array([g.P * g.H * g.G2 * g.S2 for g in stats.groups])

    grids = np.indices((b_max + 1,) * n).reshape(n, -1).T  # (K, n), lexicographic
    rates = grids @ p / p.sum()
    feasible = rates <= stats.rate + 1e-12
    if not feasible.any():
        raise AllocationError("no feasible integer allocation")
    pow4 = 4.0 ** (-np.arange(b_max + 1, dtype=np.float64))
    obj = np.zeros(len(grids))
    for j in range(n):
        obj += coef[j] * pow4[grids[:, j]]
    obj = np.where(feasible, obj, np.inf)
    best = int(np.argmin(obj))
    depths = grids[best]
    return BitAllocation(
        depths=tuple(int(b) for b in depths),
        depths_cont=tuple(float(b) for b in depths),
        V=None,
        achieved_rate=float(rates[best]),
    )


def total_distortion(stats: StatsSet, depths) -> float:
    """Summed marginal distortion of an integer or real depth vector."""
    return sum(marginal_distortion(g, float(b)) for g, b in zip(stats.groups, depths))


def lagrangian_lower_bound(stats: StatsSet, V: float) -> float:
    """Weak-duality certificate: g(V) <= objective of every feasible depth
    vector, evaluated on the integer lattice."""
    c, p = _sensitivities(stats)
    coef = np.array([g.P * g.H * g.G2 * g.S2 for g in stats.groups])
    depths = np.arange(stats.b_max + 1, dtype=np.float64)
    per_group = coef[:, None] * 4.0 ** (-depths)[None, :] + V * p[:, None] * depths[None, :]
    return float(per_group.min(axis=1).sum() - V * p.sum() * stats.rate)
