"""Scalar quantization paths.

Two families live here: the mid-rise uniform quantizer (with an empirical
MMSE step-size search) and the Laplace compander, which maps weights
through the normalized integral of the cube-rooted Laplace density so
that a uniform grid on (0,1) places finer cells where the density is
high.  Dequantization goes through small lookup tables of decompanded
cell midpoints.  A Lloyd-Max fixed-point solver serves as the optimality
oracle in tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SQRT2 = math.sqrt(2.0)


class QuantizeError(ValueError):
    pass


@dataclass(frozen=True)
class CompanderParams:
    """Scale/mean pair defining the sigmoid transform and its LUTs."""

    S: float
    mu: float

    def __post_init__(self) -> None:
        if not self.S > 0:
            raise QuantizeError("S must be positive")

    def rounded_fp16(self) -> "CompanderParams":
        """Round both parameters through IEEE binary16 (storage precision)."""
        return CompanderParams(
            S=float(np.float16(self.S)), mu=float(np.float16(self.mu))
        )


@dataclass(frozen=True)
class DequantLUT:
    """Reconstruction levels for one depth: 2**B ascending reals."""

    depth: int
    values: tuple[float, ...]


def uniform_quantize(theta, B, D: float):
    """Mid-rise uniform quantization: D*(clip(floor(theta/D)) + 1/2).

    The clip range is [-2**(B-1), 2**(B-1)-1]; B = math.inf passes theta
    through unchanged.
    """
    if B == math.inf:
        return theta
    if B < 1:
        raise QuantizeError("uniform_quantize requires B >= 1 (B=0 is pruning)")
    if not D > 0:
        raise QuantizeError("step size D must be positive")
    lo, hi = -(2 ** (B - 1)), 2 ** (B - 1) - 1
    idx = np.clip(np.floor(np.asarray(theta, dtype=np.float64) / D), lo, hi)
    out = D * (idx + 0.5)
    return float(out) if np.isscalar(theta) else out


def mmse_step(theta, B: int) -> float:
    """Step size minimizing the empirical MSE of uniform_quantize.

    Coarse log-spaced scan over the data range followed by one refinement
    pass; deterministic for a given sample.
    """
    x = np.asarray(theta, dtype=np.float64).ravel()
    span = float(x.max() - x.min())
    if span == 0.0:
        return 1.0
    d_full = span / 2**B

    def mse(d: float) -> float:
        q = uniform_quantize(x, B, d)
        return float(np.mean((q - x) ** 2))

    grid = d_full * np.exp2(np.linspace(-4.0, 1.5, 45))
    best = grid[int(np.argmin([mse(d) for d in grid]))]
    fine = best * np.exp2(np.linspace(-0.25, 0.25, 21))
    return float(fine[int(np.argmin([mse(d) for d in fine]))])


def compander_forward(theta, p: CompanderParams):
    """Sigmoid transform sending the weight axis to (0,1).

    Normalized integral of the cube-rooted Laplace(mu, S^2) density:
    0.5*(1 + sgn(t)*(1 - exp(-sqrt(2)*|t|/(3S)))) with t = theta - mu.
    """
    t = np.asarray(theta, dtype=np.float64) - p.mu
    u = 0.5 * (1.0 + np.sign(t) * (1.0 - np.exp(-SQRT2 * np.abs(t) / (3.0 * p.S))))
    return float(u) if np.isscalar(theta) else u


def compander_inverse(u, p: CompanderParams):
    """Exact inverse of compander_forward on (0,1)."""
    v = np.asarray(u, dtype=np.float64)
    if np.any(v <= 0.0) or np.any(v >= 1.0):
        raise QuantizeError("compander_inverse requires u in (0,1)")
    half = v - 0.5
    theta = p.mu - np.sign(half) * (3.0 * p.S / SQRT2) * np.log1p(-2.0 * np.abs(half))
    return float(theta) if np.isscalar(u) else theta


def build_dequant_lut(B: int, p: CompanderParams, b_max: int = 8) -> DequantLUT:
    """Decompanded midpoints of the 2**B uniform cells on (0,1)."""
    if not 1 <= B <= b_max:
        raise QuantizeError(f"LUT depth must be in [1, {b_max}]")
    mids = (np.arange(2**B, dtype=np.float64) + 0.5) / 2**B
    values = compander_inverse(mids, p)
    return DequantLUT(depth=B, values=tuple(float(v) for v in values))


def compand_quantize(
    theta, B: int, p: CompanderParams
) -> tuple[np.ndarray, np.ndarray]:
    """Quantize through the compander; returns (indices, dequantized).

    Cell i covers u in [i/2**B, (i+1)/2**B); reconstruction is the
    decompanded cell midpoint.  B = 0 prunes the group: the index stream
    is empty and every weight reconstructs to the mean.
    """
    x = np.asarray(theta, dtype=np.float64)
    if B < 0:
        raise QuantizeError("bit depth must be nonnegative")
    if B == 0:
        return np.empty(0, dtype=np.int64), np.full(x.shape, p.mu, dtype=np.float64)
    u = compander_forward(x, p)
    idx = np.clip(np.floor(u * 2**B), 0, 2**B - 1).astype(np.int64)
    lut = np.asarray(build_dequant_lut(B, p).values)
    return idx, lut[idx]


def dequantize_indices(idx: np.ndarray, B: int, p: CompanderParams, mu_count: int = 0):
    """Map stored indices back through the depth-B LUT (B=0: means)."""
    if B == 0:
        return np.full(mu_count, p.mu, dtype=np.float64)
    lut = np.asarray(build_dequant_lut(B, p).values)
    return lut[np.asarray(idx, dtype=np.int64)]


def rtn_quantize(theta, B: int) -> tuple[np.ndarray, np.ndarray]:
    """Round-to-nearest baseline: uniform grid over the full value range."""
    x = np.asarray(theta, dtype=np.float64)
    if B == 0:
        return np.empty(0, dtype=np.int64), np.full(x.shape, float(x.mean()))
    lo, hi = float(x.min()), float(x.max())
    span = hi - lo
    if span == 0.0:
        return np.zeros(x.shape, dtype=np.int64), np.full(x.shape, lo)
    step = span / 2**B
    idx = np.clip(np.floor((x - lo) / step), 0, 2**B - 1).astype(np.int64)
    return idx, lo + (idx + 0.5) * step


def _lloyd_fixed_point(xs, cum1, cum2, levels, tol, max_iter):
    """Alternating centroid/boundary updates; prefix sums make one sweep
    O(levels log n).  Empty cells keep their previous level, so the MSE
    never increases."""
    n = xs.size
    mse_prev = np.inf
    mse = np.inf
    boundaries = 0.5 * (levels[1:] + levels[:-1])
    for _ in range(max_iter):
        boundaries = 0.5 * (levels[1:] + levels[:-1])
        edges = np.concatenate(([0], np.searchsorted(xs, boundaries), [n]))
        counts = np.diff(edges)
        sums = cum1[edges[1:]] - cum1[edges[:-1]]
        sqsums = cum2[edges[1:]] - cum2[edges[:-1]]
        nonempty = counts > 0
        levels = np.where(nonempty, np.divide(sums, np.maximum(counts, 1)), levels)
        mse = float(np.sum(sqsums - 2.0 * levels * sums + counts * levels**2) / n)
        if mse_prev - mse <= tol * max(mse, 1e-300):
            break
        mse_prev = mse
    return levels, boundaries, mse


def lloyd_max_oracle(
    samples, B: int, tol: float = 1e-10, max_iter: int = 500, init_levels=None
) -> tuple[np.ndarray, np.ndarray, float]:
    """Fixed point of centroid/boundary updates on the empirical sample.

    Returns (levels, boundaries, mse).  By default the level count is
    grown by binary splitting (each stage converged before doubling), the
    standard way to land near the global fixed point; pass init_levels to
    start the final-size iteration from a specific configuration.  Each
    stage stops when the relative MSE change drops below tol or after
    max_iter sweeps.
    """
    xs = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n_levels = 2**B
    if np.unique(xs).size < n_levels:
        raise QuantizeError(f"need at least {n_levels} distinct samples")

    cum1 = np.concatenate(([0.0], np.cumsum(xs)))
    cum2 = np.concatenate(([0.0], np.cumsum(xs**2)))

    if init_levels is not None:
        levels = np.sort(np.asarray(init_levels, dtype=np.float64))
        if levels.size != n_levels:
            raise QuantizeError("init_levels must supply 2**B values")
        return _lloyd_fixed_point(xs, cum1, cum2, levels, tol, max_iter)

    levels = np.array([xs.mean()])
    while True:
        levels, boundaries, mse = _lloyd_fixed_point(xs, cum1, cum2, levels, tol, max_iter)
        if levels.size == n_levels:
            return levels, boundaries, mse
        # split each cell's level toward its edges before the next stage
        edges = np.concatenate(([xs[0]], 0.5 * (levels[1:] + levels[:-1]), [xs[-1]]))
        lo = levels - 0.5 * (levels - edges[:-1])
        hi = levels + 0.5 * (edges[1:] - levels)
        levels = np.sort(np.concatenate([lo, hi]))


def compand_mse(theta, B: int, p: CompanderParams) -> float:
    _, deq = compand_quantize(theta, B, p)
    x = np.asarray(theta, dtype=np.float64)
    return float(np.mean((deq - x) ** 2))


def grid_calibrate(theta, B: int, p0: CompanderParams) -> CompanderParams:
    """Coordinate search for (S, mu) on coarse 1D grids.

    S scans a multiplicative octave/8 grid (17 points), then mu scans 17
    additive points spanning +/- p0.S.  Both grids contain the starting
    point, so the returned MSE never exceeds the p0 MSE.  Zero-variance
    input returns p0 unchanged.
    """
    x = np.asarray(theta, dtype=np.float64).ravel()
    if B < 1:
        raise QuantizeError("grid_calibrate requires B >= 1")
    if x.size == 0 or float(x.max() - x.min()) == 0.0:
        return p0

    s_grid = [p0.S * 2.0 ** (k / 8.0) for k in range(-8, 9)]
    mses = [compand_mse(x, B, CompanderParams(s, p0.mu)) for s in s_grid]
    s_best = s_grid[int(np.argmin(mses))]

    mu_grid = [p0.mu + t for t in np.linspace(-p0.S, p0.S, 17)]
    mses = [compand_mse(x, B, CompanderParams(s_best, m)) for m in mu_grid]
    mu_best = mu_grid[int(np.argmin(mses))]
    return CompanderParams(S=s_best, mu=mu_best)
