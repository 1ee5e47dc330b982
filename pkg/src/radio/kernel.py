"""Dequantizing matrix-vector multiply over a PackedMatrix.

Traversal is group-major: one bit cursor and one LUT are live at a time,
and each group's members are consumed consecutively in ascending cross
order.  Accumulation is float64 in fixed member order, so repeated runs
produce bit-identical results.
"""

from __future__ import annotations

import json
import time

import numpy as np

from .pack import PackedMatrix
from .quantize import CompanderParams, build_dequant_lut


class KernelError(ValueError):
    pass


def _group_values(m: PackedMatrix, g: int, members: np.ndarray) -> np.ndarray:
    depth = m.depths[g]
    if depth == 0:
        return np.full(len(members), m.means[g], dtype=np.float64)
    params = CompanderParams(S=m.scales[g], mu=m.means[g])
    lut = np.asarray(build_dequant_lut(depth, params).values)
    return lut[m.group_indices(g)]


def packed_matvec(m: PackedMatrix, x: np.ndarray) -> np.ndarray:
    """y = dequant(m) @ x without materializing the dense matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (m.cols,):
        raise KernelError(f"vector length {x.shape} does not match cols {m.cols}")
    y = np.zeros(m.rows, dtype=np.float64)
    plan = m.plan
    for g in range(m.group_count):
        line, members = plan.group_members(g)
        vals = _group_values(m, g, members)
        if m.axis == "columns":
            y[members] += vals * x[line]
        else:
            y[line] += float(np.dot(vals, x[members]))
    return y


def dense_matrix(m: PackedMatrix) -> np.ndarray:
    """Explicitly dequantized weights (the oracle path uses this + np.dot)."""
    w = np.empty((m.rows, m.cols), dtype=np.float64)
    plan = m.plan
    for g in range(m.group_count):
        line, members = plan.group_members(g)
        vals = _group_values(m, g, members)
        if m.axis == "columns":
            w[members, line] = vals
        else:
            w[line, members] = vals
    return w


def dense_matvec_oracle(m: PackedMatrix, x: np.ndarray) -> np.ndarray:
    return dense_matrix(m) @ np.asarray(x, dtype=np.float64)


def bench_matvec(m: PackedMatrix, trials: int, rng_seed: int = 0) -> dict:
    """Median packed vs dense-float32 matvec timings over `trials` runs.

    The packed result vector is asserted bit-identical across runs; the
    report is one JSON-ready record per the shape under test.
    """
    if trials < 1:
        raise KernelError("trials must be at least 1")
    rng = np.random.default_rng(rng_seed)
    x = rng.standard_normal(m.cols)
    dense32 = dense_matrix(m).astype(np.float32)
    x32 = x.astype(np.float32)

    reference = packed_matvec(m, x)
    packed_ns, dense_ns = [], []
    for _ in range(max(1, trials // 4)):  # warm-up
        packed_matvec(m, x)
        dense32 @ x32
    for _ in range(trials):
        t0 = time.perf_counter_ns()
        y = packed_matvec(m, x)
        packed_ns.append(time.perf_counter_ns() - t0)
        if not np.array_equal(y, reference):
            raise KernelError("packed matvec result drifted between runs")
        t0 = time.perf_counter_ns()
        dense32 @ x32
        dense_ns.append(time.perf_counter_ns() - t0)
    p_med = float(np.median(packed_ns))
    d_med = float(np.median(dense_ns))
    return {
        "shape": f"{m.rows}x{m.cols}",
        "packed_ns": p_med,
        "dense_ns": d_med,
        "ratio": d_med / p_med if p_med > 0 else float("inf"),
    }


def bench_report_line(report: dict) -> str:
    return json.dumps(report)
