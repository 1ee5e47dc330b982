"""Weight-matrix grouping: column groups, row sub-groups, and the gains
and overheads that come with them.

A matrix is first split into per-column groups; rows are then sorted by
their total row score G2_r*S2_r and cut into M contiguous, size-balanced
buckets, the same bucket assignment applying to every column.  Group g of
column c and bucket m sits at index c*M + m.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .allocate import BitAllocation
from .stats import GroupStats, StatsSet


class GroupingError(ValueError):
    pass


@dataclass(frozen=True)
class GroupingPlan:
    """How a matrix is partitioned into weight groups.

    ``row_subgroup_index`` assigns each position along the cross axis
    (rows, when axis == "columns") to one of M buckets.  ``n_lines`` is
    the number of primary lines (columns, when axis == "columns"); a plan
    produced from row scores alone leaves it None until bound to a matrix.
    """

    axis: str
    M: int
    row_subgroup_index: tuple[int, ...]
    n_lines: int | None = None

    def __post_init__(self) -> None:
        if self.axis not in ("rows", "columns"):
            raise GroupingError("axis must be 'rows' or 'columns'")
        if self.M < 1:
            raise GroupingError("M must be at least 1")
        if any(not 0 <= m < self.M for m in self.row_subgroup_index):
            raise GroupingError("subgroup index out of range")

    @property
    def n_cross(self) -> int:
        return len(self.row_subgroup_index)

    @property
    def group_count(self) -> int:
        if self.n_lines is None:
            raise GroupingError("plan is not bound to a matrix (n_lines unset)")
        return self.n_lines * self.M

    def bind(self, n_lines: int) -> "GroupingPlan":
        return replace(self, n_lines=n_lines)

    def bucket_members(self, m: int) -> np.ndarray:
        """Cross-axis positions assigned to bucket m, ascending."""
        idx = np.asarray(self.row_subgroup_index)
        return np.nonzero(idx == m)[0]

    def group_members(self, g: int) -> tuple[int, np.ndarray]:
        """(line, cross positions) of group g = line*M + bucket."""
        line, m = divmod(g, self.M)
        return line, self.bucket_members(m)


def split_columns(
    col_g2, col_s2, col_mu, rows: int, dist: str = "Gaussian"
) -> list[GroupStats]:
    """One GroupStats per column, order-preserving (P = rows each)."""
    col_g2 = np.asarray(col_g2, dtype=np.float64)
    col_s2 = np.asarray(col_s2, dtype=np.float64)
    col_mu = np.asarray(col_mu, dtype=np.float64)
    if not np.all(col_s2 > 0):
        raise GroupingError("per-column variances must be positive")
    return [
        GroupStats(group_id=j, P=rows, G2=float(col_g2[j]), S2=float(col_s2[j]),
                   mu=float(col_mu[j]), dist=dist)
        for j in range(len(col_s2))
    ]


def subgroup_rows(row_scores, M: int) -> GroupingPlan:
    """Sort rows by score and cut into M contiguous size-balanced buckets.

    Ties break by row index; the first (rows mod M) buckets take the
    extra row.  The assignment applies identically to every column.
    """
    scores = np.asarray(row_scores, dtype=np.float64)
    n = scores.size
    if M < 1:
        raise GroupingError("M must be at least 1")
    if M > n:
        raise GroupingError("M cannot exceed the number of rows")
    order = np.lexsort((np.arange(n), scores))  # score asc, then row index
    base, extra = divmod(n, M)
    assignment = np.empty(n, dtype=np.int64)
    start = 0
    for m in range(M):
        size = base + (1 if m < extra else 0)
        assignment[order[start : start + size]] = m
        start += size
    return GroupingPlan(axis="columns", M=M, row_subgroup_index=tuple(int(a) for a in assignment))


def grouping_gain(pooled: GroupStats, parts: list[GroupStats]) -> float:
    """Average bit-depth saving of per-part allocation over pooled (bits).

    Size-weighted form of the Jensen gain: with w_n = P_n / sum(P),

        gamma = 0.5 * (log2(G2*S2 pooled) - sum_n w_n*log2(G2_n*S2_n)).

    For equal-sized parts this is the plain 1/N average; the weighting is
    what makes the gain nonnegative and refinement-monotone when part
    sizes differ (it is the rate saved by assigning depths per part at
    equal distortion).
    """
    if len(parts) == 0:
        raise GroupingError("parts must be nonempty")
    prods = np.array([g.G2 * g.S2 for g in parts], dtype=np.float64)
    if np.any(prods <= 0):
        raise GroupingError("grouping gain requires positive variance products")
    w = np.array([g.P for g in parts], dtype=np.float64)
    w /= w.sum()
    pooled_prod = pooled.G2 * pooled.S2
    return float(0.5 * (math.log2(pooled_prod) - np.dot(w, np.log2(prods))))


def overhead_bits(plan: GroupingPlan, alloc: BitAllocation) -> tuple[int, float]:
    """Signaling cost of the packed format: (bits, fraction of payload).

    Each group record costs 4 (depth) + 16 (scale) + 16 (mean) bits; the
    sub-group table costs ceil(log2 M) bits per row.
    """
    if alloc.depths is None:
        raise GroupingError("overhead accounting needs integer depths")
    n_groups = plan.group_count
    if n_groups != len(alloc.depths):
        raise GroupingError("plan and allocation are not aligned")
    index_bits = math.ceil(math.log2(plan.M)) if plan.M > 1 else 0
    bits = n_groups * (4 + 16 + 16) + plan.n_cross * index_bits

    payload = 0
    for g, depth in enumerate(alloc.depths):
        _, members = plan.group_members(g)
        payload += len(members) * depth
    if payload == 0:
        raise GroupingError("all-zero depths carry no payload to amortize over")
    return bits, bits / payload


def pruned_fraction(alloc: BitAllocation, stats: StatsSet) -> float:
    """Weight fraction sitting in depth-0 groups."""
    if alloc.depths is None:
        raise GroupingError("pruned fraction needs integer depths")
    total = stats.total_weights
    pruned = sum(g.P for g, b in zip(stats.groups, alloc.depths) if b == 0)
    return pruned / total
