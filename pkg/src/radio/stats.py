"""Core domain types and the group-statistics interchange format.

A *group* is a set of weights that shares one (bit depth, scale, mean)
record.  Everything the allocator needs to know about a group is its
element count P, its gradient variance G2 (mean squared partial of the
projected model output w.r.t. the weights), its weight variance S2 and
mean mu, plus a distribution tag that selects the diagnostic quantization
coefficient H.

The on-disk format is a single JSON document::

    {"rate": 3.0, "b_max": 8,
     "groups": [{"id": "g0", "P": 512, "G2": 1.0, "S2": 0.02,
                 "mu": 0.0, "dist": "Gaussian"}, ...]}

Field order is irrelevant; unknown fields are rejected.  All types here
are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

DIST_GAUSSIAN = "Gaussian"
DIST_LAPLACE = "Laplace"

# High-rate quantization coefficient per source distribution.  Diagnostic
# only: it is assumed equal across groups and cancels out of allocation.
H_BY_DIST = {DIST_GAUSSIAN: 1.42, DIST_LAPLACE: 0.72}

DEFAULT_B_MAX = 8


class StatsError(ValueError):
    """A stats document or GroupStats value violates the contract."""


@dataclass(frozen=True)
class GroupStats:
    """Per-group statistics driving bit-depth allocation."""

    group_id: str | int
    P: int
    G2: float
    S2: float
    mu: float
    dist: str = DIST_GAUSSIAN

    def __post_init__(self) -> None:
        if not isinstance(self.P, int) or isinstance(self.P, bool) or self.P < 1:
            raise StatsError(f"group {self.group_id!r}: P must be a positive integer")
        if not self.S2 > 0:
            raise StatsError(f"group {self.group_id!r}: S2 must be positive")
        if self.G2 < 0:
            raise StatsError(f"group {self.group_id!r}: G2 must be nonnegative")
        if self.dist not in H_BY_DIST:
            raise StatsError(
                f"group {self.group_id!r}: dist must be one of {sorted(H_BY_DIST)}"
            )

    @property
    def H(self) -> float:
        """Quantization coefficient selected by the distribution tag."""
        return H_BY_DIST[self.dist]


@dataclass(frozen=True)
class StatsSet:
    """An ordered collection of groups plus the rate target."""

    groups: tuple[GroupStats, ...]
    rate: float
    b_max: int = DEFAULT_B_MAX

    def __post_init__(self) -> None:
        if len(self.groups) == 0:
            raise StatsError("stats set must contain at least one group")
        if self.b_max < 1:
            raise StatsError("b_max must be at least 1")
        if not 0 <= self.rate <= self.b_max:
            raise StatsError(f"rate outside [0, {self.b_max}]")
        seen: set[str | int] = set()
        for g in self.groups:
            if g.group_id in seen:
                raise StatsError(f"duplicate group_id {g.group_id!r}")
            seen.add(g.group_id)

    @property
    def total_weights(self) -> int:
        return sum(g.P for g in self.groups)


_GROUP_FIELDS = {"id", "P", "G2", "S2", "mu", "dist"}
_TOP_FIELDS = {"rate", "b_max", "groups"}


def validate_stats(raw: bytes | str) -> StatsSet:
    """Parse and validate a stats interchange document.

    Raises :class:`StatsError` naming the first violated invariant.
    """
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise StatsError(f"malformed document: {exc}") from exc
    if not isinstance(doc, dict):
        raise StatsError("malformed document: top level must be an object")
    unknown = set(doc) - _TOP_FIELDS
    if unknown:
        raise StatsError(f"unknown field {sorted(unknown)[0]!r}")
    for field in ("rate", "groups"):
        if field not in doc:
            raise StatsError(f"missing field {field!r}")
    if not isinstance(doc["groups"], list):
        raise StatsError("'groups' must be an array")

    groups = []
    for i, entry in enumerate(doc["groups"]):
        if not isinstance(entry, dict):
            raise StatsError(f"group #{i}: must be an object")
        unknown = set(entry) - _GROUP_FIELDS
        if unknown:
            raise StatsError(f"group #{i}: unknown field {sorted(unknown)[0]!r}")
        missing = _GROUP_FIELDS - set(entry) - {"dist"}
        if missing:
            raise StatsError(f"group #{i}: missing field {sorted(missing)[0]!r}")
        gid = entry["id"]
        if not isinstance(gid, (str, int)) or isinstance(gid, bool):
            raise StatsError(f"group #{i}: id must be a string or integer")
        p = entry["P"]
        if isinstance(p, bool) or not isinstance(p, int):
            raise StatsError(f"group {gid!r}: P must be a positive integer")
        groups.append(
            GroupStats(
                group_id=gid,
                P=p,
                G2=_as_real(entry["G2"], gid, "G2"),
                S2=_as_real(entry["S2"], gid, "S2"),
                mu=_as_real(entry["mu"], gid, "mu"),
                dist=entry.get("dist", DIST_GAUSSIAN),
            )
        )
    return StatsSet(
        groups=tuple(groups),
        rate=_as_real(doc["rate"], None, "rate"),
        b_max=int(doc.get("b_max", DEFAULT_B_MAX)),
    )


def _as_real(value, gid, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        where = f"group {gid!r}: " if gid is not None else ""
        raise StatsError(f"{where}{name} must be a number")
    return float(value)


def to_json(stats: StatsSet) -> str:
    """Serialize a StatsSet to the interchange format (round-trip exact)."""
    doc = {
        "rate": stats.rate,
        "b_max": stats.b_max,
        "groups": [
            {"id": g.group_id, "P": g.P, "G2": g.G2, "S2": g.S2, "mu": g.mu, "dist": g.dist}
            for g in stats.groups
        ],
    }
    return json.dumps(doc)


def pooled_stats(groups: list[GroupStats] | tuple[GroupStats, ...]) -> GroupStats:
    """Pool several groups into one as if their weights were merged.

    G2, S2 and mu are P-weighted arithmetic means; P is the total count.
    All groups must share the same distribution tag.
    """
    if len(groups) == 0:
        raise StatsError("cannot pool an empty group sequence")
    dist = groups[0].dist
    if any(g.dist != dist for g in groups):
        raise StatsError("cannot pool groups with mixed distribution tags")
    total_p = sum(g.P for g in groups)
    g2 = sum(g.P * g.G2 for g in groups) / total_p
    s2 = sum(g.P * g.S2 for g in groups) / total_p
    mu = sum(g.P * g.mu for g in groups) / total_p
    return GroupStats(group_id="pooled", P=total_p, G2=g2, S2=s2, mu=mu, dist=dist)
