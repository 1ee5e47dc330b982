"""Bit-exact serialization of a quantized matrix (the .rdq format).

Layout, all integers little-endian::

    magic   "RDQ1"                      4 bytes
    version uint16                      2 bytes
    rows    uint32                      4 bytes
    cols    uint32                      4 bytes
    axis    uint8 (0=columns, 1=rows)   1 byte
    M       uint16                      2 bytes
    group records, one per group in order g = line*M + bucket:
        depth  uint8  (4-bit value, upper nibble zero; 9..15 reserved)
        scale  IEEE-754 binary16
        mean   IEEE-754 binary16
    sub-group index table: ceil(log2 M) bits per cross-axis element,
        LSB-first, padded to a byte boundary
    payload: per group, members in ascending cross order, each index in
        exactly `depth` bits, LSB-first within little-endian 32-bit
        words; the whole payload is padded to a 32-bit word boundary.

Depth-0 groups contribute no payload bits.  Scale and mean are rounded
through binary16 before any dequantization, so the stored and in-memory
parameters agree bit-for-bit.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .allocate import BitAllocation
from .grouping import GroupingPlan
from .quantize import CompanderParams, compand_quantize, grid_calibrate

MAGIC = b"RDQ1"
VERSION = 1
_HEADER = struct.Struct("<4sHIIBH")


class PackError(ValueError):
    pass


@dataclass(frozen=True)
class PackedMatrix:
    """Parsed .rdq container; immutable and shareable across workers."""

    rows: int
    cols: int
    axis: str
    M: int
    depths: tuple[int, ...]
    scales: tuple[float, ...]
    means: tuple[float, ...]
    row_subgroup_index: tuple[int, ...]
    payload_words: np.ndarray  # uint32, read-only

    @property
    def n_lines(self) -> int:
        return self.cols if self.axis == "columns" else self.rows

    @property
    def n_cross(self) -> int:
        return self.rows if self.axis == "columns" else self.cols

    @property
    def plan(self) -> GroupingPlan:
        return GroupingPlan(
            axis=self.axis,
            M=self.M,
            row_subgroup_index=self.row_subgroup_index,
            n_lines=self.n_lines,
        )

    @property
    def group_count(self) -> int:
        return self.n_lines * self.M

    def group_params(self) -> list[CompanderParams]:
        return [
            CompanderParams(S=s, mu=m) for s, m in zip(self.scales, self.means)
        ]

    def allocation(self) -> BitAllocation:
        plan = self.plan
        counts = np.array(
            [len(plan.group_members(g)[1]) for g in range(self.group_count)]
        )
        rate = float(np.dot(counts, self.depths) / counts.sum())
        return BitAllocation(
            depths=self.depths,
            depths_cont=tuple(float(d) for d in self.depths),
            V=None,
            achieved_rate=rate,
        )

    def _bit_offsets(self) -> np.ndarray:
        bucket_sizes = np.bincount(np.asarray(self.row_subgroup_index), minlength=self.M)
        counts = np.tile(bucket_sizes, self.n_lines)
        bits = counts * np.asarray(self.depths, dtype=np.int64)
        return np.concatenate(([0], np.cumsum(bits)))

    def group_bit_offset(self, g: int) -> int:
        return int(self._bit_offsets()[g])

    def group_indices(self, g: int) -> np.ndarray:
        """Decode the index stream of group g from the payload words."""
        depth = self.depths[g]
        _, members = self.plan.group_members(g)
        if depth == 0:
            return np.empty(0, dtype=np.int64)
        bitpos = self.group_bit_offset(g) + depth * np.arange(len(members), dtype=np.int64)
        word = bitpos >> 5
        shift = (bitpos & 31).astype(np.uint64)
        lo = self.payload_words[word].astype(np.uint64)
        # An index can straddle a word boundary (depth <= 8 < 32); bits from
        # the next word land above bit 32-shift and the mask strips any spill.
        nxt = np.minimum(word + 1, len(self.payload_words) - 1)
        hi = self.payload_words[nxt].astype(np.uint64)
        full = (lo >> shift) | (hi << (np.uint64(32) - shift))
        mask = np.uint64((1 << depth) - 1)
        return (full & mask).astype(np.int64)

    def all_indices(self) -> list[np.ndarray]:
        return [self.group_indices(g) for g in range(self.group_count)]


def _f16_bits(x: float) -> int:
    return int(np.float16(x).view(np.uint16))


def _f16_value(bits: int) -> float:
    return float(np.uint16(bits).view(np.float16))


def pack(
    indices_per_group: list[np.ndarray],
    plan: GroupingPlan,
    alloc: BitAllocation,
    params_per_group: list[CompanderParams],
    shape: tuple[int, int],
) -> bytes:
    """Serialize quantization indices into the .rdq byte stream."""
    rows, cols = shape
    if plan.n_lines is None:
        plan = plan.bind(cols if plan.axis == "columns" else rows)
    if plan.n_cross != (rows if plan.axis == "columns" else cols):
        raise PackError("plan cross-axis size does not match the matrix shape")
    n_groups = plan.group_count
    if alloc.depths is None or len(alloc.depths) != n_groups:
        raise PackError("allocation depths do not match the plan's group count")
    if len(indices_per_group) != n_groups or len(params_per_group) != n_groups:
        raise PackError("per-group inputs do not match the plan's group count")

    out = bytearray()
    axis_flag = 0 if plan.axis == "columns" else 1
    out += _HEADER.pack(MAGIC, VERSION, rows, cols, axis_flag, plan.M)

    for g in range(n_groups):
        depth = alloc.depths[g]
        if not 0 <= depth <= 8:
            raise PackError(f"group {g}: depth {depth} out of [0, 8]")
        p = params_per_group[g]
        s_bits = _f16_bits(p.S)
        if _f16_value(s_bits) <= 0:
            raise PackError(f"group {g}: scale underflows binary16")
        out += struct.pack("<BHH", depth, s_bits, _f16_bits(p.mu))

    index_bits = math.ceil(math.log2(plan.M)) if plan.M > 1 else 0
    if index_bits:
        table = 0
        for i, m in enumerate(plan.row_subgroup_index):
            table |= m << (i * index_bits)
        out += table.to_bytes((plan.n_cross * index_bits + 7) // 8, "little")

    payload = 0
    bitpos = 0
    for g in range(n_groups):
        depth = alloc.depths[g]
        _, members = plan.group_members(g)
        idx = np.asarray(indices_per_group[g], dtype=np.int64)
        if depth == 0:
            if idx.size != 0:
                raise PackError(f"group {g}: depth-0 group must carry no indices")
            continue
        if idx.size != len(members):
            raise PackError(f"group {g}: index count does not match member count")
        if idx.size and (idx.min() < 0 or idx.max() >= 2**depth):
            raise PackError(f"group {g}: index out of range for depth {depth}")
        for v in idx:
            payload |= int(v) << bitpos
            bitpos += depth
    n_words = (bitpos + 31) // 32
    out += payload.to_bytes(n_words * 4, "little")
    return bytes(out)


def unpack(data: bytes) -> PackedMatrix:
    """Exact inverse of :func:`pack`."""
    if len(data) < _HEADER.size:
        raise PackError("truncated stream: header incomplete")
    magic, version, rows, cols, axis_flag, m_count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise PackError("bad magic")
    if version != VERSION:
        raise PackError(f"unsupported version {version}")
    if axis_flag not in (0, 1):
        raise PackError(f"bad axis flag {axis_flag}")
    axis = "columns" if axis_flag == 0 else "rows"
    n_lines = cols if axis == "columns" else rows
    n_cross = rows if axis == "columns" else cols
    n_groups = n_lines * m_count
    pos = _HEADER.size

    depths, scales, means = [], [], []
    for g in range(n_groups):
        if pos + 5 > len(data):
            raise PackError("truncated stream: group records incomplete")
        depth, s_bits, m_bits = struct.unpack_from("<BHH", data, pos)
        pos += 5
        if depth > 8:
            raise PackError(f"group {g}: reserved depth value {depth}")
        depths.append(depth)
        scales.append(_f16_value(s_bits))
        means.append(_f16_value(m_bits))

    index_bits = math.ceil(math.log2(m_count)) if m_count > 1 else 0
    if index_bits:
        n_bytes = (n_cross * index_bits + 7) // 8
        if pos + n_bytes > len(data):
            raise PackError("truncated stream: sub-group table incomplete")
        table = int.from_bytes(data[pos : pos + n_bytes], "little")
        pos += n_bytes
        mask = (1 << index_bits) - 1
        subgroups = tuple((table >> (i * index_bits)) & mask for i in range(n_cross))
        if any(m >= m_count for m in subgroups):
            raise PackError("sub-group index out of range")
    else:
        subgroups = (0,) * n_cross

    plan = GroupingPlan(axis=axis, M=m_count, row_subgroup_index=subgroups, n_lines=n_lines)
    total_bits = sum(
        len(plan.bucket_members(g % m_count)) * depths[g] for g in range(n_groups)
    )
    n_words = (total_bits + 31) // 32
    if pos + 4 * n_words > len(data):
        raise PackError("truncated stream: payload incomplete")
    words = np.frombuffer(data, dtype="<u4", offset=pos, count=n_words).astype(np.uint32)
    words.setflags(write=False)

    return PackedMatrix(
        rows=rows,
        cols=cols,
        axis=axis,
        M=m_count,
        depths=tuple(depths),
        scales=tuple(scales),
        means=tuple(means),
        row_subgroup_index=subgroups,
        payload_words=words,
    )


def packed_size(rows: int, cols: int, axis: str, M: int, depths, plan: GroupingPlan) -> int:
    """Closed-form byte size of the .rdq stream."""
    n_lines = cols if axis == "columns" else rows
    n_cross = rows if axis == "columns" else cols
    n_groups = n_lines * M
    index_bits = math.ceil(math.log2(M)) if M > 1 else 0
    payload_bits = sum(
        len(plan.bucket_members(g % M)) * depths[g] for g in range(n_groups)
    )
    return (
        _HEADER.size
        + 5 * n_groups
        + (n_cross * index_bits + 7) // 8
        + 4 * ((payload_bits + 31) // 32)
    )


def quantize_matrix(
    weights: np.ndarray,
    plan: GroupingPlan,
    depths,
    calibrate: bool = False,
) -> tuple[list[np.ndarray], list[CompanderParams], np.ndarray]:
    """Compand-quantize a dense matrix group by group.

    Parameters default to each group's mean and standard deviation,
    rounded through binary16; ``calibrate`` runs the MSE grid search
    first.  Returns (indices per group, binary16 params, dequantized
    matrix).
    """
    w = np.asarray(weights, dtype=np.float64)
    rows, cols = w.shape
    if plan.n_lines is None:
        plan = plan.bind(cols if plan.axis == "columns" else rows)
    if len(depths) != plan.group_count:
        raise PackError("depth count does not match the plan's group count")

    indices: list[np.ndarray] = []
    params: list[CompanderParams] = []
    dequant = np.empty_like(w)
    for g in range(plan.group_count):
        line, members = plan.group_members(g)
        vals = w[members, line] if plan.axis == "columns" else w[line, members]
        std = float(vals.std())
        p = CompanderParams(S=max(std, 2**-14), mu=float(vals.mean()))
        depth = int(depths[g])
        if calibrate and depth >= 1:
            p = grid_calibrate(vals, depth, p)
        p = p.rounded_fp16()
        if p.S <= 0:
            p = CompanderParams(S=2**-14, mu=p.mu)
        idx, deq = compand_quantize(vals, depth, p)
        indices.append(idx)
        params.append(p)
        if plan.axis == "columns":
            dequant[members, line] = deq
        else:
            dequant[line, members] = deq
    return indices, params, dequant


def read_f32(path: str | Path) -> np.ndarray:
    """Raw little-endian float32 tensor with a one-line JSON shape sidecar."""
    path = Path(path)
    sidecar = path.with_name(path.name + ".json")
    if not sidecar.exists():
        raise PackError(f"missing shape sidecar {sidecar}")
    shape = json.loads(sidecar.read_text())["shape"]
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise PackError(f"{path}: data size does not match sidecar shape {shape}")
    return data.reshape(shape).astype(np.float64)


def write_f32(path: str | Path, array: np.ndarray) -> None:
    path = Path(path)
    arr = np.asarray(array, dtype="<f4")
    arr.tofile(path)
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps({"shape": list(arr.shape)}) + "\n")
