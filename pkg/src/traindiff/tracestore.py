"""Trace records, the in-memory collector, and the binary file format.

A trace is an execution-ordered list of captured tensor shards keyed by
canonical id.  Payloads are carried as 32-bit floats: emulated BF16/FP8
grids are subsets of float32, so narrowing loses nothing, and it halves
the file size against float64.

The file format is little-endian and sequential, bracketed by magics:

    "TTRC" | u16 version=1 | u16 flags=0 | u32 len | header JSON
    per record:
        u8 type=1 | u32 len | canonical id string
        u16 dp, tp, pp, vp, cp, sp | u16 replica_group_size
        u32 len | module class string
        u8 dtype=0 (f32) | u8 ndim | ndim x u64 dims (local shape)
        u16 pair count | per pair: global box then local box,
            each box ndim x (u64 start, u64 stop)
        u64 payload byte length | payload (f32, row-major)
    "CRTT"

The global shape of a shard's full tensor is not stored; readers
reconstruct the hull from global boxes (the checker normalizes across the
id group before merging).  Loading preserves the raw header bytes so that
flush(load(f)) is byte-identical for any well-formed file.
"""

from __future__ import annotations

import fnmatch
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .canonical import CanonicalId, ShardMapping, SliceBox, TensorKind, parse_canonical
from .errors import FormatError, ShapeMismatch, TraindiffError

MAGIC = b"TTRC"
END_MAGIC = b"CRTT"
VERSION = 1
_RECORD_TYPE = 1
_DTYPE_F32 = 0


def canonical_json(obj) -> bytes:
    """Deterministic JSON bytes: sorted keys, no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass(frozen=True)
class RankMeta:
    dp: int = 0
    tp: int = 0
    pp: int = 0
    vp: int = 0
    cp: int = 0
    sp: int = 0

    def as_tuple(self) -> tuple[int, ...]:
        return (self.dp, self.tp, self.pp, self.vp, self.cp, self.sp)


@dataclass
class TraceRecord:
    id: CanonicalId
    rank_meta: RankMeta
    mapping: ShardMapping
    replica_group_size: int
    payload: np.ndarray
    module_class: str

    def __post_init__(self):
        self.payload = np.ascontiguousarray(self.payload, dtype=np.float32)
        if self.payload.shape != self.mapping.local_shape:
            raise ShapeMismatch(
                f"payload shape {self.payload.shape} != mapping local shape "
                f"{self.mapping.local_shape} for {self.id.encode()}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.payload.shape

    def values(self) -> np.ndarray:
        """Payload widened back to working precision."""
        return self.payload.astype(np.float64)

    def identical(self, other: "TraceRecord") -> bool:
        return (self.id == other.id
                and self.rank_meta == other.rank_meta
                and self.mapping.signature() == other.mapping.signature()
                and self.replica_group_size == other.replica_group_size
                and self.module_class == other.module_class
                and self.payload.tobytes() == other.payload.tobytes())


@dataclass
class Trace:
    header: dict
    records: list[TraceRecord] = field(default_factory=list)
    raw_header: bytes | None = None

    def equals(self, other: "Trace") -> bool:
        return (self.header == other.header
                and len(self.records) == len(other.records)
                and all(a.identical(b) for a, b in zip(self.records, other.records)))

    def by_id(self) -> dict[str, list[tuple[int, TraceRecord]]]:
        """Records grouped by canonical id string, keeping execution index."""
        groups: dict[str, list[tuple[int, TraceRecord]]] = {}
        for index, record in enumerate(self.records):
            groups.setdefault(record.id.encode(), []).append((index, record))
        return groups


@dataclass(frozen=True)
class TraceFilter:
    """Which (module, kind) pairs the collector keeps.  Patterns are
    fnmatch-style over canonical module names; empty means keep all."""

    module_patterns: tuple[str, ...] = ()
    kinds: frozenset[TensorKind] = frozenset()

    def admits(self, ident: CanonicalId) -> bool:
        if self.kinds and ident.kind not in self.kinds:
            return False
        if self.module_patterns:
            return any(fnmatch.fnmatchcase(ident.module_name, pat)
                       for pat in self.module_patterns)
        return True


class TraceCollector:
    """Accumulates records during a run; enforces (id, rank) uniqueness."""

    def __init__(self, header: dict, trace_filter: TraceFilter | None = None):
        self._trace = Trace(header=dict(header))
        self._filter = trace_filter or TraceFilter()
        self._seen: set[tuple[str, tuple[int, ...]]] = set()

    def add(self, record: TraceRecord) -> None:
        if not self._filter.admits(record.id):
            return
        key = (record.id.encode(), record.rank_meta.as_tuple())
        if key in self._seen:
            raise TraindiffError(f"duplicate trace record for {key}")
        self._seen.add(key)
        self._trace.records.append(record)

    @property
    def trace(self) -> Trace:
        return self._trace


def _pack_box(box: SliceBox) -> bytes:
    return b"".join(struct.pack("<QQ", a, b) for a, b in box.bounds)


def trace_to_bytes(trace: Trace) -> bytes:
    header_bytes = trace.raw_header
    if header_bytes is None:
        header_bytes = canonical_json(trace.header)
    parts = [MAGIC, struct.pack("<HHI", VERSION, 0, len(header_bytes)), header_bytes]
    for record in trace.records:
        id_bytes = record.id.encode().encode("utf-8")
        cls_bytes = record.module_class.encode("utf-8")
        parts.append(struct.pack("<BI", _RECORD_TYPE, len(id_bytes)))
        parts.append(id_bytes)
        parts.append(struct.pack("<6H", *record.rank_meta.as_tuple()))
        parts.append(struct.pack("<H", record.replica_group_size))
        parts.append(struct.pack("<I", len(cls_bytes)))
        parts.append(cls_bytes)
        shape = record.mapping.local_shape
        parts.append(struct.pack("<BB", _DTYPE_F32, len(shape)))
        parts.append(struct.pack(f"<{len(shape)}Q", *shape) if shape else b"")
        parts.append(struct.pack("<H", len(record.mapping.pairs)))
        for local, glob in record.mapping.pairs:
            parts.append(_pack_box(glob))
            parts.append(_pack_box(local))
        payload = record.payload.tobytes()
        if len(payload) != 4 * record.payload.size:
            raise TraindiffError("payload is not packed f32")
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
    parts.append(END_MAGIC)
    return b"".join(parts)


def write_trace(trace: Trace, path) -> None:
    with open(path, "wb") as handle:
        handle.write(trace_to_bytes(trace))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.data):
            raise FormatError("short read", offset=self.offset)
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset


def _read_box(reader: _Reader, ndim: int) -> SliceBox:
    bounds = []
    for _ in range(ndim):
        start, stop = reader.unpack("<QQ")
        if stop < start:
            raise FormatError(f"inverted interval [{start}, {stop})",
                              offset=reader.offset - 16)
        bounds.append((start, stop))
    return SliceBox(tuple(bounds))


def trace_from_bytes(data: bytes) -> Trace:
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise FormatError("bad magic", offset=0)
    version, _flags, header_len = reader.unpack("<HHI")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    raw_header = reader.take(header_len)
    try:
        header = json.loads(raw_header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON: {exc}", offset=12) from None
    trace = Trace(header=header, raw_header=raw_header)
    while True:
        if reader.remaining == len(END_MAGIC) and \
                reader.data[reader.offset:] == END_MAGIC:
            break
        record_offset = reader.offset
        (record_type,) = reader.unpack("<B")
        if record_type != _RECORD_TYPE:
            raise FormatError(f"unknown record type {record_type}", offset=record_offset)
        (id_len,) = reader.unpack("<I")
        id_text = reader.take(id_len).decode("utf-8")
        try:
            ident = parse_canonical(id_text)
        except ValueError as exc:
            raise FormatError(str(exc), offset=record_offset) from None
        meta = RankMeta(*reader.unpack("<6H"))
        (replica_size,) = reader.unpack("<H")
        (cls_len,) = reader.unpack("<I")
        module_class = reader.take(cls_len).decode("utf-8")
        dtype_tag, ndim = reader.unpack("<BB")
        if dtype_tag != _DTYPE_F32:
            raise FormatError(f"unknown dtype tag {dtype_tag}", offset=record_offset)
        dims = reader.unpack(f"<{ndim}Q") if ndim else ()
        (pair_count,) = reader.unpack("<H")
        if pair_count < 1:
            raise FormatError("record has no slice pairs", offset=record_offset)
        pairs = []
        for _ in range(pair_count):
            glob = _read_box(reader, ndim)
            local = _read_box(reader, ndim)
            if glob.extents != local.extents:
                raise FormatError("pair extents disagree", offset=record_offset)
            pairs.append((local, glob))
        global_shape = tuple(max(g.bounds[axis][1] for _, g in pairs)
                             for axis in range(ndim))
        mapping = ShardMapping(tuple(int(d) for d in dims), global_shape, tuple(pairs))
        (payload_len,) = reader.unpack("<Q")
        expected = 4 * int(np.prod(dims, dtype=np.int64)) if ndim else 4
        if payload_len != expected:
            raise FormatError(
                f"payload length {payload_len} != 4 * product(dims) = {expected}",
                offset=record_offset)
        payload = np.frombuffer(reader.take(payload_len), dtype="<f4").reshape(dims)
        trace.records.append(TraceRecord(
            id=ident, rank_meta=meta, mapping=mapping,
            replica_group_size=replica_size, payload=payload.copy(),
            module_class=module_class))
    return trace


def read_trace(path) -> Trace:
    with open(path, "rb") as handle:
        return trace_from_bytes(handle.read())
