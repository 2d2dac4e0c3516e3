"""Standalone writer for the traindiff trace file format.

This speaks the binary format directly rather than importing the checker
package: the file format is the integration contract, and keeping the
writer independent means a hook build can ship without the analysis
toolchain installed.

Layout (little-endian, sequential):

    "TTRC" | u16 version=1 | u16 flags=0 | u32 len | header JSON
    per record:
        u8 type=1 | u32 len | canonical id string
        u16 dp, tp, pp, vp, cp, sp | u16 replica_group_size
        u32 len | module class string
        u8 dtype=0 (f32) | u8 ndim | ndim x u64 dims
        u16 pair count | per pair: global box then local box,
            each box ndim x (u64 start, u64 stop)
        u64 payload byte length | payload (f32, row-major)
    "CRTT"

Everything this module emits is an unsharded single-process capture, so
each record carries the identity mapping (one pair covering the whole
tensor), rank coordinates all zero, and replica group size 1.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import WriteError

MAGIC = b"TTRC"
END_MAGIC = b"CRTT"
VERSION = 1
_RECORD_TYPE = 1
_DTYPE_F32 = 0


def canonical_json(obj) -> bytes:
    """Deterministic JSON bytes: sorted keys, no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_id(iteration: int, microbatch: int, kind: str, module: str) -> str:
    return f"iter={iteration}|mb={microbatch}|kind={kind}|mod={module}"


@dataclass(frozen=True)
class FlatRecord:
    """One captured tensor, already detached from the framework."""

    ident: str
    payload: np.ndarray  # float32, contiguous
    module_class: str

    def __post_init__(self):
        object.__setattr__(self, "payload",
                           np.ascontiguousarray(self.payload, dtype=np.float32))


def _whole_box(shape: tuple[int, ...]) -> bytes:
    return b"".join(struct.pack("<QQ", 0, n) for n in shape)


def _pack_record(record: FlatRecord) -> bytes:
    id_bytes = record.ident.encode("utf-8")
    cls_bytes = record.module_class.encode("utf-8")
    shape = record.payload.shape
    box = _whole_box(shape)
    payload = record.payload.tobytes()
    return b"".join([
        struct.pack("<BI", _RECORD_TYPE, len(id_bytes)), id_bytes,
        struct.pack("<6H", 0, 0, 0, 0, 0, 0),   # rank coordinates
        struct.pack("<H", 1),                   # replica group size
        struct.pack("<I", len(cls_bytes)), cls_bytes,
        struct.pack("<BB", _DTYPE_F32, len(shape)),
        struct.pack(f"<{len(shape)}Q", *shape) if shape else b"",
        struct.pack("<H", 1), box, box,         # identity mapping
        struct.pack("<Q", len(payload)), payload,
    ])


def serialize(header: dict, records: list[FlatRecord]) -> bytes:
    try:
        header_bytes = canonical_json(header)
    except (TypeError, ValueError) as exc:
        raise WriteError(f"header is not JSON-serializable: {exc}") from None
    parts = [MAGIC, struct.pack("<HHI", VERSION, 0, len(header_bytes)),
             header_bytes]
    parts.extend(_pack_record(record) for record in records)
    parts.append(END_MAGIC)
    return b"".join(parts)


def write(header: dict, records: list[FlatRecord], path) -> None:
    data = serialize(header, records)
    try:
        with open(path, "wb") as handle:
            handle.write(data)
    except OSError as exc:
        raise WriteError(f"cannot write trace to {path}: {exc}") from None
