"""Canonical tensor identity and shard geometry.

A traced tensor is named by where it sits in the *logical* single-device
computation: iteration, microbatch, kind, and canonical module name.  Two
runs with different parallel layouts produce different shards but the same
canonical ids, which is what makes their traces comparable.

Shard geometry is expressed as axis-aligned boxes with half-open per-axis
intervals.  A `ShardMapping` carries pairs of (local box, global box): the
local box addresses the shard's own payload, the global box the region it
occupies in the full tensor.  `merge` reassembles full tensors from shards
and refuses overlaps and gaps with a concrete witness index.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MappingInvalid, MergeConflict, ReplicaMismatch, ShapeMismatch
from .tensor import FloatFormat, Tensor, rel_err_arrays


class TensorKind(enum.Enum):
    ACTIVATION_IN = "ActivationIn"
    ACTIVATION_OUT = "ActivationOut"
    ACTIVATION_GRAD_IN = "ActivationGradIn"
    ACTIVATION_GRAD_OUT = "ActivationGradOut"
    PARAM_GRAD = "ParamGrad"
    MAIN_GRAD = "MainGrad"
    PARAM = "Param"


_KIND_BY_NAME = {k.value: k for k in TensorKind}


@dataclass(frozen=True, order=True)
class CanonicalId:
    """Identity of a logical tensor, independent of sharding."""

    iteration: int
    microbatch: int
    kind: TensorKind
    module_name: str

    def encode(self) -> str:
        return (f"iter={self.iteration}|mb={self.microbatch}"
                f"|kind={self.kind.value}|mod={self.module_name}")


def parse_canonical(text: str) -> CanonicalId:
    """Inverse of `CanonicalId.encode`."""
    parts = text.split("|", 3)
    if len(parts) != 4:
        raise ValueError(f"not a canonical id: {text!r}")
    values = []
    for part, key in zip(parts, ("iter", "mb", "kind", "mod")):
        prefix = key + "="
        if not part.startswith(prefix):
            raise ValueError(f"bad field {part!r} in canonical id {text!r}")
        values.append(part[len(prefix):])
    kind = _KIND_BY_NAME.get(values[2])
    if kind is None:
        raise ValueError(f"unknown tensor kind {values[2]!r}")
    return CanonicalId(int(values[0]), int(values[1]), kind, values[3])


def canonical_layer_index(p: int, v: int, local: int, pp: int, vp: int,
                          layers_per_chunk: int) -> int:
    """Global layer index of local layer `local` in virtual chunk `v` on
    pipeline stage `p`, with interleaved virtual stages.

    Chunks are dealt round-robin over stages: chunk number ``v*pp + p``
    holds `layers_per_chunk` consecutive layers.
    """
    if not (0 <= p < pp and 0 <= v < vp and 0 <= local < layers_per_chunk):
        raise ValueError("layer coordinates out of range")
    return (v * pp + p) * layers_per_chunk + local


def locate_layer(g: int, pp: int, vp: int, layers_per_chunk: int) -> tuple[int, int, int]:
    """Inverse of `canonical_layer_index`: (stage, virtual chunk, local)."""
    if not 0 <= g < pp * vp * layers_per_chunk:
        raise ValueError("global layer index out of range")
    chunk, local = divmod(g, layers_per_chunk)
    v, p = divmod(chunk, pp)
    return p, v, local


@dataclass(frozen=True)
class SliceBox:
    """Axis-aligned box: per-axis half-open intervals [start, stop)."""

    bounds: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple((int(a), int(b)) for a, b in self.bounds))
        for a, b in self.bounds:
            if a < 0 or b < a:
                raise MappingInvalid(f"degenerate interval [{a}, {b})")

    @property
    def ndim(self) -> int:
        return len(self.bounds)

    @property
    def extents(self) -> tuple[int, ...]:
        return tuple(b - a for a, b in self.bounds)

    @property
    def volume(self) -> int:
        return math.prod(self.extents)

    def as_slices(self) -> tuple[slice, ...]:
        return tuple(slice(a, b) for a, b in self.bounds)

    def fits_within(self, shape: tuple[int, ...]) -> bool:
        return (self.ndim == len(shape)
                and all(b <= n for (_, b), n in zip(self.bounds, shape)))


def whole_box(shape: tuple[int, ...]) -> SliceBox:
    return SliceBox(tuple((0, n) for n in shape))


@dataclass(frozen=True)
class ShardMapping:
    """How one rank's shard tiles into the full tensor."""

    local_shape: tuple[int, ...]
    global_shape: tuple[int, ...]
    pairs: tuple[tuple[SliceBox, SliceBox], ...]

    def __post_init__(self):
        object.__setattr__(self, "local_shape", tuple(int(n) for n in self.local_shape))
        object.__setattr__(self, "global_shape", tuple(int(n) for n in self.global_shape))
        object.__setattr__(self, "pairs", tuple(self.pairs))

    def signature(self) -> tuple:
        """Hashable identity; ranks holding the same shard share one."""
        return (self.local_shape, self.global_shape,
                tuple((l.bounds, g.bounds) for l, g in self.pairs))


def identity_mapping(shape: tuple[int, ...]) -> ShardMapping:
    box = whole_box(shape)
    return ShardMapping(tuple(shape), tuple(shape), ((box, box),))


def validate_mapping(mapping: ShardMapping) -> None:
    """Check structural consistency of a mapping.

    Each pair's local and global boxes must have identical extents, the
    local boxes must lie within the local shape and the global boxes within
    the global shape.  Coverage (gaps/overlaps between multiple shards) is
    merge's job, but a single mapping's local boxes must not overlap each
    other: every payload element belongs to at most one destination.
    """
    if not mapping.pairs:
        raise MappingInvalid("mapping has no slice pairs")
    for local, glob in mapping.pairs:
        if local.ndim != len(mapping.local_shape) or glob.ndim != len(mapping.global_shape):
            raise MappingInvalid("box rank differs from shape rank")
        if local.extents != glob.extents:
            raise MappingInvalid(
                f"extent mismatch: local {local.extents} vs global {glob.extents}")
        if not local.fits_within(mapping.local_shape):
            raise MappingInvalid(f"local box {local.bounds} exceeds {mapping.local_shape}")
        if not glob.fits_within(mapping.global_shape):
            raise MappingInvalid(f"global box {glob.bounds} exceeds {mapping.global_shape}")
    counts = np.zeros(mapping.local_shape, dtype=np.int32)
    for local, _ in mapping.pairs:
        counts[local.as_slices()] += 1
    if (counts > 1).any():
        where = np.argwhere(counts > 1)[0]
        raise MappingInvalid(f"local boxes overlap at {tuple(int(i) for i in where)}")


def merge(shards: list[tuple[ShardMapping, Tensor]],
          global_shape: tuple[int, ...]) -> Tensor:
    """Reassemble a full tensor from shards.

    Every global element must be written exactly once; the first (in
    row-major order) multiply-written or never-written index is reported as
    the conflict witness.
    """
    global_shape = tuple(int(n) for n in global_shape)
    out = np.zeros(global_shape, dtype=np.float64)
    counts = np.zeros(global_shape, dtype=np.int32)
    for mapping, shard in shards:
        validate_mapping(mapping)
        if mapping.global_shape != global_shape:
            raise MappingInvalid(
                f"mapping global shape {mapping.global_shape} != merge target {global_shape}")
        data = shard.data if isinstance(shard, Tensor) else np.asarray(shard, dtype=np.float64)
        if data.shape != mapping.local_shape:
            raise ShapeMismatch(
                f"shard shape {data.shape} != mapping local shape {mapping.local_shape}")
        for local, glob in mapping.pairs:
            out[glob.as_slices()] = data[local.as_slices()]
            counts[glob.as_slices()] += 1
    if (counts != 1).any():
        over = np.argwhere(counts > 1)
        if len(over):
            w = tuple(int(i) for i in over[0])
            raise MergeConflict(f"shards overlap at global index {w}", witness=w)
        w = tuple(int(i) for i in np.argwhere(counts == 0)[0])
        raise MergeConflict(f"no shard covers global index {w}", witness=w)
    return Tensor(out)


@dataclass(frozen=True)
class ReplicaGroup:
    """Ranks expected to hold bit-equivalent copies of one tensor."""

    ranks: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))


def check_replicas(copies: list[Tensor], group: ReplicaGroup,
                   fmt: FloatFormat) -> None:
    """Raise `ReplicaMismatch` unless all copies agree with copy 0 to
    within the format's unit roundoff (exactly zero tolerance would be the
    ideal; the eps allowance absorbs benign re-rounding of stored values).
    """
    if len(copies) != len(group.ranks):
        raise ShapeMismatch(
            f"{len(copies)} copies for a group of {len(group.ranks)} ranks")
    if len(copies) <= 1:
        return
    base = copies[0].data
    worst = 0.0
    worst_rank = None
    for rank, copy in zip(group.ranks[1:], copies[1:]):
        err = rel_err_arrays(base, copy.data)
        if err > worst:
            worst, worst_rank = err, rank
    if worst > fmt.eps:
        raise ReplicaMismatch(
            f"replicas diverge: rel_err {worst:.6g} between ranks "
            f"{group.ranks[0]} and {worst_rank}",
            max_rel_err=worst, witness=(group.ranks[0], worst_rank))
