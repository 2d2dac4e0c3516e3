"""Deterministic input and weight generation.

Tensors are synthesized, never loaded: the canonical id string is hashed
with FNV-1a (64-bit) into a seed, the seed drives a splitmix64 stream, and
the stream feeds the requested distribution.  Any rank can therefore
materialize any tensor, or any slice of one, without talking to anyone,
and two runs agree on every input bit-for-bit by construction.

splitmix64 is counter-based (word k depends only on seed + (k+1)*gamma),
so bulk generation vectorizes exactly: the array path produces the same
words as stepping the scalar generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .canonical import CanonicalId, ShardMapping, validate_mapping
from .errors import MappingInvalid
from .tensor import Tensor

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_U53 = 2.0 ** -53


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def seed_from(ident: CanonicalId | str) -> int:
    """Seed for a tensor's private random stream."""
    text = ident.encode() if isinstance(ident, CanonicalId) else ident
    return fnv1a_64(text.encode("utf-8"))


class SplitMix64:
    """Scalar splitmix64, the reference semantics for the stream."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_word(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def next_uniform(self) -> float:
        """Uniform in [0, 1) from the top 53 bits."""
        return (self.next_word() >> 11) * _U53


def _words(seed: int, count: int) -> np.ndarray:
    """Words 0..count-1 of the stream, vectorized."""
    with np.errstate(over="ignore"):
        idx = np.arange(1, count + 1, dtype=np.uint64)
        state = np.uint64(seed & _MASK64) + idx * np.uint64(_GAMMA)
        z = (state ^ (state >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))


def _uniforms(seed: int, count: int) -> np.ndarray:
    return (_words(seed, count) >> np.uint64(11)).astype(np.float64) * _U53


def _nonzero_uniforms(seed: int, count: int) -> np.ndarray:
    """Uniforms with exact zeros dropped from the stream.

    A zero draw has probability 2**-53 per word; the vectorized fast path
    assumes none and this scalar walk is the correctness fallback.
    """
    gen = SplitMix64(seed)
    out = np.empty(count, dtype=np.float64)
    filled = 0
    while filled < count:
        u = gen.next_uniform()
        if u != 0.0:
            out[filled] = u
            filled += 1
    return out


def _normals(seed: int, count: int) -> np.ndarray:
    """Standard normals via Box-Muller on consecutive uniform pairs."""
    pairs = (count + 1) // 2
    u = _uniforms(seed, 2 * pairs)
    if np.any(u == 0.0):
        u = _nonzero_uniforms(seed, 2 * pairs)
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:count]


@dataclass(frozen=True)
class Normal:
    mean: float = 0.0
    std: float = 1.0


@dataclass(frozen=True)
class Uniform:
    low: float = 0.0
    high: float = 1.0


@dataclass(frozen=True)
class TokenIds:
    vocab: int


Distribution = Normal | Uniform | TokenIds


@dataclass(frozen=True)
class GenSpec:
    distribution: Distribution
    shape: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        if any(n <= 0 for n in self.shape):
            raise ValueError(f"non-positive dimension in shape {self.shape}")
        if isinstance(self.distribution, TokenIds) and self.distribution.vocab < 1:
            raise ValueError("token vocabulary must be positive")


def generate_full(ident: CanonicalId | str, spec: GenSpec) -> Tensor:
    """The full logical tensor for `ident` under `spec`, deterministically."""
    seed = seed_from(ident)
    n = math.prod(spec.shape)
    dist = spec.distribution
    if isinstance(dist, Normal):
        flat = _normals(seed, n) * dist.std + dist.mean
    elif isinstance(dist, Uniform):
        flat = dist.low + _uniforms(seed, n) * (dist.high - dist.low)
    elif isinstance(dist, TokenIds):
        flat = np.floor(_uniforms(seed, n) * dist.vocab)
        flat = np.minimum(flat, dist.vocab - 1)
    else:
        raise TypeError(f"unknown distribution {dist!r}")
    return Tensor(flat.reshape(spec.shape))


def signed_uniforms(tag: str, shape: tuple[int, ...]) -> np.ndarray:
    """Uniforms in [-1, 1] keyed by an arbitrary tag string."""
    n = math.prod(shape)
    u = _uniforms(seed_from(tag), n)
    return (2.0 * u - 1.0).reshape(shape)


def extract_shard(full: Tensor, mapping: ShardMapping) -> Tensor:
    """The shard a rank holding `mapping` would see of `full`.

    The mapping's local boxes must tile the local shape completely: a
    shard payload with undefined elements is meaningless.
    """
    validate_mapping(mapping)
    if full.shape != mapping.global_shape:
        raise MappingInvalid(
            f"full tensor shape {full.shape} != mapping global shape {mapping.global_shape}")
    covered = sum(local.volume for local, _ in mapping.pairs)
    if covered != math.prod(mapping.local_shape):
        raise MappingInvalid("local boxes do not cover the local shape")
    out = np.zeros(mapping.local_shape, dtype=np.float64)
    for local, glob in mapping.pairs:
        out[local.as_slices()] = full.data[glob.as_slices()]
    return Tensor(out)
