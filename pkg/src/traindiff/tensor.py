"""Dense float64 tensors plus reduced-precision emulation.

All values are carried in float64 ("working precision").  Storage in a
narrower float format is emulated by `quantize`, which rounds the
significand to the format's precision while keeping an unbounded exponent
below the overflow threshold.  That keeps the relative-error bound
``|q(x) - x| <= eps * |x|`` valid everywhere (no subnormal range) and makes
the emulation independent of the host's native float16/bfloat16 support.

Matrix products go through `np.einsum` with optimization disabled: unlike
the BLAS-backed ``@`` operator, einsum's accumulation order for a given
contraction shape does not change when one operand is a column or row
slice of a larger matrix.  Partition-invariance of the matmul is what lets
sharded linear layers reproduce the unsharded result bit-for-bit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import partial

import numpy as np

from .errors import NonFinite, ShapeMismatch


class FloatFormat(enum.Enum):
    """Floating-point storage formats the emulator understands."""

    FP32 = "FP32"
    BF16 = "BF16"
    FP8E4M3 = "FP8E4M3"

    @property
    def precision(self) -> int:
        """Significand bits, counting the implicit leading bit."""
        return _PRECISION[self]

    @property
    def eps(self) -> float:
        """Unit roundoff: half an ulp at unit scale, ``2**-precision``."""
        return 2.0 ** -_PRECISION[self]

    @property
    def max_finite(self) -> float:
        return _MAX_FINITE[self]


_PRECISION = {
    FloatFormat.FP32: 24,
    FloatFormat.BF16: 8,
    FloatFormat.FP8E4M3: 4,
}

# Largest representable magnitudes of the real formats.
_MAX_FINITE = {
    FloatFormat.FP32: float(np.finfo(np.float32).max),
    FloatFormat.BF16: 1.9921875 * 2.0 ** 127,
    FloatFormat.FP8E4M3: 448.0,
}


def quantize_array(x: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    """Round `x` to `fmt`'s significand precision, ties to even.

    Magnitudes beyond the format's overflow threshold clamp to the largest
    finite value (saturating cast, as training frameworks do for bf16/fp8).
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise NonFinite("quantize input contains NaN or infinity")
    p = fmt.precision
    m, e = np.frexp(x)
    r = np.rint(np.ldexp(m, p))
    y = np.ldexp(r, e - p)
    return np.clip(y, -fmt.max_finite, fmt.max_finite)


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-d matrix product with a partition-stable accumulation order."""
    return np.einsum("ij,jk->ik", a, b, optimize=False)


@dataclass(frozen=True)
class Tensor:
    """A shaped float64 value.  Thin wrapper to keep the public surface
    explicit; internal modules work on ndarrays directly."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data, dtype=np.float64))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @classmethod
    def zeros(cls, shape: tuple[int, ...]) -> "Tensor":
        return cls(np.zeros(shape, dtype=np.float64))

    @classmethod
    def full(cls, shape: tuple[int, ...], value: float) -> "Tensor":
        return cls(np.full(shape, value, dtype=np.float64))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    return Tensor(a.data + b.data)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"sub: {a.shape} vs {b.shape}")
    return Tensor(a.data - b.data)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")
    return Tensor(a.data * b.data)


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor(a.data * float(c))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    return Tensor(_mm(a.data, b.data))


def transpose(a: Tensor) -> Tensor:
    return Tensor(a.data.T.copy())


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return Tensor(a.data.reshape(shape).copy())


def frobenius_norm(a: Tensor) -> float:
    return float(np.sqrt(np.sum(np.square(a.data, dtype=np.float64))))


def rel_err(a: Tensor, b: Tensor) -> float:
    """``||A - B||_F / ||A||_F`` with `a` as the reference.

    Both norms zero is a perfect match (0.0); a zero reference against a
    nonzero candidate has no meaningful relative scale and returns +inf so
    any finite threshold flags it.
    """
    return rel_err_arrays(a.data, b.data)


def rel_err_arrays(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"rel_err: {a.shape} vs {b.shape}")
    diff = float(np.sqrt(np.sum(np.square(a - b))))
    ref = float(np.sqrt(np.sum(np.square(a))))
    if ref == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return diff / ref


def quantize(a: Tensor, fmt: FloatFormat) -> Tensor:
    return Tensor(quantize_array(a.data, fmt))


@dataclass(frozen=True)
class PrecisionPolicy:
    """Which formats a simulated run stores values and feeds matmuls in."""

    name: str
    storage: FloatFormat
    matmul_inputs: FloatFormat


POLICIES = {
    "fp32": PrecisionPolicy("fp32", FloatFormat.FP32, FloatFormat.FP32),
    "bf16": PrecisionPolicy("bf16", FloatFormat.BF16, FloatFormat.BF16),
    "bf16-fp8": PrecisionPolicy("bf16-fp8", FloatFormat.BF16, FloatFormat.FP8E4M3),
}


def _identity(x: np.ndarray) -> np.ndarray:
    return x


class PolicyOps:
    """Arithmetic primitives with the policy's rounding applied.

    Every primitive rounds its output to the storage format; matmul
    additionally rounds both inputs to the matmul-input format first.  The
    fp32 policy is the identity: working precision is already float64, so
    no per-op rounding is emulated and runs under it are exact up to
    float64 itself.
    """

    def __init__(self, policy: PrecisionPolicy):
        self.policy = policy
        if policy.storage is FloatFormat.FP32:
            self._qs = _identity
        else:
            self._qs = partial(quantize_array, fmt=policy.storage)
        if policy.matmul_inputs is FloatFormat.FP32:
            self._qm = _identity
        else:
            self._qm = partial(quantize_array, fmt=policy.matmul_inputs)

    def q(self, x: np.ndarray) -> np.ndarray:
        return self._qs(x)

    def add(self, a, b) -> np.ndarray:
        return self._qs(np.add(a, b))

    def sub(self, a, b) -> np.ndarray:
        return self._qs(np.subtract(a, b))

    def mul(self, a, b) -> np.ndarray:
        return self._qs(np.multiply(a, b))

    def div(self, a, b) -> np.ndarray:
        return self._qs(np.divide(a, b))

    def scale(self, a, c: float) -> np.ndarray:
        return self._qs(np.multiply(a, float(c)))

    def mm(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return self._qs(_mm(self._qm(a), self._qm(b)))

    def exp(self, a) -> np.ndarray:
        return self._qs(np.exp(a))

    def log(self, a) -> np.ndarray:
        return self._qs(np.log(a))

    def tanh(self, a) -> np.ndarray:
        return self._qs(np.tanh(a))

    def sqrt(self, a) -> np.ndarray:
        return self._qs(np.sqrt(a))

    def sum(self, a, axis=None, keepdims=False) -> np.ndarray:
        return self._qs(np.sum(a, axis=axis, keepdims=keepdims))

    def mean(self, a, axis=None, keepdims=False) -> np.ndarray:
        return self._qs(np.mean(a, axis=axis, keepdims=keepdims))
