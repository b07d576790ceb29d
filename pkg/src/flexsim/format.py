"""The flexN+M number format: bit widths, shared exponents, quantization.

A flex tensor stores N-bit two's-complement integer mantissas and one shared
exponent ``e``; the real value of an element is ``mantissa * kappa`` with
``kappa = 2**-e``.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field

import numpy as np

from flexsim import _loops
from flexsim.errors import EmptyTensor, ExponentOutOfRange, FormatError

_FORMAT_RE = re.compile(r"^\s*flex(\d+)\+(\d+)\s*$", re.IGNORECASE)


@dataclass(frozen=True)
class FlexFormat:
    """Bit allocation of a ``flexN+M`` tensor.

    ``mantissa_bits`` counts the sign bit. ``exponent_bits`` only bounds the
    exponent window; the exponent itself is kept as a plain int.
    """

    mantissa_bits: int = 16
    exponent_bits: int = 5

    def __post_init__(self):
        if not 2 <= self.mantissa_bits <= 32:
            raise FormatError(f"mantissa bits must be in [2, 32], got {self.mantissa_bits}")
        if not 1 <= self.exponent_bits <= 8:
            raise FormatError(f"exponent bits must be in [1, 8], got {self.exponent_bits}")

    @classmethod
    def parse(cls, text: str) -> "FlexFormat":
        """Parse ``flexN+M`` (case-insensitive)."""
        m = _FORMAT_RE.match(text)
        if m is None:
            raise FormatError(f"not a flexN+M format string: {text!r}")
        return cls(int(m.group(1)), int(m.group(2)))

    def __str__(self):
        return f"flex{self.mantissa_bits}+{self.exponent_bits}"

    @property
    def mantissa_min(self) -> int:
        return -(1 << (self.mantissa_bits - 1))

    @property
    def mantissa_max(self) -> int:
        return (1 << (self.mantissa_bits - 1)) - 1

    @property
    def overflow_threshold(self) -> int:
        """Γ at or above this value counts as an overflow (2^(N-1) - 1)."""
        return self.mantissa_max

    @property
    def exponent_min(self) -> int:
        """Lowest exponent (coarsest scale).

        The 2^M exponents are offset toward fine scales by a quarter of the
        window: flex16+5 covers e in [-8, 23], i.e. kappa from 2^8 down to
        2^-23, which spans both large activations and small gradient tensors.
        """
        return -((1 << self.exponent_bits) // 4)

    @property
    def exponent_max(self) -> int:
        return self.exponent_min + (1 << self.exponent_bits) - 1

    def exponent_in_window(self, e: int) -> bool:
        return self.exponent_min <= e <= self.exponent_max

    def clamp_exponent(self, e: int) -> int:
        return min(max(e, self.exponent_min), self.exponent_max)

    @property
    def mantissa_dtype(self):
        """Narrowest numpy integer type that holds an N-bit two's-complement value."""
        for dt in (np.int8, np.int16, np.int32):
            if self.mantissa_bits <= np.iinfo(dt).bits:
                return dt
        return np.int64  # pragma: no cover - N <= 32 always fits int32


FLEX16_5 = FlexFormat(16, 5)


@dataclass(frozen=True)
class ExponentState:
    """A shared exponent and its scale; ``scale == 2**-exponent`` always."""

    exponent: int
    scale: float = field(default=None)

    def __post_init__(self):
        e = int(self.exponent)
        object.__setattr__(self, "exponent", e)
        kappa = math.ldexp(1.0, -e)
        if self.scale is None:
            object.__setattr__(self, "scale", kappa)
        elif self.scale != kappa:
            raise ValueError(f"scale {self.scale!r} is not 2**-{e}")

    @property
    def kappa(self) -> float:
        return self.scale

    @classmethod
    def from_scale(cls, kappa: float) -> "ExponentState":
        m, ex = math.frexp(kappa)
        if m != 0.5:
            raise ValueError(f"scale must be a power of two, got {kappa!r}")
        return cls(-(ex - 1))


class RoundingMode(enum.Enum):
    NEAREST_EVEN = _loops.NEAREST_EVEN
    TRUNCATE = _loops.TRUNCATE
    STOCHASTIC = _loops.STOCHASTIC


@dataclass(frozen=True)
class Rounding:
    """A rounding mode plus the seed used when the mode is stochastic."""

    mode: RoundingMode = RoundingMode.NEAREST_EVEN
    seed: int | None = None

    def uniforms(self, n):
        if self.mode is not RoundingMode.STOCHASTIC:
            return None
        return np.random.default_rng(self.seed).random(n)


NEAREST = Rounding()


def _as_rounding(rm) -> Rounding:
    if rm is None:
        return NEAREST
    if isinstance(rm, RoundingMode):
        return Rounding(rm)
    return rm


def scale_from_exponent(e: int, fmt: FlexFormat = FLEX16_5) -> ExponentState:
    if not fmt.exponent_in_window(e):
        raise ExponentOutOfRange(
            f"exponent {e} outside [{fmt.exponent_min}, {fmt.exponent_max}] for {fmt}"
        )
    return ExponentState(e)


def quantize_value(x: float, state: ExponentState, fmt: FlexFormat = FLEX16_5, rm=None):
    """Quantize one real; returns ``(mantissa, overflowed)``."""
    mant, _, over = quantize_tensor(np.array([x], dtype=np.float64), state, fmt, rm)
    return int(mant[0]), over


def quantize_tensor(xs, state: ExponentState, fmt: FlexFormat = FLEX16_5, rm=None):
    """Quantize an array at a fixed scale.

    Mantissas are ``round(x / kappa)`` saturated to ``±(2^(N-1) - 1)``. Returns
    ``(mantissas, gamma, overflowed)`` where ``gamma`` is the largest absolute
    mantissa after saturation and ``overflowed`` is true iff some element
    reached the threshold.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size == 0:
        raise EmptyTensor("cannot quantize an empty tensor")
    rounding = _as_rounding(rm)
    mant, gamma, over = _loops.quantize(
        xs,
        math.ldexp(1.0, state.exponent),
        float(fmt.overflow_threshold),
        rounding.mode.value,
        rounding.uniforms(xs.size),
    )
    return mant.astype(fmt.mantissa_dtype).reshape(xs.shape), gamma, over


def dequantize_tensor(mantissas, state: ExponentState):
    return np.asarray(mantissas, dtype=np.float64) * state.scale


def representable_range(state: ExponentState, fmt: FlexFormat = FLEX16_5):
    """``(min_real, max_real, epsilon)`` for a tensor at ``state``."""
    return fmt.mantissa_min * state.scale, fmt.mantissa_max * state.scale, state.scale


def ceil_log2(x: float) -> int:
    """Exact ``ceil(log2(x))`` for x > 0, via the binary exponent rather than ``math.log2``."""
    if not x > 0:
        raise ValueError(f"ceil_log2 needs a positive argument, got {x!r}")
    if math.isinf(x):
        raise OverflowError("ceil_log2 of infinity")
    m, e = math.frexp(x)
    return e - 1 if m == 0.5 else e


def ceil_log2_int(n: int) -> int:
    """``ceil(log2(n))`` for a positive integer."""
    return (int(n) - 1).bit_length()
