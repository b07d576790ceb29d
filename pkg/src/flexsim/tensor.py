"""FlexTensor: an integer mantissa buffer bound to one shared exponent."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, NamedTuple

import numpy as np

from flexsim.errors import EmptyTensor, FormatError, ShapeMismatch
from flexsim.format import (
    FLEX16_5,
    ExponentState,
    FlexFormat,
    dequantize_tensor,
    quantize_tensor,
)

_ids = itertools.count()


class TensorUseKey(NamedTuple):
    """Identifies one consumer of a tensor; Autoflex keeps statistics per key."""

    tensor_id: Hashable
    use_id: Hashable

    def __str__(self):
        return f"{self.tensor_id}/{self.use_id}"


@dataclass(frozen=True, eq=False)
class FlexTensor:
    mantissas: np.ndarray
    state: ExponentState
    fmt: FlexFormat = FLEX16_5
    tensor_id: Hashable = field(default_factory=lambda: f"t{next(_ids)}")
    gamma: int | None = None

    def __post_init__(self):
        m = np.asarray(self.mantissas)
        if not np.issubdtype(m.dtype, np.integer):
            raise TypeError(f"mantissas must be integers, got {m.dtype}")
        if m.size and (m.min() < self.fmt.mantissa_min or m.max() > self.fmt.mantissa_max):
            raise ValueError(f"mantissas outside the {self.fmt} range")
        m = m.astype(self.fmt.mantissa_dtype, copy=False)
        m.flags.writeable = False
        object.__setattr__(self, "mantissas", m)
        if self.gamma is None and m.size:
            object.__setattr__(self, "gamma", _max_abs(m))

    @property
    def shape(self):
        return self.mantissas.shape

    @property
    def exponent(self) -> int:
        return self.state.exponent

    @property
    def kappa(self) -> float:
        return self.state.scale

    @property
    def overflowed(self) -> bool:
        return self.gamma is not None and self.gamma >= self.fmt.overflow_threshold

    def reshape(self, *shape) -> "FlexTensor":
        """Same buffer and exponent, new shape. Identity is preserved."""
        return FlexTensor(
            self.mantissas.reshape(*shape), self.state, self.fmt, self.tensor_id, self.gamma
        )

    def to_reals(self) -> np.ndarray:
        return to_reals(self)

    def __repr__(self):
        return (
            f"FlexTensor(id={self.tensor_id!r}, {self.fmt}, e={self.exponent}, "
            f"shape={self.shape}, gamma={self.gamma})"
        )


def _max_abs(m) -> int:
    # int64 first: abs(-2^(N-1)) does not fit in the storage dtype
    return int(np.max(np.abs(m.astype(np.int64))))


def from_reals(xs, shape=None, state=ExponentState(0), fmt=FLEX16_5, rm=None, tensor_id=None):
    """Quantize reals into a new tensor. Returns ``(tensor, gamma)``."""
    xs = np.asarray(xs, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(d) for d in np.atleast_1d(shape))
        if int(np.prod(shape)) != xs.size:
            raise ShapeMismatch(f"{xs.size} values do not fill shape {shape}")
        xs = xs.reshape(shape)
    if xs.size == 0:
        raise EmptyTensor("empty tensor")
    mant, gamma, _ = quantize_tensor(xs, state, fmt, rm)
    kwargs = {} if tensor_id is None else {"tensor_id": tensor_id}
    return FlexTensor(mant, state, fmt, gamma=gamma, **kwargs), gamma


def to_reals(t: FlexTensor) -> np.ndarray:
    return dequantize_tensor(t.mantissas, t.state)


def max_abs_mantissa(t: FlexTensor) -> int:
    """Γ recomputed from the buffer (ignores the cached value)."""
    if t.mantissas.size == 0:
        raise EmptyTensor("empty tensor")
    return _max_abs(t.mantissas)


# --------------------------------------------------------------------------
# text dump
# --------------------------------------------------------------------------

def dumps(t: FlexTensor) -> str:
    """Line-oriented record: format, exponent, shape, then one mantissa per line."""
    lines = [
        f"format,{t.fmt}",
        f"exponent,{t.exponent}",
        "shape," + " ".join(str(d) for d in t.shape),
        "mantissas",
    ]
    lines.extend(str(int(v)) for v in t.mantissas.ravel())
    return "\n".join(lines) + "\n"


def loads(text: str) -> FlexTensor:
    rows = [r.strip() for r in text.strip().splitlines()]
    try:
        head = dict(r.split(",", 1) for r in rows[:3])
        if rows[3] != "mantissas":
            raise ValueError("missing mantissas header")
        fmt = FlexFormat.parse(head["format"])
        shape = tuple(int(d) for d in head["shape"].split())
        values = np.array([int(r) for r in rows[4:]], dtype=np.int64)
        e = int(head["exponent"])
    except (IndexError, KeyError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise ValueError(f"malformed tensor dump: {exc}") from None
    if int(np.prod(shape)) != values.size:
        raise ShapeMismatch(f"{values.size} mantissas do not fill shape {shape}")
    return FlexTensor(values.reshape(shape), ExponentState(e), fmt)


def save(t: FlexTensor, path) -> None:
    Path(path).write_text(dumps(t))


def load(path) -> FlexTensor:
    return loads(Path(path).read_text())
