"""Simulated flex kernels.

Every kernel dequantizes its inputs, computes in float64, and requantizes the
result at the output slot's current scale, reporting Γ. The output scale is
whatever the slot holds when the kernel starts; kernels never adjust it.

Inputs may be FlexTensors or plain float arrays. In ``REFERENCE_REAL`` mode
the result is returned as a float array and no quantization happens, which is
how the full-precision arm of an experiment runs the same model code.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from flexsim import _loops
from flexsim.autoflex import StatsSlot
from flexsim.errors import ExponentMismatch, ShapeMismatch, UninitializedSlot
from flexsim.format import quantize_tensor
from flexsim.tensor import FlexTensor


class KernelMode(enum.Enum):
    WRITE_AND_STATS = "write"
    STATS_ONLY = "stats"
    REFERENCE_REAL = "reference"


@dataclass(frozen=True)
class KernelOutput:
    gamma: int
    overflowed: bool
    wrote_output: bool


def real(t) -> np.ndarray:
    """Float64 view of a kernel operand."""
    if isinstance(t, FlexTensor):
        return t.to_reals()
    return np.asarray(t, dtype=np.float64)


def shape_of(t):
    return t.shape if isinstance(t, FlexTensor) else np.shape(t)


def emit(result, out_slot: StatsSlot | None, mode: KernelMode, dest=None, rm=None):
    """Requantize a float64 result according to ``mode``.

    ``dest`` is what a stats-only call hands back untouched (the previous
    contents of the output buffer, if the caller has one).
    """
    if mode is KernelMode.REFERENCE_REAL:
        return result, KernelOutput(0, False, True)
    if mode is KernelMode.WRITE_AND_STATS and not out_slot.initialized:
        raise UninitializedSlot(f"write to uninitialized slot {out_slot.key}")
    mant, gamma, over = quantize_tensor(result, out_slot.state, out_slot.fmt, rm)
    if mode is KernelMode.STATS_ONLY:
        return dest, KernelOutput(gamma, over, False)
    kwargs = {} if out_slot.key is None else {"tensor_id": out_slot.key.tensor_id}
    out = FlexTensor(mant, out_slot.state, out_slot.fmt, gamma=gamma, **kwargs)
    return out, KernelOutput(gamma, over, True)


def matmul(a, b, out_slot, mode=KernelMode.WRITE_AND_STATS, *, bias=None, dest=None):
    """``a @ b`` (+ ``bias`` broadcast over rows)."""
    sa, sb = shape_of(a), shape_of(b)
    if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[0]:
        raise ShapeMismatch(f"matmul {sa} x {sb}")
    y = real(a) @ real(b)
    if bias is not None:
        if shape_of(bias) != (sb[1],):
            raise ShapeMismatch(f"bias {shape_of(bias)} for output width {sb[1]}")
        y = y + real(bias)
    return emit(y, out_slot, mode, dest)


def _check_conv(sx, sw, stride, padding):
    if len(sx) != 4 or len(sw) != 4 or sx[1] != sw[1]:
        raise ShapeMismatch(f"conv2d input {sx} with kernel {sw}")
    if stride < 1 or padding < 0:
        raise ShapeMismatch("stride must be >= 1 and padding >= 0")
    oh, ow = _loops.conv_out_hw(sx[2], sx[3], sw[2], sw[3], stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeMismatch(f"kernel {sw[2:]} larger than padded input {sx[2:]}")


def conv2d(x, w, out_slot, mode=KernelMode.WRITE_AND_STATS, stride=1, padding=0, *,
           bias=None, dest=None):
    """Direct cross-correlation, NCHW input and OIHW kernel."""
    sx, sw = shape_of(x), shape_of(w)
    _check_conv(sx, sw, stride, padding)
    y = _loops.conv2d(real(x), real(w), stride, padding)
    if bias is not None:
        if shape_of(bias) != (sw[0],):
            raise ShapeMismatch(f"bias {shape_of(bias)} for {sw[0]} output channels")
        y += real(bias)[None, :, None, None]
    return emit(y, out_slot, mode, dest)


def conv2d_grad_input(dy, w, x_shape, out_slot, mode=KernelMode.WRITE_AND_STATS,
                      stride=1, padding=0, *, dest=None):
    _check_conv(tuple(x_shape), shape_of(w), stride, padding)
    dx = _loops.conv2d_grad_input(real(dy), real(w), tuple(x_shape), stride, padding)
    return emit(dx, out_slot, mode, dest)


def conv2d_grad_weight(x, dy, w_shape, out_slot, mode=KernelMode.WRITE_AND_STATS,
                       stride=1, padding=0, *, dest=None):
    _check_conv(shape_of(x), tuple(w_shape), stride, padding)
    dw = _loops.conv2d_grad_weight(real(x), real(dy), tuple(w_shape), stride, padding)
    return emit(dw, out_slot, mode, dest)


def maxpool(x, k, out_slot, mode=KernelMode.WRITE_AND_STATS, *, dest=None):
    """Non-overlapping k x k max pooling. Returns ``(out, KernelOutput, argmax)``."""
    sx = shape_of(x)
    if len(sx) != 4 or sx[2] < k or sx[3] < k:
        raise ShapeMismatch(f"maxpool({k}) on {sx}")
    y, arg = _loops.maxpool(real(x), k)
    out, ko = emit(y, out_slot, mode, dest)
    return out, ko, arg


def maxpool_grad(dy, arg, k, x_shape, out_slot, mode=KernelMode.WRITE_AND_STATS, *, dest=None):
    dx = _loops.maxpool_grad(real(dy), arg, k, tuple(x_shape))
    return emit(dx, out_slot, mode, dest)


_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(op, inputs, out_slot, mode=KernelMode.WRITE_AND_STATS, *, const=None, dest=None):
    """``add``/``sub``/``mul`` of two operands, ``relu`` or ``scale_by_const`` of one.

    ``add`` also accepts a bias whose shape broadcasts into the first operand.
    """
    if op in _BINARY:
        a, b = inputs
        sa, sb = tuple(shape_of(a)), tuple(shape_of(b))
        if sa != sb:
            ok = op == "add"
            try:
                ok = ok and np.broadcast_shapes(sa, sb) == sa
            except ValueError:
                ok = False
            if not ok:
                raise ShapeMismatch(f"{op} of {sa} and {sb}")
        y = _BINARY[op](real(a), real(b))
    elif op == "relu":
        (a,) = inputs
        y = np.maximum(real(a), 0.0)
    elif op == "scale_by_const":
        (a,) = inputs
        if const is None:
            raise ValueError("scale_by_const needs const")
        y = real(a) * float(const)
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return emit(y, out_slot, mode, dest)


def sum_reduce(x, axes, out_slot, mode=KernelMode.WRITE_AND_STATS, *, dest=None):
    """Sum over ``axes`` (bias gradients)."""
    return emit(real(x).sum(axis=tuple(axes)), out_slot, mode, dest)


def requantize(values, out_slot, mode=KernelMode.WRITE_AND_STATS, *, dest=None):
    """Bring a float result computed outside the kernel set (e.g. the loss gradient) into a slot."""
    return emit(np.asarray(values, dtype=np.float64), out_slot, mode, dest)


def sgd_update(w, dw, lr, out_slot, mode=KernelMode.WRITE_AND_STATS, *, dest=None):
    """``w - lr * dw`` requantized at the weight slot's scale.

    Per-element steps smaller than half the weight quantum round back to the
    old mantissa (swamping); that loss is real and not compensated.
    """
    if tuple(shape_of(w)) != tuple(shape_of(dw)):
        raise ShapeMismatch(f"sgd_update {shape_of(w)} vs {shape_of(dw)}")
    return emit(real(w) - float(lr) * real(dw), out_slot, mode, dest)


def fixed_point_mul_check(a: FlexTensor, b: FlexTensor, e_out: int) -> np.ndarray:
    """Elementwise product done purely on integer mantissas.

    With ``e_out = e_a + e_b`` the product of mantissas, read at ``2**-e_out``,
    is the exact real product, so no rounding happens. Returns int64 mantissas
    (the wide intermediate, not narrowed to N bits).
    """
    if e_out != a.exponent + b.exponent:
        raise ExponentMismatch(f"e_out {e_out} != {a.exponent} + {b.exponent}")
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return a.mantissas.astype(np.int64) * b.mantissas.astype(np.int64)
