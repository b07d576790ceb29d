"""Flexpoint (flexN+M) tensors, Autoflex exponent management and simulated kernels."""

from flexsim.autoflex import (
    AutoflexConfig,
    StatsSlot,
    adjust_scale,
    init_step,
    initialize_slot,
    predict_chi,
    replay_stream,
    reset_stats,
)
from flexsim.format import (
    FLEX16_5,
    ExponentState,
    FlexFormat,
    Rounding,
    RoundingMode,
    dequantize_tensor,
    quantize_tensor,
    quantize_value,
    representable_range,
    scale_from_exponent,
)
from flexsim.kernels import KernelMode, KernelOutput
from flexsim.tensor import FlexTensor, TensorUseKey, from_reals, max_abs_mantissa, to_reals

__version__ = "0.1.0"
