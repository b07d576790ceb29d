"""Autoflex exponent management.

``init_step`` is one pass of the trial-and-error initialization loop and
``adjust_scale`` is the per-write predictive update. Both work on a
:class:`StatsSlot`, which holds the state for one (tensor, use) pair.
"""

from __future__ import annotations

import logging
import math
import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from flexsim.errors import EmptyHistory, InitDivergence, UninitializedSlot
from flexsim.format import (
    FLEX16_5,
    ExponentState,
    FlexFormat,
    ceil_log2,
    ceil_log2_int,
    quantize_tensor,
)
from flexsim.tensor import TensorUseKey

log = logging.getLogger(__name__)

INIT_MAX_CALLS = 8


@dataclass(frozen=True)
class AutoflexConfig:
    alpha: float = 2.0
    beta: float = 3.0
    gamma: float = 100.0
    window: int = 16

    def __post_init__(self):
        if not self.alpha >= 1:
            raise ValueError("alpha must be >= 1")
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")
        if not self.gamma >= 0:
            raise ValueError("gamma must be >= 0")
        if int(self.window) != self.window or self.window < 1:
            raise ValueError("window must be a positive integer")


@dataclass(eq=False)
class StatsSlot:
    """Autoflex state for one (tensor, use).

    Starts at kappa = 1. ``clamp_count`` counts scale moves that were cut
    short by the exponent window.
    """

    fmt: FlexFormat = FLEX16_5
    key: TensorUseKey | None = None
    state: ExponentState = field(default_factory=lambda: ExponentState(0))
    dequeue: deque = field(default_factory=deque)
    initialized: bool = False
    overflow_count: int = 0
    last_chi: float = math.nan
    init_calls: int = 0
    clamp_count: int = 0

    @property
    def kappa(self) -> float:
        return self.state.scale

    @property
    def exponent(self) -> int:
        return self.state.exponent


def _move_to_log2_scale(slot: StatsSlot, log2_kappa: int) -> None:
    e = -int(log2_kappa)
    clamped = slot.fmt.clamp_exponent(e)
    if clamped != e:
        slot.clamp_count += 1
        log.debug("slot %s: exponent %d clamped to %d", slot.key, e, clamped)
    slot.state = ExponentState(clamped)


def init_step(slot: StatsSlot, gamma: int, fmt: FlexFormat | None = None, *,
              trace=None) -> tuple[float, bool]:
    """One iteration of the initialization loop.

    ``gamma`` is the max-abs mantissa a stats-only kernel call produced at the
    slot's current scale. Returns ``(new kappa, initialized)``.
    """
    fmt = fmt or slot.fmt
    n = fmt.mantissa_bits
    gamma = int(gamma)
    old = slot.state
    log2_kappa = -old.exponent
    done = False
    if gamma >= fmt.overflow_threshold:
        log2_kappa += (n - 1) // 2
    elif gamma < 1 << (n - 2):
        log2_kappa += ceil_log2_int(max(gamma, 1)) - (n - 2)
        # exact test of gamma > 2^((n-1)//2 - 2); the exponent can be negative for tiny n
        k = (n - 1) // 2 - 2
        done = gamma > (1 << k) if k >= 0 else gamma >= 1
    else:
        done = True
    _move_to_log2_scale(slot, log2_kappa)
    slot.initialized = done
    slot.init_calls += 1
    if trace is not None:
        trace.record(slot, gamma, old.scale, old.exponent, math.nan,
                     gamma >= fmt.overflow_threshold, "init")
    return slot.kappa, done


def initialize_slot(slot: StatsSlot, stats_call: Callable[[], int], *, max_calls=INIT_MAX_CALLS,
                    trace=None) -> int:
    """Run ``init_step`` until the slot initializes; returns the number of stats calls.

    ``stats_call`` performs a stats-only kernel call at ``slot.kappa`` and returns Γ.
    After ``max_calls`` the current scale is accepted: silently-ish for an
    all-zero tensor, with an ``InitDivergence`` warning otherwise.
    """
    calls = 0
    gamma = 0
    while not slot.initialized:
        if calls >= max_calls:
            slot.initialized = True
            if gamma == 0:
                log.warning("slot %s: all-zero tensor, accepting exponent %d", slot.key, slot.exponent)
            else:
                warnings.warn(InitDivergence(
                    f"slot {slot.key}: no stable exponent after {calls} calls (last gamma {gamma})"
                ), stacklevel=2)
            break
        gamma = int(stats_call())
        calls += 1
        init_step(slot, gamma, trace=trace)
    return calls


def predict_chi(dequeue, kappa: float, cfg: AutoflexConfig) -> float:
    """Predicted max abs value for the next write: alpha * (max + beta * std + gamma * kappa).

    ``std`` is the population standard deviation.
    """
    f = np.fromiter(dequeue, dtype=np.float64)
    if f.size == 0:
        raise EmptyHistory("no statistics to predict from")
    return float(cfg.alpha * (f.max() + cfg.beta * f.std() + cfg.gamma * kappa))


def adjust_scale(slot: StatsSlot, gamma: int, cfg: AutoflexConfig = AutoflexConfig(),
                 fmt: FlexFormat | None = None, *, trace=None, phase="fprop") -> float:
    """Fold the Γ of the write that just happened into the slot and pick the next scale."""
    if not slot.initialized:
        raise UninitializedSlot(f"slot {slot.key} is not initialized")
    fmt = fmt or slot.fmt
    gamma = int(gamma)
    kappa = slot.kappa
    overflow = gamma >= fmt.overflow_threshold
    g = gamma
    if overflow:
        slot.dequeue.clear()
        slot.overflow_count += 1
        g = 2 * gamma
    slot.dequeue.append(g * kappa)
    while len(slot.dequeue) > cfg.window:
        slot.dequeue.popleft()
    chi = predict_chi(slot.dequeue, kappa, cfg)
    if trace is not None:
        trace.record(slot, gamma, kappa, slot.exponent, chi, overflow, phase)
    slot.last_chi = chi
    if chi > 0:
        _move_to_log2_scale(slot, ceil_log2(chi) - fmt.mantissa_bits + 1)
    return slot.kappa


def reset_stats(slot: StatsSlot) -> None:
    slot.dequeue.clear()


@dataclass(frozen=True)
class ReplayStep:
    gamma: int
    kappa: float
    chi: float
    overflow: bool


def replay_stream(values, fmt: FlexFormat = FLEX16_5, cfg: AutoflexConfig = AutoflexConfig()):
    """Drive one slot with a recorded stream of tensor max-abs values.

    The first value initializes the slot (stats-only calls); then every value is
    quantized at the current scale and fed to ``adjust_scale``. ``kappa`` in each
    step is the scale the value was quantized at.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise EmptyHistory("empty stream")
    slot = StatsSlot(fmt)
    initialize_slot(slot, lambda: quantize_tensor(values[:1], slot.state, fmt)[1])
    steps = []
    for v in values:
        kappa = slot.kappa
        _, gamma, over = quantize_tensor(np.array([v]), slot.state, fmt)
        adjust_scale(slot, gamma, cfg)
        steps.append(ReplayStep(gamma, kappa, slot.last_chi, over))
    return steps
