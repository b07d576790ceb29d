"""Small feed-forward training stack that runs in flex or full-precision mode.

Both arms execute the same layer code; only the kernel mode differs. In flex
mode every tensor write goes through a :class:`StatsSlot` keyed by
``(tensor_id, use_id)``; the slot's scale is fixed before the kernel runs and
updated from the returned Γ afterwards.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from flexsim import kernels
from flexsim.autoflex import AutoflexConfig, StatsSlot, adjust_scale, initialize_slot
from flexsim.data import Dataset, batch_indices
from flexsim.errors import InvalidSpec
from flexsim.format import ExponentState, FlexFormat, quantize_tensor
from flexsim.kernels import KernelMode, real, shape_of
from flexsim.tensor import FlexTensor, TensorUseKey, from_reals
from flexsim.trace import Trace, export_trace

log = logging.getLogger(__name__)

REFERENCE = "reference"


# --------------------------------------------------------------------------
# model description
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Affine:
    n_in: int
    n_out: int


@dataclass(frozen=True)
class Conv:
    c: int
    o: int
    r: int
    s: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    k: int = 2


@dataclass(frozen=True)
class SoftmaxCrossEntropy:
    pass


LayerSpec = Union[Affine, Conv, ReLU, MaxPool, SoftmaxCrossEntropy]


@dataclass(frozen=True)
class ModelSpec:
    """Layer list plus the per-sample input shape, e.g. ``(64,)`` or ``(1, 8, 8)``."""

    layers: tuple
    input_shape: tuple

    def output_shapes(self):
        """Per-sample shape after each layer; raises InvalidSpec if layers do not compose."""
        shape = tuple(self.input_shape)
        shapes = []
        losses = [i for i, l in enumerate(self.layers) if isinstance(l, SoftmaxCrossEntropy)]
        if len(losses) != 1 or losses[0] != len(self.layers) - 1:
            raise InvalidSpec("need exactly one SoftmaxCrossEntropy, as the last layer")
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Affine):
                if math.prod(shape) != layer.n_in:
                    raise InvalidSpec(f"layer {i}: Affine expects {layer.n_in} inputs, gets {shape}")
                shape = (layer.n_out,)
            elif isinstance(layer, Conv):
                if len(shape) != 3 or shape[0] != layer.c:
                    raise InvalidSpec(f"layer {i}: Conv expects ({layer.c}, h, w), gets {shape}")
                oh = (shape[1] + 2 * layer.pad - layer.r) // layer.stride + 1
                ow = (shape[2] + 2 * layer.pad - layer.s) // layer.stride + 1
                if oh < 1 or ow < 1:
                    raise InvalidSpec(f"layer {i}: kernel larger than input {shape}")
                shape = (layer.o, oh, ow)
            elif isinstance(layer, MaxPool):
                if len(shape) != 3 or shape[1] < layer.k or shape[2] < layer.k:
                    raise InvalidSpec(f"layer {i}: MaxPool({layer.k}) on {shape}")
                shape = (shape[0], shape[1] // layer.k, shape[2] // layer.k)
            elif isinstance(layer, SoftmaxCrossEntropy):
                if len(shape) != 1:
                    raise InvalidSpec(f"loss needs flat logits, gets {shape}")
            elif not isinstance(layer, ReLU):
                raise InvalidSpec(f"layer {i}: unknown layer {layer!r}")
            shapes.append(shape)
        return shapes


def mlp_spec(n_in=64, hidden=128, n_out=10) -> ModelSpec:
    return ModelSpec((Affine(n_in, hidden), ReLU(), Affine(hidden, n_out), SoftmaxCrossEntropy()), (n_in,))


def convnet_spec(side=8, channels=4, n_out=10) -> ModelSpec:
    flat = channels * (side // 2) ** 2
    return ModelSpec(
        (Conv(1, channels, 3, 3, pad=1), ReLU(), MaxPool(2), Affine(flat, n_out), SoftmaxCrossEntropy()),
        (1, side, side),
    )


@dataclass
class TrainConfig:
    format: str = "flex16+5"
    iterations: int = 400
    batch_size: int = 64
    lr: float = 0.1
    seed: int = 0
    autoflex: AutoflexConfig = field(default_factory=AutoflexConfig)
    trace_path: str | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.format != REFERENCE:
            FlexFormat.parse(self.format)

    @property
    def is_reference(self):
        return self.format == REFERENCE

    @property
    def flex_format(self) -> FlexFormat | None:
        return None if self.is_reference else FlexFormat.parse(self.format)


# --------------------------------------------------------------------------
# runtime
# --------------------------------------------------------------------------

class Model:
    """A built network plus its Autoflex slots and run counters."""

    def __init__(self, spec: ModelSpec, cfg: TrainConfig, *, tracing=False):
        self.spec = spec
        self.cfg = cfg
        self.fmt = cfg.flex_format
        self.slots: dict[TensorUseKey, StatsSlot] = {}
        self.trace = Trace()
        self.tracing = tracing
        self.initialized = self.fmt is None
        self.kernel_calls = []  # iteration of every training-time write
        self.overflow_events = []  # (iteration, key)
        self._initializing = False
        self._adjust = True
        self.layers = []
        rng = np.random.default_rng(cfg.seed)
        spec.output_shapes()
        names = _layer_names(spec.layers)
        for name, ls in zip(names, spec.layers):
            cls = _RUNTIME[type(ls)]
            self.layers.append(cls(name, ls, self, rng))

    @property
    def reference(self):
        return self.fmt is None

    def slot(self, key: TensorUseKey) -> StatsSlot:
        s = self.slots.get(key)
        if s is None:
            s = self.slots[key] = StatsSlot(self.fmt, key)
        return s

    def param(self, tensor_id, values):
        """Register a parameter tensor; in flex mode its exponent is initialized from the values."""
        if self.reference:
            return values
        slot = self.slot(TensorUseKey(tensor_id, "weight"))
        initialize_slot(
            slot,
            lambda: quantize_tensor(values, slot.state, self.fmt)[1],
            trace=self.trace if self.tracing else None,
        )
        t, _ = from_reals(values, state=slot.state, fmt=self.fmt, tensor_id=tensor_id)
        return t

    def run(self, key: TensorUseKey, phase: str, fn):
        """Execute one kernel call site.

        ``fn(slot, mode)`` performs the kernel. During exponent initialization
        the call site loops stats-only calls until its slot is settled, then
        writes once. During training the write is followed by ``adjust_scale``.
        """
        if self.reference:
            return fn(None, KernelMode.REFERENCE_REAL)[0]
        slot = self.slot(key)
        trace = self.trace if self.tracing else None
        if self._initializing and not slot.initialized:
            initialize_slot(slot, lambda: fn(slot, KernelMode.STATS_ONLY)[1].gamma, trace=trace)
        out, ko = fn(slot, KernelMode.WRITE_AND_STATS)
        if self._adjust and not self._initializing:
            it = self.trace.iteration
            self.kernel_calls.append(it)
            if ko.overflowed:
                self.overflow_events.append((it, key))
            adjust_scale(slot, ko.gamma, self.cfg.autoflex, trace=trace, phase=phase)
        return out

    def input(self, X):
        if self.reference:
            return X
        return self.run(TensorUseKey("input", "fprop-out"), "fprop",
                        lambda slot, mode: kernels.requantize(X, slot, mode))

    def forward(self, X):
        h = self.input(X)
        for layer in self.layers[:-1]:
            h = layer.forward(h)
        return h

    def backward(self, labels, logits, update=True):
        """Backprop from the loss; applies SGD updates unless ``update`` is False."""
        delta = self.layers[-1].backward_from(logits, labels)
        for i in range(len(self.layers) - 2, -1, -1):
            delta = self.layers[i].backward(delta, need_input_grad=i > 0, update=update)

    def step(self, X, labels):
        logits = self.forward(X)
        loss, acc = self.layers[-1].loss(logits, labels)
        self.backward(labels, logits)
        return loss, acc

    def evaluate(self, X, labels, batch_size=256):
        """Accuracy at the current scales; no statistics are recorded."""
        self._adjust = False
        try:
            correct = 0
            for i in range(0, len(labels), batch_size):
                logits = real(self.forward(X[i : i + batch_size]))
                correct += int(np.sum(np.argmax(logits, axis=1) == labels[i : i + batch_size]))
        finally:
            self._adjust = True
        return correct / len(labels)

    def parameters(self):
        out = {}
        for layer in self.layers:
            for k, v in getattr(layer, "params", {}).items():
                out[f"{layer.name}.{k}"] = v
        return out


def _layer_names(layers):
    counts = {}
    names = []
    for l in layers:
        base = {Affine: "fc", Conv: "conv", ReLU: "relu", MaxPool: "pool",
                SoftmaxCrossEntropy: "loss"}.get(type(l))
        if base is None:
            raise InvalidSpec(f"unknown layer {l!r}")
        counts[base] = counts.get(base, 0) + 1
        names.append(base if base == "loss" else f"{base}{counts[base]}")
    return names


def _glorot(rng, shape, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


class _Layer:
    def __init__(self, name, spec, model, rng):
        self.name = name
        self.spec = spec
        self.model = model

    def key(self, suffix, use):
        return TensorUseKey(f"{self.name}.{suffix}", use)


class _ParamLayer(_Layer):
    def _update(self, grads, update):
        m = self.model
        for pname, g in grads.items():
            tid = f"{self.name}.{pname}"
            dw = m.run(TensorUseKey(tid, "update"), "bprop", g)
            if not update:
                continue
            w = self.params[pname]
            lr = m.cfg.lr
            self.params[pname] = m.run(
                TensorUseKey(tid, "weight"), "bprop",
                lambda slot, mode, w=w, dw=dw: kernels.sgd_update(w, dw, lr, slot, mode, dest=w),
            )


class _AffineLayer(_ParamLayer):
    def __init__(self, name, spec, model, rng):
        super().__init__(name, spec, model, rng)
        W = _glorot(rng, (spec.n_in, spec.n_out), spec.n_in, spec.n_out)
        self.params = {
            "W": model.param(f"{name}.W", W),
            "b": model.param(f"{name}.b", np.zeros(spec.n_out)),
        }

    def forward(self, x):
        sx = shape_of(x)
        if len(sx) != 2:
            x = x.reshape(sx[0], -1)
        self._in_shape = sx
        self._x = x
        W, b = self.params["W"], self.params["b"]
        return self.model.run(self.key("out", "fprop-out"), "fprop",
                              lambda slot, mode: kernels.matmul(x, W, slot, mode, bias=b))

    def backward(self, delta, need_input_grad, update):
        m = self.model
        W = self.params["W"]
        dx = None
        if need_input_grad:
            dx = m.run(self.key("in", "bprop-delta"), "bprop",
                       lambda slot, mode: _matmul_transposed_b(delta, W, slot, mode))
            if len(self._in_shape) != 2:
                dx = dx.reshape(self._in_shape)
        x = self._x
        self._update({
            "W": lambda slot, mode: _matmul_transposed_a(x, delta, slot, mode),
            "b": lambda slot, mode: kernels.sum_reduce(delta, (0,), slot, mode),
        }, update)
        return dx


def _transpose(t):
    if isinstance(t, FlexTensor):
        return FlexTensor(t.mantissas.T, t.state, t.fmt, t.tensor_id, t.gamma)
    return np.asarray(t).T


def _matmul_transposed_b(a, b, slot, mode):
    return kernels.matmul(a, _transpose(b), slot, mode)


def _matmul_transposed_a(a, b, slot, mode):
    return kernels.matmul(_transpose(a), b, slot, mode)


class _ConvLayer(_ParamLayer):
    def __init__(self, name, spec, model, rng):
        super().__init__(name, spec, model, rng)
        shape = (spec.o, spec.c, spec.r, spec.s)
        W = _glorot(rng, shape, spec.c * spec.r * spec.s, spec.o * spec.r * spec.s)
        self.params = {
            "W": model.param(f"{name}.W", W),
            "b": model.param(f"{name}.b", np.zeros(spec.o)),
        }

    def forward(self, x):
        sp = self.spec
        self._x = x
        W, b = self.params["W"], self.params["b"]
        return self.model.run(
            self.key("out", "fprop-out"), "fprop",
            lambda slot, mode: kernels.conv2d(x, W, slot, mode, sp.stride, sp.pad, bias=b),
        )

    def backward(self, delta, need_input_grad, update):
        m, sp = self.model, self.spec
        W, x = self.params["W"], self._x
        dx = None
        if need_input_grad:
            dx = m.run(self.key("in", "bprop-delta"), "bprop",
                       lambda slot, mode: kernels.conv2d_grad_input(
                           delta, W, shape_of(x), slot, mode, sp.stride, sp.pad))
        self._update({
            "W": lambda slot, mode: kernels.conv2d_grad_weight(
                x, delta, shape_of(W), slot, mode, sp.stride, sp.pad),
            "b": lambda slot, mode: kernels.sum_reduce(delta, (0, 2, 3), slot, mode),
        }, update)
        return dx


class _ReLULayer(_Layer):
    def forward(self, x):
        xr = real(x)
        self._mask = xr > 0
        return self.model.run(self.key("out", "fprop-out"), "fprop",
                              lambda slot, mode: kernels.elementwise("relu", [x], slot, mode))

    def backward(self, delta, need_input_grad, update):
        if not need_input_grad:
            return None
        m = self.model
        if m.reference:
            mask = self._mask.astype(np.float64)
        else:
            mask = FlexTensor(self._mask.astype(np.int64), ExponentState(0), m.fmt)
        return m.run(self.key("in", "bprop-delta"), "bprop",
                     lambda slot, mode: kernels.elementwise("mul", [delta, mask], slot, mode))


class _MaxPoolLayer(_Layer):
    def forward(self, x):
        k = self.spec.k
        self._x_shape = shape_of(x)

        def fn(slot, mode):
            out, ko, arg = kernels.maxpool(x, k, slot, mode)
            self._arg = arg
            return out, ko

        return self.model.run(self.key("out", "fprop-out"), "fprop", fn)

    def backward(self, delta, need_input_grad, update):
        if not need_input_grad:
            return None
        k, arg, xs = self.spec.k, self._arg, self._x_shape
        return self.model.run(self.key("in", "bprop-delta"), "bprop",
                              lambda slot, mode: kernels.maxpool_grad(delta, arg, k, xs, slot, mode))


class _LossLayer(_Layer):
    """Softmax cross-entropy, computed in float64 in both arms."""

    def loss(self, logits, labels):
        z = real(logits)
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = float(-logp[np.arange(len(labels)), labels].mean())
        acc = float(np.mean(np.argmax(z, axis=1) == labels))
        return loss, acc

    def backward_from(self, logits, labels):
        z = real(logits)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(len(labels)), labels] -= 1.0
        p /= len(labels)
        return self.model.run(self.key("in", "bprop-delta"), "bprop",
                              lambda slot, mode: kernels.requantize(p, slot, mode))


_RUNTIME = {
    Affine: _AffineLayer,
    Conv: _ConvLayer,
    ReLU: _ReLULayer,
    MaxPool: _MaxPoolLayer,
    SoftmaxCrossEntropy: _LossLayer,
}


# --------------------------------------------------------------------------
# entry points
# --------------------------------------------------------------------------

def build_model(spec: ModelSpec, cfg: TrainConfig, *, tracing=False) -> Model:
    """Instantiate parameters (identically across arms for a given seed).

    In flex mode every parameter's weight slot is initialized here from its
    initial values; biases start at zero and take the all-zero escape.
    """
    if not spec.layers:
        raise InvalidSpec("empty model")
    return Model(spec, cfg, tracing=tracing)


def initialize_exponents(model: Model, batch) -> None:
    """Settle every activation, delta and update slot with stats-only calls.

    Runs one forward and backward pass over ``batch = (X, labels)``; each call
    site loops until its slot initializes before writing its output. Weights
    are not updated. No-op in reference mode.
    """
    if model.reference:
        return
    X, labels = batch
    model._initializing = True
    try:
        logits = model.forward(X)
        model.backward(labels, logits, update=False)
    finally:
        model._initializing = False
    model.initialized = True


@dataclass
class RunResult:
    losses: np.ndarray
    accuracies: np.ndarray
    final_accuracy: float
    kernel_calls: np.ndarray  # iteration index of every training-time kernel write
    overflow_events: list
    trace: Trace
    seconds: float
    slots: dict = field(repr=False, default_factory=dict)

    def overflows_after(self, iteration):
        return sum(1 for it, _ in self.overflow_events if it >= iteration)

    def kernel_calls_after(self, iteration):
        return int(np.sum(self.kernel_calls >= iteration))

    @property
    def overflow_total(self):
        return len(self.overflow_events)


def train(model: Model, dataset: Dataset, cfg: TrainConfig | None = None) -> RunResult:
    """Plain minibatch SGD for ``cfg.iterations`` steps.

    If the model's exponents are not initialized yet, the first
    ``batch_size`` samples are used to initialize them; this does not touch
    the minibatch stream, so both arms see identical batches.
    """
    cfg = cfg or model.cfg
    t0 = time.perf_counter()
    if not model.initialized:
        n = min(cfg.batch_size, len(dataset))
        initialize_exponents(model, (_shape_input(model, dataset.X[:n]), dataset.y[:n]))
    losses = np.empty(cfg.iterations)
    accs = np.empty(cfg.iterations)
    for it, idx in enumerate(batch_indices(len(dataset), cfg.batch_size, cfg.iterations, cfg.seed)):
        model.trace.iteration = it
        loss, acc = model.step(_shape_input(model, dataset.X[idx]), dataset.y[idx])
        losses[it], accs[it] = loss, acc
    final_acc = model.evaluate(_shape_input(model, dataset.X), dataset.y)
    result = RunResult(
        losses, accs, final_acc, np.asarray(model.kernel_calls), list(model.overflow_events),
        model.trace, time.perf_counter() - t0, model.slots,
    )
    if cfg.trace_path:
        export_trace(model.trace, cfg.trace_path)
    return result


def _shape_input(model, X):
    return X.reshape((len(X),) + tuple(model.spec.input_shape))


def smooth(values, window=25):
    """Trailing moving average; the first ``window - 1`` points average what is available."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def run_experiment(spec: ModelSpec, dataset: Dataset, cfg: TrainConfig, *, tracing=False) -> RunResult:
    model = build_model(spec, cfg, tracing=tracing or bool(cfg.trace_path))
    return train(model, dataset, cfg)
