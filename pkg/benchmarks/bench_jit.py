"""Time the numba loops against the numpy fallback.

    python benchmarks/bench_jit.py [--repeat N]

Each kernel is warmed up once per path (so JIT compilation is excluded) and
the best of ``--repeat`` runs is reported.
"""

import argparse
import logging
import time

import numpy as np

from flexsim import _jit, _loops
from flexsim.data import SyntheticDataset
from flexsim.nn import TrainConfig, mlp_spec, run_experiment


def best_of(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases():
    rng = np.random.default_rng(0)
    x = rng.normal(size=1_000_000)
    u = rng.random(x.size)
    img = rng.normal(size=(32, 8, 16, 16))
    w = rng.normal(size=(16, 8, 3, 3))
    dy = _loops.conv2d(img, w, 1, 1)
    ds = SyntheticDataset(n_samples=4096)
    return {
        "quantize nearest 1e6": lambda: _loops.quantize(x, 2.0**12, 32767.0),
        "quantize stochastic 1e6": lambda: _loops.quantize(x, 2.0**12, 32767.0, _loops.STOCHASTIC, u),
        "conv2d 32x8x16x16 * 16x8x3x3": lambda: _loops.conv2d(img, w, 1, 1),
        "conv2d grad input": lambda: _loops.conv2d_grad_input(dy, w, img.shape, 1, 1),
        "conv2d grad weight": lambda: _loops.conv2d_grad_weight(img, dy, w.shape, 1, 1),
        "maxpool 2x2": lambda: _loops.maxpool(img, 2),
        "MLP flex16+5, 100 iterations": lambda: run_experiment(
            mlp_spec(), ds, TrainConfig(iterations=100)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    logging.disable(logging.WARNING)  # zero-bias init notices, once per run
    if not _jit.JIT_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"{'case':34s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, fn in cases().items():
        prev = _jit.set_jit(True)
        t_jit = best_of(fn, args.repeat)
        _jit.set_jit(False)
        t_np = best_of(fn, args.repeat)
        _jit.set_jit(prev)
        print(f"{name:34s} {1e3 * t_jit:10.2f} {1e3 * t_np:10.2f} {t_np / t_jit:7.1f}x")


if __name__ == "__main__":
    main()
