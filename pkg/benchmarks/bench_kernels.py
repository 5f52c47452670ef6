"""Benchmark the compiled kernel backend against the pure-numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat 200]

Times each kernel on shapes representative of the training loop (mini-batch
activations and full-dataset loss caches) and prints one table row per
(kernel, shape) with the speedup of the compiled backend.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from metaloss.kernels import _numpy  # noqa: E402

try:
    from metaloss.kernels import _native  # noqa: E402
except ImportError:
    _native = None

SHAPES = [(128, 64), (512, 64), (2000, 10), (2000, 128)]
ELEMENTWISE = ["relu", "step", "logistic", "row_logsumexp", "softmax_rows"]


def _time(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(5):
        start = time.perf_counter()
        for _ in range(repeat):
            fn()
        best = min(best, (time.perf_counter() - start) / repeat)
    return best


def bench(repeat: int) -> None:
    if _native is None:
        print("compiled backend not built; run `python setup.py build_ext --inplace`")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18} {'shape':<12} {'numpy us':>10} {'native us':>10} {'speedup':>8}")
    for shape in SHAPES:
        x = np.ascontiguousarray(rng.normal(size=shape))
        for name in ELEMENTWISE:
            t_np = _time(lambda: getattr(_numpy, name)(x), repeat)
            t_na = _time(lambda: getattr(_native, name)(x), repeat)
            print(f"{name:<18} {str(shape):<12} {1e6 * t_np:>10.1f} "
                  f"{1e6 * t_na:>10.1f} {t_np / t_na:>7.2f}x")
        grad = np.ascontiguousarray(rng.normal(size=shape))
        buf = np.zeros(shape)
        m, v = np.zeros(shape), np.zeros(shape)
        p1, p2 = x.copy(), x.copy()
        t_np = _time(lambda: _numpy.sgd_momentum_update(p1, grad, buf, 0.1, 0.9, 5e-4), repeat)
        t_na = _time(lambda: _native.sgd_momentum_update(p2, grad, buf, 0.1, 0.9, 5e-4), repeat)
        print(f"{'sgd_momentum':<18} {str(shape):<12} {1e6 * t_np:>10.1f} "
              f"{1e6 * t_na:>10.1f} {t_np / t_na:>7.2f}x")
        t_np = _time(lambda: _numpy.adam_update(p1, grad, m, v, 3e-3, 0.9, 0.999, 1e-8, 5), repeat)
        t_na = _time(lambda: _native.adam_update(p2, grad, m, v, 3e-3, 0.9, 0.999, 1e-8, 5), repeat)
        print(f"{'adam':<18} {str(shape):<12} {1e6 * t_np:>10.1f} "
              f"{1e6 * t_na:>10.1f} {t_np / t_na:>7.2f}x")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=200)
    bench(parser.parse_args().repeat)
