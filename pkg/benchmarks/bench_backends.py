#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure-Python fallback.

Times the raw kernels on shapes representative of the training workload,
verifies the two backends agree bit for bit, and times a full training
iteration under each backend. Run from the repository root:

    python3 benchmarks/bench_backends.py
"""

import time

import numpy as np

import pairzsl.backend as backend_mod
from pairzsl import _kernels_py as py_kernels
from pairzsl.data import SyntheticSpec, generate_synthetic
from pairzsl.training import TrainConfig, build_model_for, train

try:
    from pairzsl import _kernels as c_kernels
except ImportError:
    c_kernels = None

# (m, k, n): metric layer matmuls for a 32-image batch at desk scale
MATMUL_SHAPES = [
    (1020, 128, 64),
    (1020, 64, 64),
    (64, 1020, 128),
    (1020, 128, 32),
    (500, 64, 500),
]


def _time(fn, *args, reps=20):
    fn(*args)  # warm up
    start = time.perf_counter()
    for _ in range(reps):
        fn(*args)
    return (time.perf_counter() - start) / reps


def bench_kernels():
    rng = np.random.default_rng(0)
    print(f"{'matmul shape':>18s} {'compiled':>12s} {'python':>12s} {'speedup':>8s}")
    for m, k, n in MATMUL_SHAPES:
        a = rng.normal(size=(m, k))
        b = rng.normal(size=(k, n))
        t_py = _time(py_kernels.matmul, a, b)
        if c_kernels is None:
            print(f"{f'{m}x{k}x{n}':>18s} {'(not built)':>12s} {t_py * 1e3:>10.2f}ms")
            continue
        assert np.array_equal(c_kernels.matmul(a, b), py_kernels.matmul(a, b))
        t_c = _time(c_kernels.matmul, a, b)
        print(
            f"{f'{m}x{k}x{n}':>18s} {t_c * 1e3:>10.2f}ms {t_py * 1e3:>10.2f}ms "
            f"{t_py / t_c:>7.1f}x"
        )


def bench_training(iterations=100):
    dataset = generate_synthetic(SyntheticSpec(seed=1))
    view = dataset.train_view()
    config = TrainConfig(
        learning_rate=1e-4,
        max_iterations=iterations,
        batch_size=32,
        lambda_ent=1e-3,
        alignment_mode="dsbn",
        seed=1,
        hidden_units=32,
        log_every=10_000,
    )

    def run():
        model = build_model_for(view, config)
        start = time.perf_counter()
        train(model, view, config)
        return (time.perf_counter() - start) / iterations

    results = {}
    if c_kernels is not None:
        backend_mod.matmul = c_kernels.matmul
        backend_mod.colsum = c_kernels.colsum
        backend_mod.rowsum = c_kernels.rowsum
        results["compiled"] = run()
    backend_mod.matmul = py_kernels.matmul
    backend_mod.colsum = py_kernels.colsum
    backend_mod.rowsum = py_kernels.rowsum
    results["python"] = run()

    print(f"\ntraining iteration (batch 32, hidden 32, {iterations} iterations):")
    for name, per_iter in results.items():
        print(f"  {name:>9s}: {per_iter * 1e3:.2f} ms/iteration")
    if "compiled" in results:
        print(f"  speedup: {results['python'] / results['compiled']:.1f}x")


if __name__ == "__main__":
    print(f"selected backend at import: {backend_mod.BACKEND}")
    bench_kernels()
    bench_training()
