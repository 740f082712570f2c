"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Shapes follow the desk-scale run: 32-64-64-64-10 MLP, 64-sample shards, batch 50.
"""

import argparse
import math
import timeit

import numpy as np

from fedmr import _kernels
from fedmr.train import LocalTrainConfig, batch_schedule


def cases(rng):
    sizes = [32, 64, 64, 64, 10]
    dims = np.asarray(sizes, dtype=np.int64)
    P = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    w = rng.standard_normal(P) * 0.1
    X = rng.standard_normal((64, 32))
    y = rng.integers(0, 10, 64)
    batches = batch_schedule(64, LocalTrainConfig(epochs=5, batch_size=50))
    stack = rng.standard_normal((5, P))
    ref = np.zeros(0)
    return {
        "stack_sum (5 models)": ("stack_sum", (stack,)),
        "sq_dist_sum (5 models)": ("sq_dist_sum", (stack, w)),
        "mlp_loss_grad (batch 64)": ("mlp_loss_grad", (w, dims, X, y)),
        "sgd_train (one client round)": ("sgd_train", (w, dims, X, y, batches, 0.01, 0.9, 0.0, ref)),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = _kernels.implementations()
    rng = np.random.default_rng(0)
    print(f"backends: {', '.join(impls)} (active: {_kernels.BACKEND})")
    print(f"{'kernel':<30} {'numpy us':>10} {'numba us':>10} {'speedup':>8}")
    for label, (name, call_args) in cases(rng).items():
        times = {}
        for backend, table in impls.items():
            fn = table[name]
            fn(*call_args)  # warm up / compile
            number = max(1, int(0.2 / max(timeit.timeit(lambda: fn(*call_args), number=1), 1e-7)))
            best = min(timeit.repeat(lambda: fn(*call_args), number=number, repeat=args.repeat)) / number
            times[backend] = best * 1e6
        nb = times.get("numba", math.nan)
        print(f"{label:<30} {times['numpy']:>10.1f} {nb:>10.1f} {times['numpy'] / nb:>7.1f}x")


if __name__ == "__main__":
    main()
