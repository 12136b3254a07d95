"""Time the compiled and numpy kernels on the same local-training workload.

    python3 benchmarks/bench_kernels.py [--samples N] [--epochs E] [--repeats R]
"""
import argparse
import time

import numpy as np

from fedmesh.kernels import available_backends
from fedmesh.model import head_param_count


def workload(n, F, H, epochs, seed=0):
    rng = np.random.default_rng(seed)
    feats = rng.uniform(0, 1, size=(n, F))
    labels = rng.integers(0, 2, size=n).astype(np.int64)
    params = rng.uniform(-0.1, 0.1, size=head_param_count(F, H))
    orders = np.stack([rng.permutation(n) for _ in range(epochs)])
    return feats, labels, params, orders


def time_backend(mod, feats, labels, params, orders, batch, F, H, repeats):
    best = float("inf")
    for _ in range(repeats):
        p = params.copy()
        m, v = np.zeros_like(p), np.zeros_like(p)
        start = time.perf_counter()
        mod.train_epochs(feats, labels, orders, batch, p, m, v, 0, 1e-3, 0.9, 0.999, 1e-8, F, H)
        best = min(best, time.perf_counter() - start)
    return best, p


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--samples", type=int, default=1000)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--feature-dim", type=int, default=32)
    ap.add_argument("--hidden-dim", type=int, default=16)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    F, H = args.feature_dim, args.hidden_dim
    data = workload(args.samples, F, H, args.epochs)
    steps = args.epochs * -(-args.samples // args.batch)
    print(f"{args.samples} samples, {args.epochs} epochs, batch {args.batch}, F={F}, H={H} ({steps} Adam steps)")
    results = {}
    for name, mod in available_backends().items():
        secs, params = time_backend(mod, *data, args.batch, F, H, args.repeats)
        results[name] = (secs, params)
        print(f"  {name:7s} {secs * 1e3:9.2f} ms   {steps / secs:10.0f} steps/s")
    if len(results) == 2:
        (tp, pp), (tc, pc) = results["python"], results["cython"]
        print(f"  speedup {tp / tc:.1f}x, max |param diff| {np.max(np.abs(pp - pc)):.2e}")
    else:
        print("  compiled kernels not built; run `pip install -e . --no-build-isolation` with Cython present")


if __name__ == "__main__":
    main()
