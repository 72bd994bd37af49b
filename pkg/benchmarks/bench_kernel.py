"""Compare the compiled LANO rollout kernel against the numpy fallback.

    python3 benchmarks/bench_kernel.py [--K 10] [--rank 16] [--width 64]

Prints per-call wall time for a single input (the inference hot path inside
L-BFGS) and for a batch, with and without the forward-mode Jacobian.
"""

import argparse
import time

import numpy as np

from lanoboed.surrogate.kernel import available_backends, lano_eval
from lanoboed.surrogate.params import init_lano


def timeit(fn, min_time=0.5):
    fn()
    n, t0 = 0, time.perf_counter()
    while True:
        fn()
        n += 1
        el = time.perf_counter() - t0
        if el >= min_time:
            return el / n


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--K", type=int, default=10)
    ap.add_argument("--rank", type=int, default=16)
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--batch", type=int, default=32)
    args = ap.parse_args()

    P = init_lano(args.K, args.rank, args.rank, args.width, args.width, seed=0, head_gain=1.0).arrays
    rng = np.random.default_rng(0)
    f0 = rng.standard_normal(args.rank)
    backends = available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy path is available")
    print(f"{'backend':<8}{'batch':>6}{'jacobian':>10}{'ms/call':>12}{'vs numpy':>10}")
    for B in (1, args.batch):
        bm = rng.standard_normal((B, args.rank))
        for tangents in (False, True):
            ref = None
            for be in ("numpy",) + tuple(b for b in backends if b != "numpy"):
                t = timeit(lambda: lano_eval(P, bm, f0, tangents, backend=be))
                ref = ref or t
                print(f"{be:<8}{B:>6}{str(tangents):>10}{1e3 * t:>12.3f}{ref / t:>9.1f}x")


if __name__ == "__main__":
    main()
