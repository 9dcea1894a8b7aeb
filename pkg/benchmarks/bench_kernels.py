"""Time the compiled kernels against the NumPy fallback.

    python benchmarks/bench_kernels.py [--paths 4000] [--steps 128] [--dim 4] [--repeat 3]
"""
import argparse
import timeit

import numpy as np

from seelab import kernels


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=4000)
    ap.add_argument("--steps", type=int, default=128)
    ap.add_argument("--dim", type=int, default=4)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    N, M, n = args.paths, args.steps, args.dim
    E = np.eye(n) + 0.05 * rng.standard_normal((N, M, n, n))
    S = rng.standard_normal((N, M, n, n))
    term = np.broadcast_to(np.eye(n), (N, n, n)).copy()
    dts = np.full(M, 1.0 / M)
    x0 = np.ones(n)

    cases = {
        "backward_congruence": lambda b: kernels.backward_congruence(E, S, term, dts,
                                                                     args.workers, b),
        "forward_flow": lambda b: kernels.forward_flow(E, x0, args.workers, b),
        "batched_matmul": lambda b: kernels.batched_matmul(E, S, args.workers, b),
    }
    backends = ["numpy"] + (["cython"] if kernels._ext is not None else [])
    print(f"N={N} M={M} n={n} workers={args.workers}  (best of {args.repeat}, seconds)")
    print(f"{'kernel':<22}" + "".join(f"{b:>10}" for b in backends) + "   speedup")
    for name, fn in cases.items():
        times = [min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)) for b in backends]
        ratio = f"{times[0] / times[-1]:9.1f}x" if len(times) > 1 else "      n/a"
        print(f"{name:<22}" + "".join(f"{t:10.4f}" for t in times) + ratio)


if __name__ == "__main__":
    main()
