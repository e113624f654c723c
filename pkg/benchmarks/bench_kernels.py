"""Compare the compiled and pure-Python theta-scheme marches.

Usage::

    python benchmarks/bench_kernels.py [--nodes 513] [--steps 512] [--repeat 5]

Both backends march the same variable-coefficient tridiagonal system; the
script checks they agree and prints the best wall time of each.
"""

import argparse
import timeit

import numpy as np

from kolmokernel import kernels


def make_problem(n: int, steps: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    h = 8.0 / (n - 1)
    q = 1.0 + rng.random((steps + 1, n))
    lower = q / h**2
    upper = q / h**2
    diag = -2.0 * q / h**2 - rng.random((steps + 1, n))
    u0 = np.exp(-np.linspace(-4, 4, n) ** 2)
    return lower, diag, upper, u0, 1.0 / steps


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=513)
    ap.add_argument("--steps", type=int, default=512)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    lower, diag, upper, u0, dt = make_problem(args.nodes, args.steps)
    results = {}
    for name in sorted(kernels.BACKENDS):
        run = lambda: kernels.theta_march(lower, diag, upper, u0, 0.5, dt, args.steps, backend=name)
        results[name] = run()
        best = min(timeit.repeat(run, number=1, repeat=args.repeat))
        print(f"{name:>7}: {best * 1e3:9.2f} ms  ({args.nodes} nodes x {args.steps} steps)")
    if len(results) == 2:
        diff = np.max(np.abs(results["cython"] - results["python"]))
        print(f"max |cython - python| = {diff:.3e}")
    else:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
