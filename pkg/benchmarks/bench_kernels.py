"""Compare the compiled and numpy kernel backends.

Times the fused rank-one value/gradient kernel and the per-node matvec on a
sparse diffusion family and a dense random family, then a full deflation run
per backend.  Usage::

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from deflate_rom import kernels
from deflate_rom.deflation import run_deflation
from deflate_rom.parametric import generate_diffusion_1d, generate_random_spd_family, parse_quadrature


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def problems():
    yield "diffusion n=255, 33 nodes (sparse)", generate_diffusion_1d(
        256, parse_quadrature({"kind": "gauss", "n": 33}))
    yield "random n=64, 16 nodes (dense)", generate_random_spd_family(64, 16, seed=0)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--calls", type=int, default=200)
    args = ap.parse_args()

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy backend is available")
    print(f"{'problem':<38}{'kernel':<18}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for label, (op, rhs, grid) in problems():
        stack = op.stack
        z = np.random.default_rng(0).standard_normal(op.n)
        F = np.ascontiguousarray(rhs)
        w = grid.weights
        cases = {
            "value_grad": lambda: [stack.rank1_value_grad(F, w, z) for _ in range(args.calls)],
            "matvec": lambda: [stack.matvec(z) for _ in range(args.calls)],
            "deflation": lambda: run_deflation(op, grid, rhs, tol=1e-10, max_steps=10, check_every=0),
        }
        for name, fn in cases.items():
            row = {}
            for b in backends:
                kernels.use_backend(b)
                row[b] = best_of(fn, 1 if name == "deflation" else args.repeat)
            speed = row["python"] / row["cython"] if "cython" in row else float("nan")
            cells = "".join(f"{1e3 * row[b]:>10.2f}ms" for b in backends)
            print(f"{label:<38}{name:<18}{cells}{speed:>9.2f}x")
    kernels.use_backend(kernels.available_backends()[0])


if __name__ == "__main__":
    main()
