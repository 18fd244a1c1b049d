"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Each row reports the best wall time over ``--repeat`` runs, after one warm-up
call (which also triggers numba compilation).
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from lambo import _kernels
from lambo.mec import GenConfig, generate_instance
from lambo.solvers import DeConfig, solve_de, solve_exact


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases():
    inst = generate_instance(GenConfig(n_ues=8, n_servers=3), 0)
    rng = np.random.default_rng(0)
    assoc = rng.integers(0, 4, size=(4096, 8))
    alloc = rng.uniform(0, 1e10, size=(4096, 8)) * (assoc > 0)
    fracs = rng.uniform(0, 1, size=(4096, 8))
    args = inst.kernel_args()
    small = generate_instance(GenConfig(n_ues=4, n_servers=2), 1)
    de = DeConfig(population=50, generations=200)

    def kern(name):
        k = _kernels.backend(name)
        return {
            "evaluate_batch (4096 x 8)": lambda: k.evaluate_batch(assoc, alloc, *args, 0),
            "repair (4096 x 8)": lambda: k.repair(assoc, fracs, inst.capacity, 0.01),
            "exact oracle N=8 M=3": lambda: solve_exact(inst, 1, backend=name),
            "DE pop 50 gen 200 N=4 M=2": lambda: solve_de(small, 0, de, backend=name),
        }
    return kern


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _kernels.NUMBA is None:
        raise SystemExit("numba is not installed; nothing to compare")
    kern = cases()
    nb, npy = kern("numba"), kern("numpy")
    print(f"{'kernel':32s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name in nb:
        a = _best(nb[name], args.repeat) * 1e3
        b = _best(npy[name], args.repeat) * 1e3
        print(f"{name:32s} {a:10.2f} {b:10.2f} {b / a:8.1f}x")


if __name__ == "__main__":
    main()
