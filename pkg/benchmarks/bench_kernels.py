"""Numba vs numpy timings for the OT kernels.

    python benchmarks/bench_kernels.py [--quick]

Kernel timings come from one process (the compiled and fallback functions
both live in ``mind2mind.kernels``). The end-to-end ``exact_w1`` rows run in
two subprocesses, one per ``M2M_NUMBA`` setting, so the flag is honoured as
it would be in real use.
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from mind2mind import kernels
from mind2mind._accel import USE_NUMBA, njit


def best_of(fn, *args, repeat=5):
    fn(*args)  # warm-up, includes compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_rows(quick: bool):
    rng = np.random.default_rng(0)
    rows = []
    jit_pd = njit(kernels.pairwise_distances_loops)
    jit_ratio = njit(kernels.max_distance_ratio_loops)
    for n, d in ((256, 2), (1024, 16)) if quick else ((256, 2), (1024, 16), (2048, 784)):
        x, y = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        rows.append((f"pairwise_distances n={n} d={d}",
                     best_of(jit_pd, x, y), best_of(kernels.pairwise_distances_numpy, x, y)))
        rows.append((f"max_distance_ratio n={n} d={d}",
                     best_of(jit_ratio, x, y), best_of(kernels.max_distance_ratio_numpy, x, y)))
    # the simplex has no vectorised form; the fallback is the same code interpreted
    for n in (16, 48) if quick else (16, 48, 96):
        a = b = np.full(n, 1.0 / n)
        cost = kernels.pairwise_distances_numpy(rng.normal(size=(n, 3)), rng.normal(size=(n, 3)))
        args = (a, b, cost, 1e-12, 100 * n * n)
        rows.append((f"transport_simplex n={n}", best_of(kernels.transport_simplex, *args),
                     best_of(kernels.transport_simplex_loops, *args, repeat=1)))
    return rows


END_TO_END = """
import json, sys, time
import numpy as np
from mind2mind.ot import EmpiricalMeasure, exact_w1
out = {}
for n in map(int, sys.argv[1:]):
    rng = np.random.default_rng(n)
    mu = EmpiricalMeasure.uniform(rng.normal(size=(n, 4)))
    nu = EmpiricalMeasure.uniform(rng.normal(size=(n, 4)))
    exact_w1(mu, nu)
    t0 = time.perf_counter()
    exact_w1(mu, nu)
    out[n] = [time.perf_counter() - t0, exact_w1(mu, nu)[0]]
print(json.dumps(out))
"""


def end_to_end(sizes):
    res = {}
    for flag in ("1", "0"):
        env = {**os.environ, "M2M_NUMBA": flag}
        proc = subprocess.run([sys.executable, "-c", END_TO_END, *map(str, sizes)],
                              env=env, capture_output=True, text=True, check=True)
        res[flag] = json.loads(proc.stdout)
    return [(f"exact_w1 n={n} d=4", res["1"][str(n)][0], res["0"][str(n)][0],
             abs(res["1"][str(n)][1] - res["0"][str(n)][1])) for n in sizes]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    if not USE_NUMBA:
        sys.exit("run with numba enabled (unset M2M_NUMBA); the script times both paths itself")
    print(f"{'kernel':38s} {'numba s':>10s} {'fallback s':>11s} {'speedup':>8s}")
    for name, fast, slow in kernel_rows(args.quick):
        print(f"{name:38s} {fast:10.5f} {slow:11.5f} {slow / fast:7.1f}x")
    for name, fast, slow, diff in end_to_end((32, 64) if args.quick else (32, 64, 128)):
        print(f"{name:38s} {fast:10.5f} {slow:11.5f} {slow / fast:7.1f}x  |diff| {diff:.1e}")


if __name__ == "__main__":
    main()
