"""Benchmark the compiled hot kernels against the pure-numpy fallback.

The two code paths selected by CROSSDIFF_DISABLE_NUMBA cover the periodic
convolution (the per-step cost of the nonlocal solver) and the event loop of
the stochastic lattice simulation.  By default this script times both paths
by re-invoking itself in subprocesses (one per backend) and prints a
comparison table; ``--json`` runs the measurement for the currently active
backend only and emits machine-readable rows.

Usage:
    python3 benchmarks/benchmark_backends.py            # comparison table
    python3 benchmarks/benchmark_backends.py --repeat 9
    CROSSDIFF_DISABLE_NUMBA=1 python3 benchmarks/benchmark_backends.py --json
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from crossdiff import backends


def best_of(fn, repeat: int) -> float:
    fn()  # warm-up (first call may compile)
    best = min(timeit_once(fn) for _ in range(repeat))
    return best


def timeit_once(fn) -> float:
    start = time.perf_counter()
    fn()
    return time.perf_counter() - start


def bench_convolution(repeat: int):
    rng = np.random.default_rng(7)
    rows = []
    for n in (256, 2048):
        f = rng.random(n)
        k = np.zeros(n)
        support = max(4, n // 5)
        k[:support] = rng.random(support)
        seconds = best_of(lambda: backends.circular_convolve_values(f, k), repeat)
        rows.append((f"conv-1d-n{n}", seconds, f"{n * support / seconds / 1e6:.0f} Mops"))

    f2 = rng.random((64, 64))
    k2 = np.zeros((64, 64))
    k2[:13, :13] = rng.random((13, 13))
    seconds = best_of(lambda: backends.circular_convolve_values(f2, k2), repeat)
    rows.append(("conv-2d-64x64", seconds,
                 f"{64 * 64 * 13 * 13 / seconds / 1e6:.0f} Mops"))
    return rows


def bench_gillespie(repeat: int, events: int):
    rng = np.random.default_rng(11)
    sites = 32
    rates = rng.uniform(0.2, 1.0, (sites, sites))
    rate_left = np.roll(rates, (1, 1), axis=(0, 1))
    counts_1 = rng.multinomial(2000, np.full(sites, 1.0 / sites)).astype(np.int64)
    counts_2 = rng.multinomial(2000, np.full(sites, 1.0 / sites)).astype(np.int64)
    uniforms = rng.random(2 * events + 2)

    def case():
        backends.gillespie_loop(counts_1.copy(), counts_2.copy(), rates,
                                rate_left, 1e9, events, uniforms)

    seconds = best_of(case, repeat)
    return [(f"gillespie-{events}-events", seconds,
             f"{events / seconds / 1e6:.2f} Mevents/s")]


def measure(repeat: int, events: int):
    rows = bench_convolution(repeat) + bench_gillespie(repeat, events)
    return {
        "backend": "numba" if backends.USING_NUMBA else "numpy",
        "rows": [(name, seconds, note) for name, seconds, note in rows],
    }


def run_child(disable: bool, args) -> dict:
    env = dict(os.environ)
    env["CROSSDIFF_DISABLE_NUMBA"] = "1" if disable else "0"
    cmd = [sys.executable, os.path.abspath(__file__), "--json",
           "--repeat", str(args.repeat), "--events", str(args.events)]
    proc = subprocess.run(cmd, env=env, capture_output=True, text=True,
                          check=True)
    return json.loads(proc.stdout)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5,
                        help="timing repetitions per case (best is kept)")
    parser.add_argument("--events", type=int, default=200_000,
                        help="event count for the stochastic loop case")
    parser.add_argument("--json", action="store_true",
                        help="measure the active backend only, print JSON")
    args = parser.parse_args(argv)

    if args.json:
        print(json.dumps(measure(args.repeat, args.events)))
        return 0

    jit = run_child(disable=False, args=args)
    plain = run_child(disable=True, args=args)
    if jit["backend"] != "numba":
        print("note: numba unavailable; both columns ran the numpy fallback")

    width = max(len(name) for name, _, _ in jit["rows"])
    print(f"{'case':<{width}}  {'numba':>10}  {'numpy':>10}  {'speedup':>8}  throughput (numba)")
    for (name, t_jit, note), (_, t_np, _) in zip(jit["rows"], plain["rows"]):
        print(f"{name:<{width}}  {t_jit * 1e3:>8.3f}ms  {t_np * 1e3:>8.3f}ms  "
              f"{t_np / t_jit:>7.1f}x  {note}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
