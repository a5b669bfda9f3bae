#!/usr/bin/env python3
"""Benchmark: compiled kernel lane versus the pure-Python mirror.

Workloads mirror the verification pipelines: a branching population at
scaling level n over a unit horizon (the hot path of the equivalence
certificate) and a killed-path batch (Feynman-Kac estimators).  Both
lanes consume identical random streams, so outputs are checked equal
while timing.

Usage: python benchmarks/bench_kernels.py [--n 400] [--reps 3]
"""

import argparse
import time

import numpy as np

from backbonesim import kernels
from backbonesim.fields import FieldTable
from backbonesim.mechanism import BranchingMechanism, scaled_branch_law
from backbonesim.particle import cdf_table_for
from backbonesim.rng import stream

CONST0 = FieldTable(0, 0.0, 0.0, 1.0, np.zeros(1))
CONST1 = FieldTable(0, 1.0, 0.0, 1.0, np.zeros(1))


def bench_population(n, reps, backend):
    mech = BranchingMechanism.build(1.0, 1.0)
    rate_field, pmf = scaled_branch_law(mech, n)
    q = float(rate_field(0.0))
    rows, mode, cx0, cdx = cdf_table_for(pmf(0.0))
    rate_tab = FieldTable(0, q, 0.0, 1.0, np.zeros(1))
    best = None
    out = None
    for rep in range(reps):
        rng = stream(1234, "bench-pop", rep)
        t0 = time.perf_counter()
        out = kernels.run_population(
            np.zeros(n), 0.0, 1.0, 1e-3, drift=CONST0, sigma=CONST1,
            rate=rate_tab, rate_max=q, cdf_rows=rows, cdf_mode=mode,
            cdf_x0=cx0, cdf_dx=cdx, snap_times=np.array([0.5, 1.0]),
            rng=rng, backend=backend)
        el = time.perf_counter() - t0
        best = el if best is None else min(best, el)
    return best, out


def bench_paths(n_paths, reps, backend):
    best = None
    out = None
    for rep in range(reps):
        rng = stream(1234, "bench-path", rep)
        t0 = time.perf_counter()
        out = kernels.run_paths(
            np.zeros(n_paths), 0.0, 1.0, 1e-3, drift=CONST0, sigma=CONST1,
            domain=(-3.0, 3.0), weight_rate=CONST1, rng=rng, backend=backend)
        el = time.perf_counter() - t0
        best = el if best is None else min(best, el)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=400,
                    help="population scaling level (events scale with n^2)")
    ap.add_argument("--paths", type=int, default=2000)
    ap.add_argument("--reps", type=int, default=3)
    args = ap.parse_args()

    lanes = ["python"]
    try:
        kernels.get_impl("compiled")
        lanes.insert(0, "compiled")
    except ImportError:
        print("compiled lane unavailable; timing the Python lane only")

    print(f"{'workload':<24}{'lane':<10}{'best time':>12}{'checks':>34}")
    results = {}
    for lane in lanes:
        el, out = bench_population(args.n, args.reps, lane)
        results[("pop", lane)] = (el, out)
        print(f"{'population n=%d' % args.n:<24}{lane:<10}{el:>11.3f}s"
              f"{'events=%d steps=%d' % (out['n_events'], out['n_steps']):>34}")
    for lane in lanes:
        el, out = bench_paths(args.paths, args.reps, lane)
        results[("path", lane)] = (el, out)
        print(f"{'paths k=%d' % args.paths:<24}{lane:<10}{el:>11.3f}s"
              f"{'exited=%d' % int(out[2].sum()):>34}")

    if len(lanes) == 2:
        for tag in ("pop", "path"):
            a = results[(tag, "compiled")]
            b = results[(tag, "python")]
            if tag == "pop":
                same = all(np.array_equal(x, y) for x, y in
                           zip(a[1]["snaps"], b[1]["snaps"]))
            else:
                same = all(np.array_equal(np.asarray(x), np.asarray(y))
                           for x, y in zip(a[1], b[1]))
            print(f"{tag}: speedup x{b[0] / a[0]:.0f}, outputs identical: {same}")


if __name__ == "__main__":
    main()
