"""Pure-Python mirror of the compiled kernels.

Selected automatically when the C extension is unavailable.  Consumes
the generator's bit stream in exactly the same order, with the same
scalar arithmetic, as `_core.pyx`; the test suite asserts bit-identical
output between the two lanes.  Orders of magnitude slower on large
populations (see benchmarks/bench_kernels.py), so the install warns when
this lane is active.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = ["run_population", "run_paths"]


def _feval(mode, c0, f_x0, f_dx, vals, x):
    if mode == 0:
        return c0
    nv = len(vals)
    pos = (x - f_x0) / f_dx
    if pos <= 0.0:
        return vals[0]
    if pos >= nv - 1.0:
        return vals[nv - 1]
    k = int(math.floor(pos))
    if k > nv - 2:
        k = nv - 2
    frac = pos - k
    return vals[k] + frac * (vals[k + 1] - vals[k])


def _cdf_at(rows, row_mode, row_x0, row_dx, x, k):
    if row_mode == 0:
        return rows[0, k]
    m = rows.shape[0]
    pos = (x - row_x0) / row_dx
    if pos <= 0.0:
        return rows[0, k]
    if pos >= m - 1.0:
        return rows[m - 1, k]
    r = int(math.floor(pos))
    if r > m - 2:
        r = m - 2
    frac = pos - r
    return rows[r, k] + frac * (rows[r + 1, k] - rows[r, k])


def _sample_offspring(rows, row_mode, row_x0, row_dx, x, u):
    lo, hi = 0, rows.shape[1] - 1
    target = u * _cdf_at(rows, row_mode, row_x0, row_dx, x, hi)
    while lo < hi:
        mid = (lo + hi) // 2
        if _cdf_at(rows, row_mode, row_x0, row_dx, x, mid) >= target:
            hi = mid
        else:
            lo = mid + 1
    return lo


def _gen(bit_generator):
    return np.random.Generator(bit_generator)


def run_population(x_init, t0, t1, dt, drift, sigma, rate, rate_max,
                   cdf_rows, cdf_mode, cdf_x0, cdf_dx,
                   has_domain, dom_lo, dom_hi, snap_times, bit_generator,
                   max_segments=100000000, record_exits=False,
                   abort_on_survivor=False):
    rng = _gen(bit_generator)
    dr_m, dr_c, dr_x0, dr_dx, dr_v = drift
    sg_m, sg_c, sg_x0, sg_dx, sg_v = sigma
    rt_m, rt_c, rt_x0, rt_dx, rt_v = rate
    rows = cdf_rows
    snaps = snap_times
    nsnap = len(snaps)

    isnap0 = 0
    while isnap0 < nsnap and snaps[isnap0] <= t0:
        isnap0 += 1

    stack = [(float(x_init[i]), t0, isnap0) for i in range(len(x_init) - 1, -1, -1)]
    snap_out = [[] for _ in range(nsnap)]
    exit_x, exit_t = [], []

    n_segments = n_events = n_steps = n_alive_end = 0
    censored = survivor = False
    extinction_time = t0

    while stack:
        x, t, isnap = stack.pop()
        n_segments += 1
        if n_segments > max_segments:
            censored = True
            break

        alive = True
        while alive:
            if rate_max > 0.0:
                tcand = t + rng.standard_exponential() / rate_max
            else:
                tcand = math.inf
            dead = False
            while True:
                tnext = t + dt
                if t1 < tnext:
                    tnext = t1
                if tcand < tnext:
                    tnext = tcand
                if isnap < nsnap and snaps[isnap] < tnext:
                    tnext = snaps[isnap]
                h = tnext - t
                z = rng.standard_normal()
                x = x + _feval(dr_m, dr_c, dr_x0, dr_dx, dr_v, x) * h \
                      + _feval(sg_m, sg_c, sg_x0, sg_dx, sg_v, x) * math.sqrt(h) * z
                t = tnext
                n_steps += 1
                if has_domain and (x <= dom_lo or x >= dom_hi):
                    if record_exits:
                        exit_x.append(x)
                        exit_t.append(t)
                    if t > extinction_time:
                        extinction_time = t
                    dead = True
                    break
                if isnap < nsnap and t == snaps[isnap]:
                    snap_out[isnap].append(x)
                    isnap += 1
                if t == t1:
                    n_alive_end += 1
                    if abort_on_survivor:
                        survivor = True
                    dead = True
                    break
                if t == tcand:
                    break
            if dead:
                break
            u = rng.random()
            if u * rate_max <= _feval(rt_m, rt_c, rt_x0, rt_dx, rt_v, x):
                n_events += 1
                u = rng.random()
                k = _sample_offspring(rows, cdf_mode, cdf_x0, cdf_dx, x, u)
                if k == 0:
                    if t > extinction_time:
                        extinction_time = t
                    break
                for _ in range(k - 1):
                    stack.append((x, t, isnap))
        if survivor:
            break

    return {
        "snaps": [np.asarray(s, dtype=np.float64) for s in snap_out],
        "exit_x": np.asarray(exit_x, dtype=np.float64),
        "exit_t": np.asarray(exit_t, dtype=np.float64),
        "n_segments": int(n_segments),
        "n_events": int(n_events),
        "n_steps": int(n_steps),
        "n_alive_end": int(n_alive_end),
        "censored": bool(censored),
        "survivor_found": bool(survivor),
        "extinction_time": float(extinction_time),
    }


def run_paths(x_init, t0, t1, dt, drift, sigma, has_domain, dom_lo, dom_hi,
              weight_rate, bit_generator):
    rng = _gen(bit_generator)
    dr_m, dr_c, dr_x0, dr_dx, dr_v = drift
    sg_m, sg_c, sg_x0, sg_dx, sg_v = sigma
    wr_m, wr_c, wr_x0, wr_dx, wr_v = weight_rate

    n = len(x_init)
    x_end = np.empty(n)
    t_end = np.empty(n)
    exited = np.zeros(n, dtype=bool)
    acc = np.zeros(n)

    for i in range(n):
        x = float(x_init[i])
        t = t0
        a = 0.0
        while t < t1:
            tnext = t + dt
            if t1 < tnext:
                tnext = t1
            h = tnext - t
            a += _feval(wr_m, wr_c, wr_x0, wr_dx, wr_v, x) * h
            z = rng.standard_normal()
            x = x + _feval(dr_m, dr_c, dr_x0, dr_dx, dr_v, x) * h \
                  + _feval(sg_m, sg_c, sg_x0, sg_dx, sg_v, x) * math.sqrt(h) * z
            t = tnext
            if has_domain and (x <= dom_lo or x >= dom_hi):
                exited[i] = True
                break
        x_end[i] = x
        t_end[i] = t
        acc[i] = a
    return x_end, t_end, exited, acc
