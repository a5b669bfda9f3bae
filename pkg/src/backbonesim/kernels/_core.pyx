# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled simulation kernels.

`run_population` advances a branching particle population: Euler motion
at step dt, branch events by exponential thinning against a dominating
rate, offspring counts from a (possibly space-dependent) CDF table,
children placed at the death location.  Particles are processed
depth-first, one line of descent at a time, so memory stays small even
for large trees and an early abort is possible the moment any line
survives to the horizon.

`run_paths` advances independent killed-diffusion paths and accumulates
a rate functional along each (left-endpoint quadrature).

The pure-Python mirror in `_core_py.py` consumes the underlying bit
stream in exactly the same order with exactly the same arithmetic; any
change to the draw sequence here must be mirrored there.
"""

import numpy as np

cimport numpy as cnp
from cpython.pycapsule cimport PyCapsule_GetPointer, PyCapsule_IsValid
from libc.math cimport floor, sqrt
from numpy.random cimport bitgen_t
from numpy.random.c_distributions cimport (random_standard_exponential,
                                           random_standard_normal,
                                           random_standard_uniform)

cnp.import_array()

cdef double INF = np.inf


cdef inline double _feval(int mode, double c0, double f_x0, double f_dx,
                          const double[::1] vals, double x):
    """Field evaluation: constant, or clamped linear interpolation."""
    cdef Py_ssize_t nv, k
    cdef double pos, frac
    if mode == 0:
        return c0
    nv = vals.shape[0]
    pos = (x - f_x0) / f_dx
    if pos <= 0.0:
        return vals[0]
    if pos >= nv - 1.0:
        return vals[nv - 1]
    k = <Py_ssize_t> floor(pos)
    if k > nv - 2:
        k = nv - 2
    frac = pos - k
    return vals[k] + frac * (vals[k + 1] - vals[k])


cdef inline double _cdf_at(const double[:, ::1] rows, int row_mode, double row_x0,
                           double row_dx, double x, Py_ssize_t k):
    """Offspring CDF at count k, spatially interpolated between rows."""
    cdef Py_ssize_t m, r
    cdef double pos, frac
    if row_mode == 0:
        return rows[0, k]
    m = rows.shape[0]
    pos = (x - row_x0) / row_dx
    if pos <= 0.0:
        return rows[0, k]
    if pos >= m - 1.0:
        return rows[m - 1, k]
    r = <Py_ssize_t> floor(pos)
    if r > m - 2:
        r = m - 2
    frac = pos - r
    return rows[r, k] + frac * (rows[r + 1, k] - rows[r, k])


cdef inline Py_ssize_t _sample_offspring(const double[:, ::1] rows, int row_mode,
                                         double row_x0, double row_dx, double x,
                                         double u):
    """Smallest k with CDF(k) >= u * CDF(K); binary search."""
    cdef Py_ssize_t lo = 0, hi = rows.shape[1] - 1, mid
    cdef double target = u * _cdf_at(rows, row_mode, row_x0, row_dx, x, hi)
    while lo < hi:
        mid = (lo + hi) // 2
        if _cdf_at(rows, row_mode, row_x0, row_dx, x, mid) >= target:
            hi = mid
        else:
            lo = mid + 1
    return lo


cdef bitgen_t *_get_bitgen(object bit_generator) except NULL:
    capsule = bit_generator.capsule
    if not PyCapsule_IsValid(capsule, "BitGenerator"):
        raise ValueError("invalid BitGenerator capsule")
    return <bitgen_t *> PyCapsule_GetPointer(capsule, "BitGenerator")


def run_population(cnp.ndarray[cnp.float64_t, ndim=1] x_init,
                   double t0, double t1, double dt,
                   drift, sigma, rate, double rate_max,
                   cnp.ndarray[cnp.float64_t, ndim=2] cdf_rows,
                   int cdf_mode, double cdf_x0, double cdf_dx,
                   bint has_domain, double dom_lo, double dom_hi,
                   cnp.ndarray[cnp.float64_t, ndim=1] snap_times,
                   object bit_generator,
                   long max_segments=100000000,
                   bint record_exits=False,
                   bint abort_on_survivor=False):
    """Simulate one branching-particle replication; see module docstring.

    drift, sigma, rate: field tuples ``(mode, c0, x0, dx, values)``.
    Returns a dict of snapshot position arrays, exit atoms, counters.
    """
    cdef bitgen_t *bg = _get_bitgen(bit_generator)

    cdef int dr_m = drift[0]
    cdef double dr_c = drift[1], dr_x0 = drift[2], dr_dx = drift[3]
    cdef double[::1] dr_v = drift[4]
    cdef int sg_m = sigma[0]
    cdef double sg_c = sigma[1], sg_x0 = sigma[2], sg_dx = sigma[3]
    cdef double[::1] sg_v = sigma[4]
    cdef int rt_m = rate[0]
    cdef double rt_c = rate[1], rt_x0 = rate[2], rt_dx = rate[3]
    cdef double[::1] rt_v = rate[4]
    cdef double[:, ::1] rows = cdf_rows
    cdef double[::1] snaps = snap_times
    cdef Py_ssize_t nsnap = snap_times.shape[0]

    # explicit DFS stack (grown on demand)
    cdef Py_ssize_t cap = 1024
    if x_init.shape[0] + 8 > cap:
        cap = x_init.shape[0] + 1024
    sx_arr = np.empty(cap, dtype=np.float64)
    st_arr = np.empty(cap, dtype=np.float64)
    si_arr = np.empty(cap, dtype=np.int64)
    cdef double[::1] sx = sx_arr
    cdef double[::1] st = st_arr
    cdef long[::1] si = si_arr

    cdef Py_ssize_t isnap0 = 0
    while isnap0 < nsnap and snaps[isnap0] <= t0:
        isnap0 += 1

    cdef Py_ssize_t sp = 0, i
    for i in range(x_init.shape[0] - 1, -1, -1):  # pop order = input order
        sx[sp] = x_init[i]
        st[sp] = t0
        si[sp] = isnap0
        sp += 1

    snap_bufs = [np.empty(256, dtype=np.float64) for _ in range(nsnap)]
    snap_n = np.zeros(nsnap, dtype=np.int64)
    cdef long[::1] snap_n_v = snap_n
    exit_x_buf = np.empty(256, dtype=np.float64)
    exit_t_buf = np.empty(256, dtype=np.float64)
    cdef Py_ssize_t exit_n = 0

    cdef long n_segments = 0, n_events = 0, n_steps = 0
    cdef bint censored = False, survivor = False
    cdef double extinction_time = t0
    cdef long n_alive_end = 0

    cdef double x, t, tcand, tnext, h, z, u, ex
    cdef Py_ssize_t isnap, k
    cdef bint dead
    cdef double[::1] buf_v

    while sp > 0:
        sp -= 1
        x = sx[sp]
        t = st[sp]
        isnap = si[sp]
        n_segments += 1
        if n_segments > max_segments:
            censored = True
            break

        while True:  # one life segment between branch events
            if rate_max > 0.0:
                tcand = t + random_standard_exponential(bg) / rate_max
            else:
                tcand = INF
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
                z = random_standard_normal(bg)
                x = x + _feval(dr_m, dr_c, dr_x0, dr_dx, dr_v, x) * h \
                      + _feval(sg_m, sg_c, sg_x0, sg_dx, sg_v, x) * sqrt(h) * z
                t = tnext
                n_steps += 1
                if has_domain and (x <= dom_lo or x >= dom_hi):
                    if record_exits:
                        if exit_n >= exit_x_buf.shape[0]:
                            exit_x_buf = np.resize(exit_x_buf, 2 * exit_n)
                            exit_t_buf = np.resize(exit_t_buf, 2 * exit_n)
                        exit_x_buf[exit_n] = x
                        exit_t_buf[exit_n] = t
                        exit_n += 1
                    if t > extinction_time:
                        extinction_time = t
                    dead = True
                    break
                if isnap < nsnap and t == snaps[isnap]:
                    buf = snap_bufs[isnap]
                    if snap_n_v[isnap] >= buf.shape[0]:
                        buf = np.resize(buf, 2 * snap_n_v[isnap])
                        snap_bufs[isnap] = buf
                    buf_v = buf
                    buf_v[snap_n_v[isnap]] = x
                    snap_n_v[isnap] += 1
                    isnap += 1
                if t == t1:
                    n_alive_end += 1
                    if abort_on_survivor:
                        survivor = True
                    dead = True  # segment ends at horizon
                    break
                if t == tcand:
                    break
            if dead:
                break
            # candidate event reached: thinning
            u = random_standard_uniform(bg)
            if u * rate_max <= _feval(rt_m, rt_c, rt_x0, rt_dx, rt_v, x):
                n_events += 1
                u = random_standard_uniform(bg)
                k = _sample_offspring(rows, cdf_mode, cdf_x0, cdf_dx, x, u)
                if k == 0:
                    if t > extinction_time:
                        extinction_time = t
                    break
                if sp + k >= sx_arr.shape[0]:
                    newcap = 2 * (sp + k) + 64
                    sx_arr = np.resize(sx_arr, newcap)
                    st_arr = np.resize(st_arr, newcap)
                    si_arr = np.resize(si_arr, newcap)
                    sx = sx_arr
                    st = st_arr
                    si = si_arr
                for i in range(k - 1):  # continue in place as the first child
                    sx[sp] = x
                    st[sp] = t
                    si[sp] = isnap
                    sp += 1
            # rejected candidate or continuing as first child: new clock
        if survivor:
            break

    return {
        "snaps": [snap_bufs[j][: snap_n[j]].copy() for j in range(nsnap)],
        "exit_x": exit_x_buf[:exit_n].copy(),
        "exit_t": exit_t_buf[:exit_n].copy(),
        "n_segments": int(n_segments),
        "n_events": int(n_events),
        "n_steps": int(n_steps),
        "n_alive_end": int(n_alive_end),
        "censored": bool(censored),
        "survivor_found": bool(survivor),
        "extinction_time": float(extinction_time),
    }


def run_paths(cnp.ndarray[cnp.float64_t, ndim=1] x_init,
              double t0, double t1, double dt,
              drift, sigma,
              bint has_domain, double dom_lo, double dom_hi,
              weight_rate, object bit_generator):
    """Independent Euler paths killed at the domain boundary.

    Returns (x_end, t_end, exited, acc) where acc is the left-endpoint
    quadrature of the weight_rate field along each path.
    """
    cdef bitgen_t *bg = _get_bitgen(bit_generator)

    cdef int dr_m = drift[0]
    cdef double dr_c = drift[1], dr_x0 = drift[2], dr_dx = drift[3]
    cdef double[::1] dr_v = drift[4]
    cdef int sg_m = sigma[0]
    cdef double sg_c = sigma[1], sg_x0 = sigma[2], sg_dx = sigma[3]
    cdef double[::1] sg_v = sigma[4]
    cdef int wr_m = weight_rate[0]
    cdef double wr_c = weight_rate[1], wr_x0 = weight_rate[2], wr_dx = weight_rate[3]
    cdef double[::1] wr_v = weight_rate[4]

    cdef Py_ssize_t n = x_init.shape[0], i
    x_end = np.empty(n, dtype=np.float64)
    t_end = np.empty(n, dtype=np.float64)
    exited = np.zeros(n, dtype=np.uint8)
    acc = np.zeros(n, dtype=np.float64)
    cdef double[::1] xe = x_end
    cdef double[::1] te = t_end
    cdef unsigned char[::1] ex = exited
    cdef double[::1] ac = acc

    cdef double x, t, tnext, h, z, a
    for i in range(n):
        x = x_init[i]
        t = t0
        a = 0.0
        while t < t1:
            tnext = t + dt
            if t1 < tnext:
                tnext = t1
            h = tnext - t
            a += _feval(wr_m, wr_c, wr_x0, wr_dx, wr_v, x) * h
            z = random_standard_normal(bg)
            x = x + _feval(dr_m, dr_c, dr_x0, dr_dx, dr_v, x) * h \
                  + _feval(sg_m, sg_c, sg_x0, sg_dx, sg_v, x) * sqrt(h) * z
            t = tnext
            if has_domain and (x <= dom_lo or x >= dom_hi):
                ex[i] = 1
                break
        xe[i] = x
        te[i] = t
        ac[i] = a
    return x_end, t_end, np.asarray(exited, dtype=bool), acc
