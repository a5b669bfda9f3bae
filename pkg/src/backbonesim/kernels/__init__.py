"""Kernel lane selection: compiled extension if available, else Python.

`BACKEND` reports which lane is active.  Both lanes implement the same
draw sequence and arithmetic, so results are identical; only speed
differs.  `force_backend` exists for tests and benchmarks.
"""

from __future__ import annotations

import warnings

import numpy as np

from ..fields import FieldTable

try:
    from . import _core as _impl
    BACKEND = "compiled"
except ImportError:  # extension not built
    from . import _core_py as _impl
    BACKEND = "python"
    warnings.warn("backbonesim: compiled kernels unavailable, falling back to "
                  "the pure-Python lane (slow)", RuntimeWarning)

_CONST_ZERO = FieldTable(0, 0.0, 0.0, 1.0, np.zeros(1))
_TRIVIAL_CDF = np.ones((1, 1))


def field_args(table: FieldTable | None):
    if table is None:
        table = _CONST_ZERO
    return (int(table.mode), float(table.c0), float(table.x0), float(table.dx),
            np.ascontiguousarray(table.values, dtype=np.float64))


def force_backend(name: str):
    """Rebind the active lane ('compiled' or 'python'); returns old name."""
    global _impl, BACKEND
    old = BACKEND
    if name == "compiled":
        from . import _core as _impl  # noqa: F811
    elif name == "python":
        from . import _core_py as _impl  # noqa: F811
    else:
        raise ValueError(name)
    BACKEND = name
    return old


def get_impl(backend: str | None = None):
    if backend is None:
        return _impl
    if backend == "compiled":
        from . import _core
        return _core
    if backend == "python":
        from . import _core_py
        return _core_py
    raise ValueError(backend)


def run_population(x_init, t0, t1, dt, *, drift, sigma, rate, rate_max,
                   cdf_rows, cdf_mode=0, cdf_x0=0.0, cdf_dx=1.0,
                   domain=None, snap_times=(), rng=None,
                   max_segments=100_000_000, record_exits=False,
                   abort_on_survivor=False, backend=None):
    """Branching-particle replication; see the kernel module docstring.

    drift/sigma/rate are FieldTables; `rng` is a numpy Generator whose
    bit stream the kernel consumes in place.
    """
    impl = get_impl(backend)
    has_domain = domain is not None
    lo, hi = (float(domain[0]), float(domain[1])) if has_domain else (0.0, 0.0)
    return impl.run_population(
        np.ascontiguousarray(x_init, dtype=np.float64),
        float(t0), float(t1), float(dt),
        field_args(drift), field_args(sigma), field_args(rate), float(rate_max),
        np.ascontiguousarray(cdf_rows, dtype=np.float64),
        int(cdf_mode), float(cdf_x0), float(cdf_dx),
        has_domain, lo, hi,
        np.ascontiguousarray(snap_times, dtype=np.float64),
        rng.bit_generator,
        int(max_segments), bool(record_exits), bool(abort_on_survivor))


def run_paths(x_init, t0, t1, dt, *, drift, sigma, domain=None,
              weight_rate=None, rng=None, backend=None):
    """Killed-diffusion path batch with a rate functional accumulator."""
    impl = get_impl(backend)
    has_domain = domain is not None
    lo, hi = (float(domain[0]), float(domain[1])) if has_domain else (0.0, 0.0)
    return impl.run_paths(
        np.ascontiguousarray(x_init, dtype=np.float64),
        float(t0), float(t1), float(dt),
        field_args(drift), field_args(sigma),
        has_domain, lo, hi,
        field_args(weight_rate),
        rng.bit_generator)
