"""Diffusion motion: Euler paths, killing at domain exit, Feynman-Kac
estimators, and the survival-weighted drift transform of the backbone.

The generator is ``L = a(x) d^2/dx^2 + b(x) d/dx`` (one spatial
dimension carries all desk-scale verification; `simulate_path` also
accepts d >= 1 with matrix coefficients).  Euler increments use
``sigma = sqrt(2 a)``, exit is detected at step granularity, and the
resulting dt bias is part of every consumer's declared error budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

from . import kernels
from .fields import FieldTable, SpatialField, as_field
from .mechanism import BranchingMechanism, psi

__all__ = ["DiffusionSpec", "StoppedPath", "simulate_path", "feynman_kac",
           "w_transform", "martingale_check"]

KERNEL_FIELD_POINTS = 1025


class MotionError(RuntimeError):
    pass


@dataclass(frozen=True)
class DiffusionSpec:
    """Coefficients and habitat of the underlying diffusion.

    a, b: SpatialFields for d = 1, or callables returning a d x d matrix
    and a d-vector for d > 1.  ``domain`` is the habitat E: None for the
    whole space, or an (lo, hi) interval (the motion is killed on exit).
    ``ellipticity`` declares the constant gamma with u.a(x)u >= gamma|u|^2;
    it is spot-checked, never assumed.
    """

    a: object
    b: object
    dim: int = 1
    domain: Optional[Tuple[float, float]] = None
    ellipticity: float = 1e-6
    holder_const: float = np.inf
    holder_exp: float = 1.0

    @classmethod
    def build(cls, a, b, domain=None, ellipticity=None) -> "DiffusionSpec":
        af = as_field(a, name="motion.a")
        bf = as_field(b, name="motion.b")
        gamma = ellipticity if ellipticity is not None else max(af.lower, 1e-12)
        if af.lower < gamma:
            raise MotionError(f"uniform ellipticity fails: inf a = {af.lower:g} < {gamma:g}")
        return cls(af, bf, 1, tuple(domain) if domain else None, gamma)

    def check_ellipticity(self, xs) -> None:
        if self.dim == 1:
            av = np.asarray(self.a(xs), dtype=float)
            if av.min() < self.ellipticity - 1e-12:
                raise MotionError("ellipticity spot-check failed")
        else:
            for x in np.atleast_2d(xs):
                m = np.asarray(self.a(x))
                ev = np.linalg.eigvalsh(0.5 * (m + m.T))
                if ev.min() < self.ellipticity - 1e-12:
                    raise MotionError("ellipticity spot-check failed")

    def sigma_field(self) -> SpatialField:
        """sqrt(2 a) for the 1-d Euler scheme."""
        a = self.a
        if a.constant is not None:
            return SpatialField(math.sqrt(2.0 * a.constant), name="sigma")
        return SpatialField(lambda x: np.sqrt(2.0 * a(x)),
                            lower=math.sqrt(2.0 * max(a.lower, 0.0)),
                            upper=math.sqrt(2.0 * a.upper), name="sigma")

    def tables(self, window: Tuple[float, float]) -> Tuple[FieldTable, FieldTable]:
        """(drift, sigma) tables for the kernels, on the given window."""
        lo, hi = window
        drift = self.b.table(lo, hi, KERNEL_FIELD_POINTS) if self.b.constant is None \
            else self.b.table()
        sig = self.sigma_field()
        sigma = sig.table(lo, hi, KERNEL_FIELD_POINTS) if sig.constant is None \
            else sig.table()
        return drift, sigma


@dataclass
class StoppedPath:
    """An Euler path, stopped at domain exit when a domain is given."""

    dt: float
    times: np.ndarray
    points: np.ndarray          # (n, d)
    exit_time: float            # inf when no exit occurred within the horizon
    alive: bool

    @property
    def exit_point(self):
        return self.points[-1] if np.isfinite(self.exit_time) else None

    def position(self, t: float):
        """Linear interpolation along the recorded path (1-d only)."""
        return float(np.interp(t, self.times, self.points[:, 0]))


def _coeff_eval(spec: DiffusionSpec, x):
    if spec.dim == 1:
        a = float(spec.a(float(x[0]))) if np.ndim(x) else float(spec.a(x))
        b = float(spec.b(float(x[0]))) if np.ndim(x) else float(spec.b(x))
        return np.array([[a]]), np.array([b])
    return np.asarray(spec.a(x), dtype=float), np.asarray(spec.b(x), dtype=float)


def simulate_path(spec: DiffusionSpec, x0, horizon: float, dt: float,
                  rng: np.random.Generator, domain=None) -> StoppedPath:
    """One Euler path with full trajectory recording.

    Increments: x += b dt + sqrt(dt) * S z with S S^T = 2a (symmetric
    square root).  The first point at or beyond the domain boundary is
    recorded and the path stops there.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.atleast_1d(np.asarray(x0, dtype=float))
    d = len(x)
    dom = domain if domain is not None else spec.domain
    n_steps = int(round(horizon / dt))
    times = [0.0]
    points = [x.copy()]
    exit_time = np.inf
    t = 0.0
    for k in range(n_steps):
        h = min(dt, horizon - t)
        a, b = _coeff_eval(spec, x if d > 1 else x[0])
        if d == 1:
            s = math.sqrt(2.0 * a[0, 0])
            x = x + b * h + s * math.sqrt(h) * rng.standard_normal(1)
        else:
            evals, evecs = np.linalg.eigh(2.0 * a)
            root = evecs @ np.diag(np.sqrt(np.maximum(evals, 0.0))) @ evecs.T
            x = x + b * h + math.sqrt(h) * (root @ rng.standard_normal(d))
        t += h
        if not np.all(np.isfinite(x)):
            raise MotionError(f"numerical blow-up at step {k}, t={t:g}")
        times.append(t)
        points.append(x.copy())
        if dom is not None:
            lo, hi = dom
            if x[0] <= lo or x[0] >= hi:
                exit_time = t
                break
    return StoppedPath(dt, np.asarray(times), np.asarray(points), exit_time,
                       alive=not np.isfinite(exit_time))


def _window_for(spec, D, x, t):
    if D is not None:
        return (D[0], D[1])
    if spec.domain is not None:
        return spec.domain
    spread = 8.0 * math.sqrt(2.0 * spec.a.upper * max(t, 1e-9)) \
        + abs(spec.b.upper) * t + abs(spec.b.lower) * t
    return (x - spread - 1.0, x + spread + 1.0)


def feynman_kac(spec: DiffusionSpec, x: float, t: float, rate, payoff,
                D, n_samples: int, dt: float, rng: np.random.Generator,
                variant: str = "absorbed"):
    """Monte Carlo Feynman-Kac estimate.

    absorbed: E_x[ exp(-int_0^{t ^ tau} rate) payoff(xi_{t ^ tau}) ]
    killed:   same with the indicator {t < tau} multiplying the payoff.
    Returns (estimate, standard error).
    """
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    window = _window_for(spec, D, x, t)
    drift_tab, sigma_tab = spec.tables(window)
    rate_f = as_field(rate, name="fk.rate") if not isinstance(rate, SpatialField) else rate
    rate_tab = rate_f.table() if rate_f.constant is not None \
        else rate_f.table(window[0], window[1], KERNEL_FIELD_POINTS)
    x_end, t_end, exited, acc = kernels.run_paths(
        np.full(n_samples, float(x)), 0.0, t, dt,
        drift=drift_tab, sigma=sigma_tab, domain=D, weight_rate=rate_tab, rng=rng)
    pay = payoff(x_end) if callable(payoff) else float(payoff) * np.ones(n_samples)
    vals = np.exp(-acc) * pay
    if variant == "killed":
        vals = np.where(exited, 0.0, vals)
    elif variant != "absorbed":
        raise ValueError(variant)
    est = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0
    return est, se


def w_transform(spec: DiffusionSpec, w: SpatialField, mech=None,
                grid: Optional[np.ndarray] = None,
                drift_cap: float = 500.0) -> DiffusionSpec:
    """Backbone motion: same a, drift b + 2 a w'/w.

    w' is taken by central differences on the w grid (or an auto grid for
    closed-form w) and interpolated linearly off-grid.  The transformed
    motion is a (sub-)probability; for backbone simulation the deficit is
    deliberately not realized as killing: the decorated-process
    construction places all death-free branching in the offspring law,
    and the cross-checks of the verification layer validate that reading.

    Where the survival exponent vanishes (habitat boundary) the raw
    drift diverges; it is clipped at ``drift_cap``.  The transformed
    motion is repelled from that region, so the clip never binds along
    typical backbone paths; it only prevents Euler overshoot.
    """
    if w.lower <= 0:
        raise MotionError("survival exponent must be bounded away from 0 "
                          "(Assumption-A style validation failed)")
    if w.constant is not None:
        return spec  # gradient vanishes

    if grid is None:
        if getattr(w, "_table", None) is not None:
            tab = w._table
            grid = tab.x0 + tab.dx * np.arange(len(tab.values))
        elif spec.domain is not None:
            grid = np.linspace(spec.domain[0], spec.domain[1], 513)
        else:
            raise MotionError("need a grid to differentiate w")
    wv = np.asarray(w(grid), dtype=float)
    if wv.min() < w.lower - 1e-9:
        raise MotionError("w falls below its declared lower bound on the grid")
    grad = np.gradient(wv, grid)
    av = np.asarray(spec.a(grid), dtype=float) * np.ones_like(grid)
    bv = np.asarray(spec.b(grid), dtype=float) * np.ones_like(grid)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = bv + 2.0 * av * grad / np.maximum(wv, 1e-300)
    drift_vals = np.clip(np.nan_to_num(raw, nan=0.0, posinf=drift_cap,
                                       neginf=-drift_cap),
                         -drift_cap, drift_cap)
    drift = SpatialField.from_grid(grid, drift_vals, name="b+2a w'/w")
    return DiffusionSpec(spec.a, drift, spec.dim, spec.domain, spec.ellipticity,
                         spec.holder_const, spec.holder_exp)


def martingale_check(spec: DiffusionSpec, mech: BranchingMechanism,
                     w: SpatialField, x: float, t: float, D,
                     n_samples: int, rng: np.random.Generator, dt: float = 1e-3):
    """Estimate E[ w(xi_{t ^ tau}) exp(-int psi(xi, w(xi)) / w(xi)) ];
    the target value is w(x).  Returns (mean, standard error)."""
    if t == 0:
        return float(w(x)), 0.0
    window = _window_for(spec, D, x, t)
    drift_tab, sigma_tab = spec.tables(window)

    def chi(y):
        return psi(mech, y, np.asarray(w(y), dtype=float)) / w(y)

    if mech.is_spatially_constant and w.constant is not None:
        chi_tab = SpatialField(float(chi(0.0)), name="chi").table()
    else:
        chi_tab = SpatialField(chi, lower=-1e18, upper=1e18, name="chi").table(
            window[0], window[1], KERNEL_FIELD_POINTS)
    x_end, t_end, exited, acc = kernels.run_paths(
        np.full(n_samples, float(x)), 0.0, t, dt,
        drift=drift_tab, sigma=sigma_tab, domain=D, weight_rate=chi_tab, rng=rng)
    vals = np.asarray(w(x_end), dtype=float) * np.exp(-acc)
    return float(np.mean(vals)), float(np.std(vals, ddof=1) / math.sqrt(n_samples))
