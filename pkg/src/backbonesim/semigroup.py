"""Transition operators of the motion on a 1-d grid, for the solvers.

Three evaluation modes:

* analytic whole line (constant coefficients): dense Gaussian kernel
  matrices with constant extension beyond the grid window, row-normalized
  so that constants are propagated exactly;
* analytic killed interval (constant coefficients): Dirichlet sine
  eigenbasis with the drift handled by an exponential similarity
  transform; gives the killed semigroup, survival probabilities, and
  boundary-hit weights for absorbed (exit) data;
* Monte Carlo: an empirical transition matrix assembled from Euler path
  batches, for coefficient fields with no analytic kernel.

Providers expose ``apply(s, stack)`` plus a time-convolution helper
``window_integral`` that evaluates trapezoidal integrals
``int_0^{m dt} P_s g_{m-s} ds`` for a whole window of time levels.
"""

from __future__ import annotations

import math
from typing import Optional, Tuple

import numpy as np

from . import kernels
from .fields import SpatialField
from .motion import DiffusionSpec

__all__ = ["build_provider", "ConstantProvider", "WholeLineProvider",
           "IntervalProvider", "MonteCarloProvider"]


class Provider:
    """Base: generic window convolution in terms of apply()."""

    xs: np.ndarray
    is_killed: bool = False

    def apply(self, s: float, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def survival(self, t: float) -> np.ndarray:
        return np.ones_like(self.xs)

    def boundary_weights(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        z = np.zeros_like(self.xs)
        return z, z

    def free_term(self, t: float, g: np.ndarray, absorbed: bool) -> np.ndarray:
        out = self.apply(t, g)
        if absorbed and self.is_killed:
            h_lo, h_hi = self.boundary_weights(t)
            out = out + h_lo * g[0] + h_hi * g[-1]
        return out

    def window_integral(self, N: np.ndarray, dt: float) -> np.ndarray:
        """I[m] = trapezoid_{j=0..m} P_{j dt} N[m-j], for m = 0..len(N)-1."""
        nl = N.shape[0]
        I = np.zeros_like(N)
        I[1:] += 0.5 * dt * N[1:]                     # j = 0 (identity) endpoint
        for j in range(1, nl):
            pj = self.apply(j * dt, N[: nl - j])
            I[j:] += dt * pj
            I[j] -= 0.5 * dt * pj[0]                  # j = m endpoint halves
        if self.is_killed:
            I[:, 0] = 0.0                             # boundary mass is frozen
            I[:, -1] = 0.0
        return I


class ConstantProvider(Provider):
    """Spatially homogeneous conservative motion: P_s is the identity on
    constants, hence on everything the homogeneous solve ever sees."""

    def __init__(self, xs):
        self.xs = np.asarray(xs, dtype=float)

    def apply(self, s, g):
        return np.array(g, dtype=float, copy=True)

    def window_integral(self, N, dt):
        nl = N.shape[0]
        I = np.zeros_like(N)
        if nl == 1:
            return I
        c = np.cumsum(N, axis=0)
        for m in range(1, nl):
            I[m] = dt * (c[m] - 0.5 * N[0] - 0.5 * N[m])
        return I


class WholeLineProvider(Provider):
    """Gaussian kernel on a finite window with constant extension."""

    def __init__(self, xs, a: float, b: float):
        self.xs = np.asarray(xs, dtype=float)
        self.a = float(a)
        self.b = float(b)
        self._cache = {}
        n = len(self.xs)
        self._w = np.full(n, self.xs[1] - self.xs[0])
        self._w[0] *= 0.5
        self._w[-1] *= 0.5

    def _matrix(self, s: float) -> np.ndarray:
        key = round(s, 12)
        if key in self._cache:
            return self._cache[key]
        xs = self.xs
        sd = math.sqrt(2.0 * self.a * s)
        mean = xs + self.b * s
        z = (xs[None, :] - mean[:, None]) / sd
        K = np.exp(-0.5 * z * z) / (sd * math.sqrt(2.0 * math.pi)) * self._w[None, :]
        # constant extension: tail mass goes onto the edge values, and the
        # rows are normalized so constants propagate exactly
        from scipy.stats import norm
        tail_lo = norm.cdf((xs[0] - mean) / sd)
        tail_hi = norm.sf((xs[-1] - mean) / sd)
        K[:, 0] += tail_lo
        K[:, -1] += tail_hi
        K /= K.sum(axis=1, keepdims=True)
        self._cache[key] = K
        return K

    def apply(self, s, g):
        g = np.asarray(g, dtype=float)
        if s <= 0:
            return g.copy()
        K = self._matrix(s)
        return g @ K.T


class IntervalProvider(Provider):
    """Killed diffusion on (lo, hi), constant a and b.

    The zero-drift absorbing kernel comes from the method of images (a
    short alternating sum of Gaussians, exact to machine precision at
    desk time scales); drift enters through the exponential similarity
    transform exp(theta (y - x) - a theta^2 s) with theta = b / (2a).
    Rows are renormalized against the closed-form survival probability,
    so constants and killed mass are propagated exactly regardless of
    the spatial quadrature.
    """

    is_killed = True

    def __init__(self, xs, a: float, b: float, lo: float, hi: float,
                 n_modes: Optional[int] = None):
        self.xs = np.asarray(xs, dtype=float)
        if abs(self.xs[0] - lo) > 1e-12 or abs(self.xs[-1] - hi) > 1e-12:
            raise ValueError("grid must span the closed domain")
        self.a, self.b, self.lo, self.hi = float(a), float(b), float(lo), float(hi)
        self.L = hi - lo
        self.theta = b / (2.0 * a)
        n = len(self.xs)
        self._w = np.full(n, self.xs[1] - self.xs[0])
        self._w[0] *= 0.5
        self._w[-1] *= 0.5
        self._cache = {}
        if b == 0.0:
            self._harm = (self.xs - lo) / self.L
        else:
            r = b / a
            self._harm = (1.0 - np.exp(-r * (self.xs - lo))) / (1.0 - math.exp(-r * self.L))

    def _matrix(self, s: float) -> np.ndarray:
        key = round(s, 14)
        if key in self._cache:
            return self._cache[key]
        from scipy.stats import norm
        xs, lo, hi, L = self.xs, self.lo, self.hi, self.L
        v = 2.0 * self.a * s
        sd = math.sqrt(v)
        n_img = int(4.0 * sd / L) + 2
        ms = np.arange(-n_img, n_img + 1)
        P0 = np.zeros((len(xs), len(xs)))
        S_exact = np.zeros(len(xs))
        th = self.theta
        for m in ms:
            mu_pos = xs + 2.0 * m * L          # direct images of each source x_i
            mu_neg = 2.0 * lo - xs + 2.0 * m * L
            for sign, mu in ((1.0, mu_pos), (-1.0, mu_neg)):
                z = (xs[None, :] - mu[:, None]) / sd
                P0 += sign * np.exp(-0.5 * z * z) / (sd * math.sqrt(2.0 * math.pi))
                # closed-form int_lo^hi e^{theta y} G(y; mu, v) dy
                pref = np.exp(th * mu + 0.5 * th * th * v)
                S_exact += sign * pref * (
                    norm.cdf((hi - mu) / sd - th * sd)
                    - norm.cdf((lo - mu) / sd - th * sd))
        K = P0 * np.exp(th * (xs[None, :] - xs[:, None]) - self.a * th * th * s)
        K *= self._w[None, :]
        S_exact *= np.exp(-self.a * th * th * s - th * xs)
        S_exact = np.clip(S_exact, 0.0, 1.0)
        qsum = K.sum(axis=1)
        scale = np.where(qsum > 1e-300, S_exact / np.maximum(qsum, 1e-300), 0.0)
        K *= scale[:, None]
        self._cache[key] = K
        return K

    def apply(self, s, g):
        g = np.asarray(g, dtype=float)
        if s <= 0:
            return g.copy()
        return g @ self._matrix(s).T

    def survival(self, t):
        # deliberately unclipped: h_lo + h_hi + survival = 1 must hold
        # exactly at the discrete level for the exponent identities
        return self.apply(t, np.ones_like(self.xs))

    def boundary_weights(self, t):
        h_hi = self._harm - self.apply(t, self._harm)
        h_lo = (1.0 - self._harm) - self.apply(t, 1.0 - self._harm)
        return h_lo, h_hi


class MonteCarloProvider(Provider):
    """Empirical transition matrices from Euler path batches.

    Endpoints are scattered onto the grid with linear (cloud-in-cell)
    weights; killed mass simply drops out of the row.  Slow; intended for
    coefficient fields without an analytic kernel, at small budgets.
    """

    def __init__(self, xs, spec: DiffusionSpec, domain, n_samples: int,
                 dt: float, rng_factory):
        self.xs = np.asarray(xs, dtype=float)
        self.spec = spec
        self.domain = domain
        self.is_killed = domain is not None
        self.n_samples = int(n_samples)
        self.dt = float(dt)
        self._rng_factory = rng_factory
        self._cache = {}
        window = domain if domain is not None else (self.xs[0], self.xs[-1])
        self._tables = spec.tables(window)
        self._exit_frac = {}

    def _matrix(self, s):
        key = round(s, 12)
        if key in self._cache:
            return self._cache[key]
        n = len(self.xs)
        dx = self.xs[1] - self.xs[0]
        K = np.zeros((n, n))
        exit_lo = np.zeros(n)
        exit_hi = np.zeros(n)
        drift, sigma = self._tables
        for i, x0 in enumerate(self.xs):
            rng = self._rng_factory("mc-kernel", i, key)
            xe, te, exited, _ = kernels.run_paths(
                np.full(self.n_samples, x0), 0.0, s, min(self.dt, max(s, 1e-9)),
                drift=drift, sigma=sigma, domain=self.domain,
                weight_rate=None, rng=rng)
            alive = ~exited
            pos = np.clip((xe[alive] - self.xs[0]) / dx, 0.0, n - 1.0)
            k = np.minimum(pos.astype(int), n - 2)
            frac = pos - k
            np.add.at(K[i], k, (1.0 - frac) / self.n_samples)
            np.add.at(K[i], k + 1, frac / self.n_samples)
            if self.is_killed:
                mid = 0.5 * (self.domain[0] + self.domain[1])
                exit_lo[i] = np.mean(exited & (xe <= mid))
                exit_hi[i] = np.mean(exited & (xe > mid))
        self._cache[key] = K
        self._exit_frac[key] = (exit_lo, exit_hi)
        return K

    def apply(self, s, g):
        g = np.asarray(g, dtype=float)
        if s <= 0:
            return g.copy()
        return g @ self._matrix(s).T

    def survival(self, t):
        return self._matrix(t).sum(axis=1)

    def boundary_weights(self, t):
        self._matrix(t)
        return self._exit_frac[round(t, 12)]


def build_provider(spec: DiffusionSpec, domain, xs, mode: str = "auto",
                   mc_samples: int = 4000, mc_dt: float = 1e-3,
                   rng_factory=None, n_modes=None) -> Provider:
    """Choose the transition provider for (motion, domain, grid)."""
    const_coeff = spec.a.constant is not None and spec.b.constant is not None
    if mode == "auto":
        mode = "analytic" if const_coeff else "monte-carlo"
    if mode == "analytic":
        if not const_coeff:
            raise ValueError("analytic kernels need constant coefficients; "
                             "use monte-carlo mode")
        if domain is None:
            return WholeLineProvider(xs, spec.a.constant, spec.b.constant)
        return IntervalProvider(xs, spec.a.constant, spec.b.constant,
                                domain[0], domain[1], n_modes=n_modes)
    if mode == "monte-carlo":
        if rng_factory is None:
            raise ValueError("monte-carlo provider needs an rng factory")
        return MonteCarloProvider(xs, spec, domain, mc_samples, mc_dt, rng_factory)
    raise ValueError(mode)
