"""Spatially dependent branching mechanisms and everything derived from them.

The central object is ``psi(x, lam) = -alpha(x)*lam + beta(x)*lam**2 +
integral (exp(-lam*z) - 1 + lam*z) pi(x, dz)``, with ``alpha`` and
``beta >= 0`` bounded fields and ``pi`` a jump measure on (0, inf) with
bounded integral of ``z ^ z**2``.  From it we derive:

* the mechanism conditioned on extinction (shift of the argument by the
  survival exponent w, with re-weighted jump measure),
* the backbone branch rate q, offspring distribution ``p_n`` (no death,
  no single offspring), and the branch-point mass law,
* the rate/offspring law of the high-density particle approximation at
  scaling level n, obtained by expanding the jump part of the rescaled
  generator into Poisson generating-function coefficients.

Jump measures are restricted to two machine-checkable variants: a finite
list of atoms, or a density reduced to user-supplied quadrature nodes
with a declared tail certificate.  Every integral is then a finite sum
with an explicit error budget.

All objects are immutable after construction; samplers take the caller's
Generator, so concurrent use is safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special

from .fields import FieldTable, SpatialField, as_field

__all__ = [
    "LevyMeasureSpec", "BranchingMechanism", "OffspringLaw", "BackboneBranchingLaw",
    "psi", "psi_prime", "psi_shifted", "conditioned_mechanism", "phi",
    "backbone_rate", "offspring_pmf", "branch_mass_sampler", "backbone_law",
    "particle_law", "scaled_branch_law", "tilted_cumulant", "discontinuous_rate",
]

DEFAULT_NMAX = 64
PMF_TAIL_TOL = 1e-8


class MechanismError(ValueError):
    """Configuration or internal-consistency failure in mechanism algebra."""


@dataclass(frozen=True)
class LevyMeasureSpec:
    """Jump measure pi(x, dz), concentrated on (0, inf).

    ``atoms`` is a list of (z_i, c_i) pairs: a point mass of size z_i > 0
    with spatial weight field c_i(x) >= 0.  A density variant is lowered
    to the same representation by quadrature: ``c_i = density * weight``
    at each node, plus ``tail_bound`` certifying the neglected mass of
    integral z ^ z**2 beyond the nodes.
    """

    sizes: np.ndarray = field(default_factory=lambda: np.empty(0))
    weights: tuple = ()
    tail_bound: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "sizes", np.asarray(self.sizes, dtype=float))
        if len(self.sizes) != len(self.weights):
            raise MechanismError("jump measure: sizes and weight fields mismatch")
        if np.any(self.sizes <= 0):
            raise MechanismError("jump measure: atom sizes must be positive")
        for w in self.weights:
            if w.lower < 0:
                raise MechanismError(f"jump measure: weight field {w.name} may be negative")
        # standing assumption: integral of (z ^ z**2) pi(x, dz) bounded
        z = self.sizes
        bound = sum(w.upper * min(zi, zi * zi) for zi, w in zip(z, self.weights))
        if not np.isfinite(bound):
            raise MechanismError("jump measure: integral of z ^ z**2 unbounded")

    @classmethod
    def empty(cls) -> "LevyMeasureSpec":
        return cls()

    @classmethod
    def from_atoms(cls, atoms) -> "LevyMeasureSpec":
        """atoms: iterable of (z, c) with c a constant or SpatialField."""
        sizes = [a[0] for a in atoms]
        weights = tuple(as_field(a[1], name=f"pi.c[z={a[0]:g}]") for a in atoms)
        return cls(np.asarray(sizes, float), weights)

    @classmethod
    def from_density(cls, density, z_nodes, z_weights, tail_bound=0.0,
                     lower=0.0, upper=np.inf) -> "LevyMeasureSpec":
        """Quadrature reduction of a density kernel (x, z) -> rate."""
        z_nodes = np.asarray(z_nodes, float)
        z_weights = np.asarray(z_weights, float)
        weights = tuple(
            SpatialField(lambda x, z=z, w=w: w * density(x, z),
                         lower=lower, upper=upper, name=f"pi.dens[z={z:g}]")
            for z, w in zip(z_nodes, z_weights))
        return cls(z_nodes, weights, tail_bound=float(tail_bound))

    @property
    def is_empty(self) -> bool:
        return len(self.sizes) == 0

    def weights_at(self, x):
        """Stacked weights c_i(x); shape (n_atoms,) + shape(x)."""
        return np.array([w(x) for w in self.weights])


@dataclass(frozen=True)
class BranchingMechanism:
    """The triple (alpha, beta, pi) defining psi(x, lam)."""

    alpha: SpatialField
    beta: SpatialField
    pi: LevyMeasureSpec

    def __post_init__(self):
        if self.beta.lower < 0:
            raise MechanismError("beta must be nonnegative")

    @classmethod
    def build(cls, alpha, beta, pi=None) -> "BranchingMechanism":
        return cls(as_field(alpha, name="alpha"), as_field(beta, name="beta"),
                   pi if pi is not None else LevyMeasureSpec.empty())

    @property
    def is_spatially_constant(self) -> bool:
        return (self.alpha.constant is not None and self.beta.constant is not None
                and all(w.constant is not None for w in self.pi.weights))


def _check_lam(lam):
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise MechanismError("negative branching-mechanism argument (caller bug)")
    return lam


def psi(mech: BranchingMechanism, x, lam):
    """Evaluate the branching mechanism.  Vectorized over x and lam."""
    lam = _check_lam(lam)
    out = -mech.alpha(x) * lam + mech.beta(x) * lam * lam
    for z, w in zip(mech.pi.sizes, mech.pi.weights):
        out = out + w(x) * (np.exp(-lam * z) - 1.0 + lam * z)
    if not np.all(np.isfinite(out)):
        raise MechanismError("psi evaluated non-finite (unbounded coefficients?)")
    return out


def psi_prime(mech: BranchingMechanism, x, lam):
    """d psi / d lam.  Vectorized."""
    lam = _check_lam(lam)
    out = -mech.alpha(x) + 2.0 * mech.beta(x) * lam
    for z, w in zip(mech.pi.sizes, mech.pi.weights):
        out = out + w(x) * (1.0 - np.exp(-lam * z)) * z
    return out


def psi_shifted(mech: BranchingMechanism, w: SpatialField, x, lam):
    """The conditioned mechanism psi(x, lam + w(x)) - psi(x, w(x)).

    Defined for lam >= -w(x) (both evaluation points stay nonnegative),
    which is exactly the range the joint backbone functional needs.
    """
    wv = w(x)
    lam = np.asarray(lam, dtype=float)
    if np.any(lam + wv < -1e-12):
        raise MechanismError("shifted mechanism argument below -w(x)")
    return psi(mech, x, np.maximum(lam + wv, 0.0)) - psi(mech, x, wv)


def conditioned_mechanism(mech: BranchingMechanism, w: SpatialField) -> BranchingMechanism:
    """Mechanism of the process conditioned on extinction.

    Same beta; drift coefficient shifted by the derivative of the jump
    and quadratic parts at w; jump measure exponentially discounted.
    Requires w > 0 (its declared lower bound enforces Assumption (A)
    style positivity on the habitat of interest).
    """
    if w.lower <= 0:
        raise MechanismError("conditioning requires w bounded away from 0")

    a, b = mech.alpha, mech.beta
    sizes, weights = mech.pi.sizes, mech.pi.weights

    def alpha_star(x, _a=a, _b=b, _w=w):
        out = _a(x) - 2.0 * _b(x) * _w(x)
        for z, c in zip(sizes, weights):
            out = out - c(x) * (1.0 - np.exp(-_w(x) * z)) * z
        return out

    jump_up = sum(c.upper * min(z, z * z) * max(z, 1.0) for z, c in zip(sizes, weights))
    lo = a.lower - 2.0 * b.upper * w.upper - jump_up * (1.0 + w.upper)
    star_alpha = SpatialField(alpha_star, lower=lo, upper=a.upper, name="alpha*")

    star_weights = tuple(
        SpatialField(lambda x, c=c, z=z: c(x) * np.exp(-w(x) * z),
                     lower=0.0, upper=c.upper * float(np.exp(-w.lower * z)),
                     name=f"{c.name}*")
        for z, c in zip(sizes, weights))
    star_pi = LevyMeasureSpec(sizes.copy(), star_weights, tail_bound=mech.pi.tail_bound)
    return BranchingMechanism(star_alpha, b, star_pi)


def phi(mech: BranchingMechanism, w: SpatialField, x, lam):
    """Immigration intensity functional: 2*beta*lam plus the jump part
    (1 - exp(-lam z)) z, taken against the w-discounted jump measure.

    The discounting matches the combined exponent that the conditional
    immigration identity actually integrates; with it the branch-point
    cumulant identity below is exact.
    """
    lam = _check_lam(lam)
    out = 2.0 * mech.beta(x) * lam
    wv = w(x)
    for z, c in zip(mech.pi.sizes, mech.pi.weights):
        out = out + c(x) * z * np.exp(-wv * z) * (1.0 - np.exp(-lam * z))
    return out


def backbone_rate(mech: BranchingMechanism, w: SpatialField, x):
    """Backbone branch rate q(x), via the manifestly nonnegative form
    beta*w + (1/w) * integral (1 - exp(-w z)(1 + w z)) pi(dz).

    Cross-checked against psi'(x, w) - psi(x, w)/w to 1e-10.
    """
    wv = np.asarray(w(x), dtype=float)
    if np.any(wv <= 0):
        raise MechanismError("backbone rate needs w > 0")
    q = mech.beta(x) * wv
    for z, c in zip(mech.pi.sizes, mech.pi.weights):
        q = q + c(x) * (1.0 - np.exp(-wv * z) * (1.0 + wv * z)) / wv
    alt = psi_prime(mech, x, wv) - psi(mech, x, wv) / wv
    if np.any(np.abs(q - alt) > 1e-10 * (1.0 + np.abs(q))):
        raise MechanismError("backbone rate: the two defining formulas disagree")
    if np.any(q < -1e-12):
        raise MechanismError("backbone rate negative beyond tolerance")
    return np.maximum(q, 0.0)


@dataclass(frozen=True)
class OffspringLaw:
    """Truncated offspring pmf at one location: probs[k] = p_k, k=0..N_max."""

    probs: np.ndarray
    tail_bound: float

    @property
    def n_max(self) -> int:
        return len(self.probs) - 1

    def mean(self) -> float:
        return float(np.dot(np.arange(len(self.probs)), self.probs))

    def cdf(self) -> np.ndarray:
        return np.cumsum(self.probs)


def _poisson_upper_tail(rate: float, n: int) -> float:
    """P(Poisson(rate) > n), exact via the regularized incomplete gamma."""
    if rate <= 0:
        return 0.0
    return float(special.gammainc(n + 1, rate))


def offspring_pmf(mech: BranchingMechanism, w: SpatialField, x,
                  n_max: int = DEFAULT_NMAX, tail_tol: float = PMF_TAIL_TOL) -> OffspringLaw:
    """Backbone offspring distribution at x: p_0 = p_1 = 0 and for n >= 2

    p_n = [beta w^2 1{n=2} + w^n * integral (y^n / n!) e^{-w y} pi(dy)] / (w q).

    The retained support is renormalized; ``tail_bound`` certifies the
    discarded mass (exact Poisson tails for atomic jump measures).
    """
    wv = float(w(x))
    q = float(backbone_rate(mech, w, x))
    if q <= 0:
        raise MechanismError("offspring pmf undefined where q = 0")
    wq = wv * q

    # sum_{n>N} (w z)^n / n! * e^{-w z} is exactly the Poisson upper tail
    tail = sum(float(c(x)) * _poisson_upper_tail(wv * z, n_max)
               for z, c in zip(mech.pi.sizes, mech.pi.weights)) / wq
    if tail > tail_tol:
        need = n_max
        while need < 100000:
            need *= 2
            t = sum(float(c(x)) * _poisson_upper_tail(wv * z, need)
                    for z, c in zip(mech.pi.sizes, mech.pi.weights)) / wq
            if t <= tail_tol:
                break
        raise MechanismError(
            f"offspring tail {tail:.2e} > {tail_tol:.0e} at N_max={n_max}; need about {need}")

    probs = np.zeros(n_max + 1)
    probs[2] = mech.beta(x) * wv * wv / wq
    ns = np.arange(2, n_max + 1)
    logfact = special.gammaln(ns + 1)
    for z, c in zip(mech.pi.sizes, mech.pi.weights):
        probs[2:] += float(c(x)) * np.exp(ns * np.log(wv * z) - wv * z - logfact) / wq
    if probs.min() < -1e-12:
        raise MechanismError("negative offspring probability")
    total = probs.sum()
    if not (1.0 - tail - 1e-9 <= total <= 1.0 + 1e-9):
        raise MechanismError(f"offspring pmf sums to {total:.12f}, tail {tail:.2e}")
    return OffspringLaw(probs / total, tail)


def branch_mass_sampler(mech: BranchingMechanism, w: SpatialField, x, n: int,
                        rng: np.random.Generator) -> float:
    """Draw the immigration mass attached to a branch point with n offspring.

    With probability beta w^2 1{n=2} / (q w p_n) the mass is zero (the
    quadratic part of the branch), otherwise it is drawn from the jump
    sizes weighted by (w y)^n / n! * e^{-w y} pi(dy).
    """
    if n < 2:
        raise MechanismError("branch points have at least two offspring")
    wv = float(w(x))
    quad = float(mech.beta(x)) * wv * wv if n == 2 else 0.0
    zs = mech.pi.sizes
    atom_wt = np.array([float(c(x)) * np.exp(n * np.log(wv * z) - wv * z - special.gammaln(n + 1))
                        for z, c in zip(zs, mech.pi.weights)])
    total = quad + atom_wt.sum()
    if total <= 0:
        raise MechanismError(f"branch mass law undefined: p_{n}(x) = 0 here")
    u = rng.random() * total
    if u < quad:
        return 0.0
    u -= quad
    acc = 0.0
    for z, wt in zip(zs, atom_wt):
        acc += wt
        if u <= acc:
            return float(z)
    return float(zs[-1])


def branch_mass_mean(mech: BranchingMechanism, w: SpatialField, x, n: int) -> float:
    """Mean of the branch-point mass law (direct numerical integral)."""
    wv = float(w(x))
    quad = float(mech.beta(x)) * wv * wv if n == 2 else 0.0
    atom_wt = np.array([float(c(x)) * np.exp(n * np.log(wv * z) - wv * z - special.gammaln(n + 1))
                        for z, c in zip(mech.pi.sizes, mech.pi.weights)])
    total = quad + atom_wt.sum()
    if total <= 0:
        raise MechanismError(f"branch mass law undefined: p_{n}(x) = 0 here")
    return float(np.dot(mech.pi.sizes, atom_wt) / total)


@dataclass(frozen=True)
class BackboneBranchingLaw:
    """Branch rate, offspring pmf rule, and branch-mass sampler of the backbone."""

    mech: BranchingMechanism
    w: SpatialField
    q: SpatialField
    n_max: int
    tail_bound: float

    def offspring(self, x) -> OffspringLaw:
        return offspring_pmf(self.mech, self.w, x, self.n_max)

    def sample_mass(self, x, n: int, rng: np.random.Generator) -> float:
        return branch_mass_sampler(self.mech, self.w, x, n, rng)


def backbone_law(mech: BranchingMechanism, w: SpatialField,
                 n_max: int = DEFAULT_NMAX) -> BackboneBranchingLaw:
    """Assemble the backbone branching law (rate field + pmf + mass law)."""
    def qf(x):
        return backbone_rate(mech, w, x)

    if mech.is_spatially_constant and w.constant is not None:
        qc = float(backbone_rate(mech, w, 0.0))
        q = SpatialField(qc, name="q")
        tail = offspring_pmf(mech, w, 0.0, n_max).tail_bound
    else:
        # conservative sup bound for thinning: 1 - e^{-u}(1+u) <= min(1, u^2/2)
        jump_up = sum(c.upper * min(1.0, 0.5 * (w.upper * z) ** 2) / w.lower
                      for z, c in zip(mech.pi.sizes, mech.pi.weights))
        q = SpatialField(qf, lower=0.0,
                         upper=mech.beta.upper * w.upper + jump_up, name="q")
        tail = 0.0
    return BackboneBranchingLaw(mech, w, q, n_max, tail)


# ---------------------------------------------------------------------------
# High-density particle approximation
# ---------------------------------------------------------------------------

def particle_law(mech: BranchingMechanism, n: int, k_max: Optional[int] = None):
    """Rate and offspring pmf of the rescaled particle system at level n.

    The rescaled generator (1/n) * [psi(x, n(1-s)) + alpha(x) n(1-s)]
    is a branching generator: expanding exp(-n(1-s)z) as a Poisson(nz)
    generating function and collecting powers of s gives

        rate  q_n(x)    = 2 beta n + integral (1 - e^{-nz}) z pi(dz)
        q_n p_k^{(n)}   = [beta n^2 (1{k=0} + 1{k=2})
                           + integral e^{-nz} (nz)^k / k! pi(dz)
                           + 1{k=0} integral (e^{-nz} - 1 + nz) pi(dz)... ] / n

    (the k = 0 entry collects the constant coefficient).  Returns
    ``(q_n, pmf)`` with ``q_n`` a SpatialField and ``pmf(x) -> OffspringLaw``.
    """
    if n < 1:
        raise MechanismError("scaling level must be >= 1")
    sizes, weights = mech.pi.sizes, mech.pi.weights

    if k_max is None:
        k_max = 2
        for z in sizes:
            lam = n * float(z)
            k_max = max(k_max, int(lam + 12.0 * np.sqrt(lam + 1.0) + 20))

    def q_n(x):
        out = 2.0 * mech.beta(x) * n
        for z, c in zip(sizes, weights):
            out = out + c(x) * (1.0 - np.exp(-n * z)) * z
        return out

    q_up = 2.0 * mech.beta.upper * n + sum(c.upper * z for z, c in zip(sizes, weights))
    q_field = SpatialField(q_n, lower=0.0, upper=q_up, name=f"q_n[{n}]")

    def pmf(x) -> OffspringLaw:
        b = float(mech.beta(x))
        coeff = np.zeros(k_max + 1)
        coeff[0] += b * n * n
        coeff[2] += b * n * n
        ks = np.arange(k_max + 1)
        logfact = special.gammaln(ks + 1)
        for z, c in zip(sizes, weights):
            lam = n * float(z)
            cv = float(c(x))
            coeff += cv * np.exp(ks * np.log(lam) - lam - logfact)
            coeff[0] += cv * (-1.0 + lam)   # the (-1 + n z) part of the constant term
        coeff[1] = 0.0                      # linear term belongs to the -q_n s side
        a1 = float(q_n(x)) * n
        if a1 <= 0:
            return OffspringLaw(np.array([1.0, 0.0]), 0.0)  # no branching at all
        probs = coeff / a1
        if probs.min() < -1e-12:
            raise MechanismError("particle law produced negative pmf mass")
        probs = np.maximum(probs, 0.0)
        tail = max(0.0, 1.0 - probs.sum())
        return OffspringLaw(probs / probs.sum(), tail)

    return q_field, pmf


def rescaled_generator(mech: BranchingMechanism, n: int, x, s):
    """Direct evaluation of (1/n)[psi(x, n(1-s)) + alpha(x) n(1-s)] on s in [0,1]."""
    s = np.asarray(s, dtype=float)
    lam = n * (1.0 - s)
    return (psi(mech, x, lam) + mech.alpha(x) * lam) / n


def scaled_branch_law(mech: BranchingMechanism, n: int):
    """Branching law actually used to simulate the superprocess at level n.

    The rescaled generator above has exactly critical mean, because the
    linear part of the mechanism cancels against the compensation term.
    The mass growth rate alpha therefore has to be restored as a
    superposed event family: binary split at rate alpha^+ and death at
    rate alpha^-.  The combined generator converges, after rescaling, to
    the full mechanism, and at the quadratic test case reproduces the
    known total-mass law.  Returns ``(rate_field, pmf_rule)``.
    """
    q_n, pmf_n = particle_law(mech, n)
    a = mech.alpha

    def rate(x):
        return q_n(x) + np.abs(a(x))

    rate_field = SpatialField(rate, lower=0.0,
                              upper=q_n.upper + max(abs(a.lower), abs(a.upper)),
                              name=f"rate[{n}]")

    def pmf(x) -> OffspringLaw:
        base = pmf_n(x)
        av = float(a(x))
        qv = float(q_n(x))
        tot = qv + abs(av)
        if tot <= 0:
            return base
        probs = base.probs * (qv / tot)
        if av >= 0:
            probs[2] += av / tot
        else:
            probs[0] += -av / tot
        return OffspringLaw(probs, base.tail_bound * (qv / tot))

    return rate_field, pmf


# ---------------------------------------------------------------------------
# Derived evaluations used by the solvers
# ---------------------------------------------------------------------------

def discontinuous_rate(mech: BranchingMechanism, w: SpatialField, x):
    """Rate of mass-carrying immigration: integral y e^{-w(x) y} pi(x, dy)."""
    wv = w(x)
    out = 0.0 * np.asarray(wv, dtype=float)
    for z, c in zip(mech.pi.sizes, mech.pi.weights):
        out = out + c(x) * z * np.exp(-wv * z)
    return out


def discontinuous_mass_weights(mech: BranchingMechanism, w: SpatialField, x):
    """Jump sizes and their sampling weights y e^{-w y} pi({y}) at x."""
    wv = float(w(x))
    zs = mech.pi.sizes
    wt = np.array([float(c(x)) * z * np.exp(-wv * z) for z, c in zip(zs, mech.pi.weights)])
    return zs, wt


def tilted_cumulant(mech: BranchingMechanism, w: SpatialField, u_star_val, x, lam):
    """q(x) lam + beta lam^2 + integral (e^{-lam y} - 1 + lam y)
    e^{-(w(x) + u*) y} pi(dy); defined for any real lam.

    This is the branch-point cumulant entering the joint backbone
    functional; subtracting phi(x, u*) w e^{-V} and psi(x, w) e^{-V}
    turns it into the shifted-mechanism difference exactly.
    """
    lam = np.asarray(lam, dtype=float)
    q = backbone_rate(mech, w, x)
    out = q * lam + mech.beta(x) * lam * lam
    base = w(x) + np.asarray(u_star_val, dtype=float)
    for z, c in zip(mech.pi.sizes, mech.pi.weights):
        out = out + c(x) * np.exp(-base * z) * (np.exp(-lam * z) - 1.0 + lam * z)
    return out
