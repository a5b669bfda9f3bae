import math

import numpy as np
import pytest

from backbonesim.fields import SpatialField
from backbonesim.mechanism import (BranchingMechanism, LevyMeasureSpec,
                                   MechanismError, backbone_rate,
                                   branch_mass_mean, branch_mass_sampler,
                                   conditioned_mechanism, offspring_pmf,
                                   particle_law, phi, psi, psi_prime,
                                   psi_shifted, rescaled_generator,
                                   scaled_branch_law, tilted_cumulant)
from backbonesim.rng import stream

QUAD = BranchingMechanism.build(1.0, 1.0)
ATOM = BranchingMechanism.build(1.0, 0.0, LevyMeasureSpec.from_atoms([(1.0, 2.0)]))
W1 = SpatialField(1.0, name="w")


def atom_root():
    # bisection on 2 e^{-w} + w - 2 = 0, independent of the package root finder
    lo, hi = 1.0, 2.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if 2 * math.exp(-mid) + mid - 2 < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


W_ATOM = SpatialField(atom_root(), name="w")


class TestPsi:
    def test_zero_at_zero(self):
        assert psi(QUAD, 0.0, 0.0) == 0.0
        assert psi(ATOM, 0.3, 0.0) == 0.0

    def test_quadratic_value(self):
        assert psi(QUAD, 0.0, 2.0) == pytest.approx(2.0, abs=1e-14)

    def test_atom_value(self):
        expected = 2 * math.exp(-1) - 1
        assert psi(ATOM, 0.0, 1.0) == pytest.approx(expected, abs=1e-12)

    def test_negative_argument_rejected(self):
        with pytest.raises(MechanismError):
            psi(QUAD, 0.0, -0.1)
        with pytest.raises(MechanismError):
            psi_prime(QUAD, 0.0, -1e-9)
        with pytest.raises(MechanismError):
            phi(QUAD, W1, 0.0, -0.5)

    def test_prime(self):
        assert psi_prime(QUAD, 0.0, 1.0) == pytest.approx(1.0, abs=1e-14)
        assert psi_prime(ATOM, 0.0, 0.0) == pytest.approx(-1.0, abs=1e-14)
        assert psi_prime(ATOM, 0.0, 1.0) == pytest.approx(
            -1 + 2 * (1 - math.exp(-1)), abs=1e-12)

    def test_prime_matches_finite_difference(self):
        for mech in (QUAD, ATOM):
            for lam in (0.2, 1.0, 2.7):
                eps = 1e-6
                fd = (psi(mech, 0.0, lam + eps) - psi(mech, 0.0, lam - eps)) / (2 * eps)
                assert psi_prime(mech, 0.0, lam) == pytest.approx(fd, rel=1e-7, abs=1e-7)


class TestConditioned:
    def test_quadratic(self):
        star = conditioned_mechanism(QUAD, W1)
        assert star.alpha(0.0) == pytest.approx(-1.0, abs=1e-14)
        # psi*(lam) = lam^2 + lam
        for lam in (0.0, 0.5, 2.0):
            assert psi(star, 0.0, lam) == pytest.approx(lam * lam + lam, abs=1e-12)

    def test_is_mechanism(self):
        star = conditioned_mechanism(ATOM, W_ATOM)
        assert psi(star, 0.0, 0.0) == 0.0

    def test_atom_tilted_weights(self):
        w0 = 0.7
        star = conditioned_mechanism(ATOM, SpatialField(w0))
        assert star.pi.weights[0](0.0) == pytest.approx(2 * math.exp(-w0), abs=1e-12)
        assert star.alpha(0.0) == pytest.approx(1 - 2 * (1 - math.exp(-w0)), abs=1e-12)

    def test_shift_identity_on_grid(self):
        # psi* assembled from (alpha*, beta, pi*) against the shift formula
        for mech, w in ((QUAD, W1), (ATOM, W_ATOM)):
            star = conditioned_mechanism(mech, w)
            for x in (-1.0, 0.0, 2.0):
                wv = float(w(x))
                for lam in (0.0, 0.5 * wv, wv, 2 * wv):
                    direct = psi(star, x, lam)
                    shifted = psi(mech, x, lam + wv) - psi(mech, x, wv)
                    assert direct == pytest.approx(shifted, abs=1e-10)

    def test_conditioned_is_subcritical_at_root(self):
        for mech, w in ((QUAD, W1), (ATOM, W_ATOM)):
            star = conditioned_mechanism(mech, w)
            assert psi_prime(star, 0.0, 0.0) >= -1e-12

    def test_requires_positive_w(self):
        with pytest.raises(MechanismError):
            conditioned_mechanism(QUAD, SpatialField(0.0))


class TestPhi:
    def test_quadratic(self):
        assert phi(QUAD, W1, 0.0, 3.0) == pytest.approx(6.0, abs=1e-14)

    def test_zero(self):
        assert phi(ATOM, W_ATOM, 0.0, 0.0) == 0.0

    def test_atom_tilted(self):
        val = phi(BranchingMechanism.build(1.0, 0.0,
                                           LevyMeasureSpec.from_atoms([(1.0, 2.0)])),
                  SpatialField(1.0), 0.0, 1.0)
        expected = 2 * math.exp(-1) * (1 - math.exp(-1))
        assert val == pytest.approx(expected, abs=1e-12)


class TestBackboneRate:
    def test_quadratic(self):
        assert backbone_rate(QUAD, W1, 0.0) == pytest.approx(1.0, abs=1e-12)

    def test_trivial_zero(self):
        mech = BranchingMechanism.build(1.0, 0.0)
        assert backbone_rate(mech, W1, 0.0) == 0.0

    def test_atom(self):
        w0 = atom_root()
        q = backbone_rate(ATOM, W_ATOM, 0.0)
        expected = (2.0 / w0) * (1 - math.exp(-w0) * (1 + w0))
        assert q == pytest.approx(expected, abs=1e-12)
        # cross-check against the derivative form
        alt = psi_prime(ATOM, 0.0, w0) - psi(ATOM, 0.0, w0) / w0
        assert q == pytest.approx(alt, abs=1e-10)


class TestOffspring:
    def test_quadratic_dyadic(self):
        law = offspring_pmf(QUAD, W1, 0.0)
        assert law.probs[2] == pytest.approx(1.0, abs=1e-12)
        assert law.probs[0] == law.probs[1] == 0.0
        assert np.all(law.probs[3:] == 0.0)

    def test_no_small_families(self):
        for mech, w in ((QUAD, W1), (ATOM, W_ATOM)):
            law = offspring_pmf(mech, w, 0.0)
            assert law.probs[0] == 0.0 and law.probs[1] == 0.0

    def test_atom_normalization(self):
        law = offspring_pmf(ATOM, W_ATOM, 0.0)
        assert law.probs.sum() == pytest.approx(1.0, abs=1e-10)
        assert law.tail_bound <= 1e-8
        # proportional to w^n / n! on n >= 2
        w0 = atom_root()
        ratio = law.probs[3] / law.probs[2]
        assert ratio == pytest.approx(w0 / 3.0, rel=1e-9)

    def test_tail_error_suggests_level(self):
        mech = BranchingMechanism.build(1.0, 0.0,
                                        LevyMeasureSpec.from_atoms([(40.0, 1.0)]))
        w = SpatialField(2.0)
        with pytest.raises(MechanismError, match="need about"):
            offspring_pmf(mech, w, 0.0, n_max=16)


class TestBranchMass:
    def test_quadratic_always_zero(self):
        rng = stream(1, "bm")
        for _ in range(50):
            assert branch_mass_sampler(QUAD, W1, 0.0, 2, rng) == 0.0

    def test_single_atom_forced(self):
        rng = stream(2, "bm")
        for n in (2, 3, 5):
            assert branch_mass_sampler(ATOM, W_ATOM, 0.0, n, rng) == 1.0

    def test_undefined_for_missing_n(self):
        with pytest.raises(MechanismError):
            branch_mass_sampler(QUAD, W1, 0.0, 3, stream(3, "bm"))
        with pytest.raises(MechanismError):
            branch_mass_sampler(QUAD, W1, 0.0, 1, stream(3, "bm"))

    def test_empirical_mean_two_atoms(self):
        mech = BranchingMechanism.build(1.0, 0.5,
                                        LevyMeasureSpec.from_atoms([(0.5, 1.0), (2.0, 0.7)]))
        w = SpatialField(0.9)
        rng = stream(4, "bm")
        n = 2
        draws = np.array([branch_mass_sampler(mech, w, 0.0, n, rng)
                          for _ in range(100_000)])
        target = branch_mass_mean(mech, w, 0.0, n)
        se = draws.std(ddof=1) / math.sqrt(len(draws))
        assert abs(draws.mean() - target) < 3 * se


class TestParticleLaw:
    def s_grid_residual(self, mech, n):
        q_n, pmf = particle_law(mech, n)
        s = np.linspace(0.0, 1.0, 11)
        x = 0.0
        law = pmf(x)
        ks = np.arange(len(law.probs))
        gen = float(q_n(x)) * (np.array([(law.probs * sv ** ks).sum() for sv in s]) - s)
        direct = rescaled_generator(mech, n, x, s)
        return np.max(np.abs(gen - direct))

    @pytest.mark.parametrize("n", [1, 10, 100])
    def test_grid_identity_quadratic(self, n):
        assert self.s_grid_residual(QUAD, n) < 1e-8

    @pytest.mark.parametrize("n", [1, 10, 100])
    def test_grid_identity_atom(self, n):
        assert self.s_grid_residual(ATOM, n) < 1e-8

    def test_fixed_point_at_one(self):
        for mech in (QUAD, ATOM):
            assert abs(rescaled_generator(mech, 7, 0.0, 1.0)) < 1e-14

    def test_quadratic_binary(self):
        q_n, pmf = particle_law(QUAD, 5)
        law = pmf(0.0)
        assert float(q_n(0.0)) == pytest.approx(2 * 5.0, abs=1e-12)
        assert law.probs[0] == pytest.approx(0.5, abs=1e-12)
        assert law.probs[2] == pytest.approx(0.5, abs=1e-12)
        assert np.all(law.probs[3:] == 0)

    def test_atom_poisson_mixture(self):
        # single jump atom at level 1: coefficients are Poisson(z) weights
        q_n, pmf = particle_law(ATOM, 1)
        law = pmf(0.0)
        lam = 1.0
        for k in (2, 3, 4):
            expect = 2 * math.exp(-lam) * lam ** k / math.factorial(k)
            assert law.probs[k] * float(q_n(0.0)) == pytest.approx(expect, rel=1e-9)

    def test_scaled_law_restores_growth(self):
        # the simulation law has mean offspring 1 + alpha/rate
        rate, pmf = scaled_branch_law(QUAD, 50)
        law = pmf(0.0)
        drift = float(rate(0.0)) * (law.mean() - 1.0)
        assert drift == pytest.approx(1.0, abs=1e-9)


class TestTiltedCumulant:
    def test_zero(self):
        assert tilted_cumulant(QUAD, W1, 0.3, 0.0, 0.0) == 0.0

    def test_no_jumps_closed_form(self):
        q = backbone_rate(QUAD, W1, 0.0)
        for lam in (-0.5, 0.4, 2.0):
            assert tilted_cumulant(QUAD, W1, 0.7, 0.0, lam) == pytest.approx(
                q * lam + lam * lam, abs=1e-12)

    @pytest.mark.parametrize("mech,w", [(QUAD, W1), (ATOM, W_ATOM)])
    def test_branch_cumulant_identity(self, mech, w):
        # subtracting the immigration and survival terms turns the tilted
        # cumulant into the shifted-mechanism difference, exactly
        for x in (-0.5, 0.0, 1.0):
            wv = float(w(x))
            for V in (0.0, 0.4, 1.7):
                for ust in (0.0, 0.3, 1.1):
                    lam = -wv * math.exp(-V)
                    lhs = (tilted_cumulant(mech, w, ust, x, lam)
                           - phi(mech, w, x, ust) * wv * math.exp(-V)
                           - psi(mech, x, wv) * math.exp(-V))
                    rhs = psi_shifted(mech, w, x, lam + ust) - psi_shifted(mech, w, x, ust)
                    assert lhs == pytest.approx(rhs, abs=1e-10)


class TestValidation:
    def test_beta_nonnegative(self):
        with pytest.raises(MechanismError):
            BranchingMechanism.build(1.0, -0.2)

    def test_atom_sizes_positive(self):
        with pytest.raises(MechanismError):
            LevyMeasureSpec.from_atoms([(-1.0, 2.0)])

    def test_field_bounds_enforced(self):
        f = SpatialField(lambda x: np.sin(x), lower=-0.5, upper=0.5, name="bad")
        with pytest.raises(ValueError):
            f.validate_on(np.linspace(-3, 3, 50))
