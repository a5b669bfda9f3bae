import math

import numpy as np
import pytest

from backbonesim.fields import SpatialField
from backbonesim.mechanism import BranchingMechanism, psi
from backbonesim.motion import (DiffusionSpec, MotionError, feynman_kac,
                                martingale_check, simulate_path, w_transform)
from backbonesim.rng import stream

BM = DiffusionSpec.build(0.5, 0.0)   # standard Brownian motion
QUAD = BranchingMechanism.build(1.0, 1.0)


def crank_nicolson_survival(a, lo, hi, x, t, n_x=401, n_t=400):
    """Survival probability of the killed diffusion: reference PDE solve."""
    xs = np.linspace(lo, hi, n_x)
    dx = xs[1] - xs[0]
    dt = t / n_t
    u = np.ones(n_x)
    u[0] = u[-1] = 0.0
    r = a * dt / (dx * dx)
    n = n_x - 2
    main = np.full(n, 1 + r)
    off = np.full(n - 1, -r / 2)
    import scipy.linalg as sla
    ab = np.zeros((3, n))
    ab[0, 1:] = off
    ab[1] = main
    ab[2, :-1] = off
    for _ in range(n_t):
        rhs = (1 - r) * u[1:-1] + (r / 2) * (u[2:] + u[:-2])
        u[1:-1] = sla.solve_banded((1, 1), ab, rhs)
        u[0] = u[-1] = 0.0
    return float(np.interp(x, xs, u))


class TestSimulatePath:
    def test_brownian_increments(self):
        rng = stream(3, "path")
        p = simulate_path(BM, 0.0, 100.0, 1e-3, rng)
        inc = np.diff(p.points[:, 0])
        n = len(inc)
        assert abs(inc.mean()) < 4 * math.sqrt(1e-3 / n)
        assert abs(inc.var() - 1e-3) < 4 * 1e-3 * math.sqrt(2.0 / n)

    def test_exit_point_outside(self):
        for rep in range(20):
            rng = stream(5, "exit", rep)
            p = simulate_path(BM, 0.0, 50.0, 1e-3, rng, domain=(-1, 1))
            assert np.isfinite(p.exit_time)
            assert abs(p.points[-1, 0]) >= 1.0
            # interior points stay inside
            assert np.all(np.abs(p.points[:-1, 0]) < 1.0)

    def test_mean_exit_time(self):
        # E tau = (1 - x^2) for the half-Laplacian on (-1, 1)
        taus = []
        for rep in range(400):
            rng = stream(7, "tau", rep)
            p = simulate_path(BM, 0.0, 50.0, 1e-4, rng, domain=(-1, 1))
            taus.append(p.exit_time)
        taus = np.asarray(taus)
        se = taus.std(ddof=1) / math.sqrt(len(taus))
        assert abs(taus.mean() - 1.0) < 3 * se + 0.02  # O(dt) exit bias allowance

    def test_exit_time_monotone_in_domain(self):
        # same noise stream: enlarging the interval never shortens the exit
        for rep in range(25):
            t1 = simulate_path(BM, 0.0, 20.0, 1e-2, stream(11, "mono", rep),
                               domain=(-1, 1)).exit_time
            t2 = simulate_path(BM, 0.0, 20.0, 1e-2, stream(11, "mono", rep),
                               domain=(-2, 2)).exit_time
            assert t1 <= t2 + 1e-12

    def test_blowup_detected(self):
        bad = DiffusionSpec.build(0.5, SpatialField(lambda x: x * 1e12,
                                                    lower=-1e300, upper=1e300,
                                                    name="explosive"))
        with pytest.raises(MotionError):
            simulate_path(bad, 1.0, 40.0, 0.5, stream(13, "boom"))


class TestFeynmanKac:
    def test_trivial_one(self):
        est, se = feynman_kac(BM, 0.0, 1.0, 0.0, 1.0, None, 500, 0.01,
                              stream(17, "fk"))
        assert est == 1.0 and se == 0.0

    def test_constant_rate(self):
        c, t = 0.7, 1.3
        est, se = feynman_kac(BM, 0.0, t, c, 1.0, None, 4000, 0.01,
                              stream(19, "fk"))
        assert abs(est - math.exp(-c * t)) < 3 * max(se, 1e-12) + 1e-12

    def test_survival_vs_pde(self):
        ref = crank_nicolson_survival(0.5, -1.0, 1.0, 0.0, 1.0)
        est, se = feynman_kac(BM, 0.0, 1.0, 0.0, 1.0, (-1.0, 1.0), 20000,
                              5e-4, stream(23, "fk"), variant="killed")
        assert abs(est - ref) < 3 * se + 0.01  # dt exit bias allowance

    def test_needs_samples(self):
        with pytest.raises(ValueError):
            feynman_kac(BM, 0.0, 1.0, 0.0, 1.0, None, 0, 0.01, stream(29, "fk"))


class TestWTransform:
    def test_constant_w_unchanged(self):
        spec2 = w_transform(BM, SpatialField(1.0, name="w"))
        assert spec2.b.constant == BM.b.constant

    def test_exponential_w_drift(self):
        grid = np.linspace(-2, 2, 801)
        w = SpatialField.from_grid(grid, np.exp(grid), name="w")
        spec2 = w_transform(BM, w)
        # 2 a w'/w = 2 * 0.5 * 1 = 1
        assert float(spec2.b(0.0)) == pytest.approx(1.0, abs=1e-3)

    def test_rejects_vanishing_w(self):
        grid = np.linspace(-2, 2, 101)
        w = SpatialField.from_grid(grid, np.abs(grid) + 0.0, name="w")
        with pytest.raises(MotionError):
            w_transform(BM, w)

    def test_change_of_measure(self):
        # for the solver-consistent survival exponent, the survival-weighted
        # expectation under the plain motion matches the direct expectation
        # under the transformed drift (the growth and discount potentials
        # cancel exactly along solutions of the exponent equation)
        from backbonesim import kernels
        from backbonesim.fixedpoint import SolverConfig, solve_w
        beta = SpatialField(lambda x: 1.0 + 0.4 * np.cos(0.5 * np.pi * x),
                            lower=0.6, upper=1.4, name="beta")
        mech = BranchingMechanism.build(2.0, beta)
        spec = DiffusionSpec.build(0.5, 0.0, domain=(-1.0, 1.0))
        cfg = SolverConfig(dt=0.01, n_x=41, tol=1e-8,
                           theta_ladder=(1.0, 10.0, 100.0),
                           t_ladder=(1.0, 2.0, 4.0, 8.0))
        gf, _ = solve_w(mech, spec, cfg)
        w = gf.as_spatial_field(floor=1e-9)
        spec2 = w_transform(spec, w)
        t, dt, n = 0.4, 5e-4, 30000
        x0 = 0.1
        w0 = float(w(x0))
        dom = (-1.0, 1.0)
        drift0, sigma0 = spec.tables(dom)
        driftw, sigmaw = spec2.tables(dom)
        chi = SpatialField(lambda x: psi(mech, x, np.maximum(w(x), 1e-12))
                           / np.maximum(w(x), 1e-12),
                           lower=-1e6, upper=1e6, name="chi").table(-1, 1, 801)
        xe0, _, ex0, acc = kernels.run_paths(
            np.full(n, x0), 0, t, dt, drift=drift0, sigma=sigma0,
            domain=dom, weight_rate=chi, rng=stream(31, "cm", 0))
        alive0 = ~ex0
        dens = np.where(alive0, np.asarray(w(xe0)) / w0 * np.exp(-acc), 0.0)
        xew, _, exw, _ = kernels.run_paths(
            np.full(n, x0), 0, t, dt, drift=driftw, sigma=sigmaw,
            domain=dom, weight_rate=chi, rng=stream(31, "cm", 1))
        alivew = ~exw
        for name, g in (("endpoint", lambda x: x),
                        ("halfline", lambda x: (x > 0.1).astype(float)),
                        ("alive", lambda x: np.ones_like(x))):
            a = dens * np.where(alive0, g(xe0), 0.0)
            b = np.where(alivew, g(xew), 0.0)
            se = math.hypot(a.std(ddof=1), b.std(ddof=1)) / math.sqrt(n)
            assert abs(a.mean() - b.mean()) < 3 * se + 0.01, name


class TestMartingale:
    def test_quadratic_trivial(self):
        # psi(w) = 0 and w constant: the statistic is identically 1
        mean, se = martingale_check(BM, QUAD, SpatialField(1.0, name="w"),
                                    0.0, 1.0, None, 200, stream(37, "mg"))
        assert mean == pytest.approx(1.0, abs=1e-12)
        assert se == pytest.approx(0.0, abs=1e-12)

    def test_t_zero(self):
        mean, se = martingale_check(BM, QUAD, SpatialField(1.0, name="w"),
                                    0.3, 0.0, None, 10, stream(41, "mg"))
        assert mean == 1.0 and se == 0.0

    def test_spatial_case(self):
        # spatially varying quadratic coefficient; w from the solver
        from backbonesim.fixedpoint import SolverConfig, solve_w
        beta = SpatialField(lambda x: 1.0 + 0.4 * np.cos(0.5 * np.pi * x),
                            lower=0.6, upper=1.4, name="beta")
        mech = BranchingMechanism.build(2.0, beta)
        spec = DiffusionSpec.build(0.5, 0.0, domain=(-1.0, 1.0))
        cfg = SolverConfig(dt=0.01, n_x=41, tol=1e-8,
                           theta_ladder=(1.0, 10.0, 100.0),
                           t_ladder=(1.0, 2.0, 4.0, 8.0))
        gf, diag = solve_w(mech, spec, cfg)
        w = gf.as_spatial_field(floor=1e-6)
        x0 = 0.2
        mean, se = martingale_check(spec, mech, w, x0, 0.4, (-0.9, 0.9),
                                    30000, stream(43, "mg"), dt=5e-4)
        assert abs(mean - float(w(x0))) < 3 * se + 0.01
