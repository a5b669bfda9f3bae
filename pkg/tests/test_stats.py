import math

import numpy as np
import pytest

from backbonesim.rng import stream
from backbonesim.stats import (FunctionalTestReport, conditional_immigration_test,
                               equivalence_test, extinction_test, histogram_gof,
                               mean_se, poisson_count_gof, poisson_field_test)


class TestReport:
    def test_pass_rule(self):
        r = FunctionalTestReport.build("t", 1.0, 0.05, 1.1, 0.0, threshold=3.0)
        assert r.passed  # gap 0.1 <= 0.15
        r2 = FunctionalTestReport.build("t", 1.0, 0.01, 1.1, 0.0, threshold=3.0)
        assert not r2.passed
        r3 = FunctionalTestReport.build("t", 1.0, 0.01, 1.1, 0.0, threshold=3.0,
                                        bias_budget={"eps": 0.08})
        assert r3.passed  # budget rescues the declared bias

    def test_deterministic_mismatch_raises(self):
        with pytest.raises(ValueError):
            FunctionalTestReport.build("t", 1.0, 0.0, 2.0, 0.0)

    def test_symmetry(self):
        a = np.array([0.4, 0.5, 0.6, 0.45])
        b = np.array([0.5, 0.55, 0.52, 0.57])
        r1 = equivalence_test(a, values_b=b)
        r2 = equivalence_test(b, values_b=a)
        assert r1.z_score == pytest.approx(-r2.z_score, abs=0.0)

    def test_determinism(self):
        vals = stream(1, "det").random(100)
        r1 = equivalence_test(vals, oracle=0.5)
        r2 = equivalence_test(vals, oracle=0.5)
        assert r1.to_json() == r2.to_json()

    def test_trivial_functional(self):
        vals = np.ones(10)
        r = equivalence_test(vals, oracle=1.0)
        assert r.passed and r.z_score == 0.0


class TestPoissonField:
    def test_h_zero_reduces_to_equivalence(self):
        rng = stream(2, "pf")
        mass = rng.exponential(1.0, 400)
        joint = np.exp(-0.0 * 1.0 - 1.0 * mass)
        cond = np.exp(-1.0 * mass)
        r = poisson_field_test(joint, cond, float(np.mean(joint)))
        assert r.extras["joint_minus_conditional"] == 0.0
        assert r.extras["conditional_pass"]


class TestExtinction:
    def test_ladder_and_oracle(self):
        r = extinction_test({2.5: 300, 5.0: 360, 7.5: 368, 10.0: 370},
                            1000, math.exp(-1.0))
        assert r.extras["stabilizing"]
        assert r.passed

    def test_nonstabilizing_flagged(self):
        r = extinction_test({1.0: 10, 2.0: 100, 3.0: 400}, 1000, 0.37)
        assert r.extras.get("inconclusive", False) or not r.extras["stabilizing"]

    def test_mu_zero_certain(self):
        r = extinction_test({1.0: 500, 2.0: 500}, 500, 1.0)
        assert r.estimate_a == 1.0 and r.passed


class TestGof:
    def test_poisson_counts_accept(self):
        rng = stream(3, "gof")
        counts = rng.poisson(0.4, 3000)
        assert poisson_count_gof(counts, 0.4)["pass"]

    def test_poisson_counts_reject_wrong_rate(self):
        rng = stream(4, "gof")
        counts = rng.poisson(1.2, 3000)
        assert not poisson_count_gof(counts, 0.4)["pass"]

    def test_histogram(self):
        rng = stream(5, "gof")
        samples = np.where(rng.random(4000) < 0.3, 0.5, 2.0)
        assert histogram_gof(samples, [0.5, 2.0], [0.3, 0.7])["pass"]
        assert not histogram_gof(samples, [0.5, 2.0], [0.7, 0.3])["pass"]


class TestConditional:
    def test_quadrature_error_in_budget(self):
        vals = 0.8 + 0.01 * stream(6, "ci").standard_normal(500)
        r = conditional_immigration_test(vals, 0.796, quad_error=0.004)
        assert "time-quadrature" in r.bias_budget
        assert r.passed


class TestMeanSe:
    def test_needs_two(self):
        with pytest.raises(ValueError):
            mean_se([1.0])

    def test_values(self):
        m, se = mean_se([1.0, 3.0])
        assert m == 2.0
        assert se == pytest.approx(1.0, abs=1e-12)
