"""Verification layer: Laplace-functional comparisons with explicit
error budgets.

Every check produces a FunctionalTestReport whose pass criterion is
computed from declared quantities only:

    pass  <=>  |A - B| <= threshold * combined_SE + sum(bias budget)

with threshold defaulting to 3 combined standard errors.  The bias
budget carries the named approximation gaps (mass of the small-mass
excursion surrogate, scaling level, time step), each measured by
refinement runs rather than assumed.  Standard errors come from
replication-level sample variance; the compared functionals are
bounded, so the normal approximation is safe at the replication counts
used here.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import stats as scstats

__all__ = ["FunctionalTestReport", "mean_se", "equivalence_test",
           "poisson_field_test", "extinction_test",
           "conditional_immigration_test", "poisson_count_gof",
           "histogram_gof"]


@dataclass
class FunctionalTestReport:
    test_id: str
    estimate_a: float
    se_a: float
    estimate_b: float
    se_b: float
    z_score: float
    threshold: float
    bias_budget: Dict[str, float] = field(default_factory=dict)
    passed: bool = False
    extras: dict = field(default_factory=dict)

    @staticmethod
    def build(test_id, a, se_a, b, se_b, threshold=3.0, bias_budget=None,
              extras=None) -> "FunctionalTestReport":
        bias_budget = dict(bias_budget or {})
        se = math.hypot(se_a, se_b)
        gap = abs(a - b)
        z = (a - b) / se if se > 0 else (0.0 if gap == 0 else math.inf)
        allowed = threshold * se + sum(bias_budget.values())
        passed = gap <= allowed
        if se == 0 and gap > 0 and not bias_budget:
            raise ValueError(f"{test_id}: deterministic mismatch ({a} vs {b})")
        return FunctionalTestReport(test_id, float(a), float(se_a), float(b),
                                    float(se_b), float(z), float(threshold),
                                    bias_budget, bool(passed), extras or {})

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True, default=float)

    def summary_row(self):
        return (self.test_id, self.estimate_a, self.estimate_b,
                math.hypot(self.se_a, self.se_b), self.z_score, self.passed)


def mean_se(values) -> tuple:
    arr = np.asarray(values, dtype=float)
    if len(arr) < 2:
        raise ValueError("need at least two replications for a standard error")
    return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(len(arr)))


def equivalence_test(values_a, values_b=None, oracle: Optional[float] = None,
                     test_id: str = "equivalence", threshold: float = 3.0,
                     bias_budget=None) -> FunctionalTestReport:
    """Compare Laplace-functional samples of the decorated process against
    either a second sample (two-sample) or a solver oracle.

    ``values_*`` are per-replication values of exp(-<f, .>).  Swapping
    the two samples flips the z-score sign exactly.
    """
    a, se_a = mean_se(values_a)
    if values_b is not None:
        b, se_b = mean_se(values_b)
    elif oracle is not None:
        b, se_b = float(oracle), 0.0
    else:
        raise ValueError("provide a second sample or an oracle")
    return FunctionalTestReport.build(test_id, a, se_a, b, se_b, threshold,
                                      bias_budget)


def poisson_field_test(joint_values, conditional_values, oracle: float,
                       test_id: str = "poisson-field", threshold: float = 3.0,
                       bias_budget=None) -> FunctionalTestReport:
    """Joint functional E exp(-<h,Z> - <f,Delta>) against the solver
    oracle, with the conditional re-estimate exp(-<w(1-e^{-h}) + f, Delta>)
    (computed from the same replications) reported alongside."""
    a, se_a = mean_se(joint_values)
    c, se_c = mean_se(conditional_values)
    rep = FunctionalTestReport.build(test_id, a, se_a, float(oracle), 0.0,
                                     threshold, bias_budget)
    diff = np.asarray(joint_values, float) - np.asarray(conditional_values, float)
    se_d = float(diff.std(ddof=1) / math.sqrt(len(diff))) if len(diff) > 1 else 0.0
    rep.extras["conditional_estimate"] = c
    rep.extras["conditional_se"] = se_c
    rep.extras["joint_minus_conditional"] = float(diff.mean())
    rep.extras["joint_minus_conditional_se"] = se_d
    rep.extras["conditional_pass"] = bool(
        abs(diff.mean()) <= threshold * se_d + sum((bias_budget or {}).values()))
    return rep


def extinction_test(extinct_by_horizon: Dict[float, int], replications: int,
                    oracle: float, test_id: str = "extinction",
                    threshold: float = 3.0, bias_budget=None) -> FunctionalTestReport:
    """Empirical extinction fraction at the largest horizon against
    exp(-<w, mu>), with the horizon ladder reported; the ladder must be
    monotone and stabilizing, otherwise the report is flagged
    inconclusive rather than failed."""
    horizons = sorted(extinct_by_horizon)
    fracs = [extinct_by_horizon[t] / replications for t in horizons]
    p = fracs[-1]
    se = math.sqrt(max(p * (1.0 - p), 1e-12) / replications)
    rep = FunctionalTestReport.build(test_id, p, se, float(oracle), 0.0,
                                     threshold, bias_budget)
    increments = [fracs[i + 1] - fracs[i] for i in range(len(fracs) - 1)]
    stabilizing = all(b <= a + 3.0 * se for a, b in zip(increments, increments[1:]))
    rep.extras["horizons"] = horizons
    rep.extras["fractions"] = fracs
    rep.extras["stabilizing"] = bool(stabilizing)
    if not stabilizing:
        rep.extras["inconclusive"] = True
    return rep


def conditional_immigration_test(mc_values, formula_value: float,
                                 quad_error: float = 0.0,
                                 test_id: str = "conditional-immigration",
                                 threshold: float = 3.0,
                                 bias_budget=None) -> FunctionalTestReport:
    """Conditional mean of exp(-<f, immigrated mass>) over a frozen
    backbone versus the trajectory-quadrature evaluation of the
    conditional-immigration formula."""
    budget = dict(bias_budget or {})
    if quad_error:
        budget["time-quadrature"] = quad_error
    a, se_a = mean_se(mc_values)
    return FunctionalTestReport.build(test_id, a, se_a, float(formula_value),
                                      0.0, threshold, budget)


def poisson_count_gof(counts, rate: float, alpha: float = 0.01,
                      min_expected: float = 5.0):
    """Chi-square goodness of fit of event counts against Poisson(rate).

    Bins with small expectation are merged into the tail.  Returns a
    dict with the statistic, dof, p-value and pass flag at level alpha.
    """
    counts = np.asarray(counts, dtype=int)
    n = len(counts)
    kmax = int(counts.max()) if n else 0
    ks = np.arange(kmax + 1)
    probs = scstats.poisson.pmf(ks, rate)
    tail = 1.0 - probs.sum()
    observed = np.bincount(counts, minlength=kmax + 1).astype(float)
    exp = probs * n
    # merge from the right until every bin expects at least min_expected
    obs_list, exp_list = list(observed) + [0.0], list(exp) + [tail * n]
    while len(exp_list) > 2 and exp_list[-1] < min_expected:
        e_last = exp_list.pop()
        exp_list[-1] += e_last
        o_last = obs_list.pop()
        obs_list[-1] += o_last
    o = np.asarray(obs_list)
    e = np.asarray(exp_list)
    e_scaled = e * o.sum() / e.sum()
    stat = float(np.sum((o - e_scaled) ** 2 / e_scaled))
    dof = len(o) - 1
    p = float(scstats.chi2.sf(stat, dof))
    return {"statistic": stat, "dof": dof, "p_value": p, "alpha": alpha,
            "pass": p >= alpha, "bins": len(o)}


def histogram_gof(samples, support, probs, alpha: float = 0.01):
    """Chi-square test of categorical samples against given probabilities."""
    samples = np.asarray(samples)
    support = list(support)
    observed = np.array([np.sum(samples == s) for s in support], dtype=float)
    expected = np.asarray(probs, dtype=float) * len(samples)
    keep = expected > 0
    stat = float(np.sum((observed[keep] - expected[keep]) ** 2 / expected[keep]))
    dof = int(keep.sum()) - 1
    p = float(scstats.chi2.sf(stat, max(dof, 1)))
    return {"statistic": stat, "dof": dof, "p_value": p, "alpha": alpha,
            "pass": p >= alpha}
