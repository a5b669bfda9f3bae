"""The decorated backbone process.

One replication assembles, on a shared snapshot grid:

* Z: the backbone, a branching diffusion with the survival-weighted
  drift, branch rate q, and death-free offspring law (built from the
  mechanism and the survival exponent w).  Initial particles are either
  a fixed atomic configuration or a Poisson field with intensity w * mu.
* X*: an independent copy of the process conditioned on extinction
  (particle approximation at level n with the conditioned mechanism).
* Three immigration streams of conditioned subprocesses along Z:
  continuum (rate 2 beta / eps, initial mass eps: the small-mass
  surrogate of the excursion-measure rate), discontinuous (rate
  integral y e^{-w y} pi(dy), initial mass from the size-biased
  discounted jump law), and branch-point (mass drawn at each branch
  from the offspring-biased law).

Delta_t is the superposition of X* and the three immigration
aggregates; additivity holds exactly by construction.  Every stochastic
entity draws from its own label-keyed stream, so domain restriction
couples pathwise: enlarging the domain only extends segments and adds
events, which is what the domain-exhaustion monotonicity check
(`global_limit_probe`) verifies replication by replication.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .fields import SpatialField
from .mechanism import (BackboneBranchingLaw, BranchingMechanism, backbone_law,
                        branch_mass_sampler, conditioned_mechanism,
                        discontinuous_mass_weights, scaled_branch_law)
from .motion import DiffusionSpec, w_transform
from .particle import (AtomicMeasure, BackboneTree, WeightedMeasure,
                       cdf_table_for, poisson_atoms, simulate_mbp,
                       superprocess_approx)
from .rng import StreamFactory

__all__ = ["ImmigrationEvent", "DecoratedState", "SubprocessEngine",
           "sample_backbone", "immigrate_continuum", "immigrate_discontinuous",
           "immigrate_branchpoint", "assemble_delta", "global_limit_probe"]


@dataclass
class ImmigrationEvent:
    kind: str                 # continuum | discontinuous | branchpoint
    label: str                # backbone node
    time: float
    location: float
    mass: float               # eps / jump size / branch mass
    initial_particles: int
    snapshots: List[np.ndarray]   # positions per snapshot time (level n_sub)


@dataclass
class DecoratedState:
    t: float
    xstar: WeightedMeasure
    cont: WeightedMeasure
    disc: WeightedMeasure
    branch: WeightedMeasure
    backbone: AtomicMeasure

    def delta_integrate(self, f) -> float:
        return (self.xstar.integrate(f) + self.cont.integrate(f)
                + self.disc.integrate(f) + self.branch.integrate(f))

    def components_integrate(self, f):
        return (self.xstar.integrate(f), self.cont.integrate(f),
                self.disc.integrate(f), self.branch.integrate(f))

    @property
    def total_mass(self) -> float:
        return self.delta_integrate(1.0)


class SubprocessEngine:
    """Launches conditioned subprocesses and returns their snapshot positions.

    mode 'bulk' drives the compiled kernel with one sequential stream per
    subprocess; mode 'tree' builds label-keyed genealogies (needed for
    exact domain-nesting couplings, at small scale).
    """

    def __init__(self, mech_star: BranchingMechanism, spec: DiffusionSpec,
                 n_sub: int, dt: float, snap_times: Sequence[float],
                 D: Optional[Tuple[float, float]] = None, mode: str = "bulk",
                 window: Optional[Tuple[float, float]] = None,
                 max_segments: int = 20_000_000):
        self.mech_star = mech_star
        self.spec = spec
        self.n_sub = int(n_sub)
        self.dt = float(dt)
        self.snap_times = np.asarray(snap_times, dtype=float)
        self.D = D
        self.mode = mode
        self.max_segments = max_segments
        self.horizon = float(self.snap_times.max()) if len(self.snap_times) else 0.0
        win = window or D or spec.domain
        if win is None:
            win = (-10.0, 10.0)
        self.window = win
        self._drift_tab, self._sigma_tab = spec.tables(win)
        rate_field, pmf = scaled_branch_law(mech_star, self.n_sub)
        if mech_star.is_spatially_constant:
            q0 = float(rate_field(0.5 * (win[0] + win[1])))
            self._rate_tab = SpatialField(q0, name="rate*").table()
            self._rate_max = q0
            self._rows, self._cmode, self._cx0, self._cdx = cdf_table_for(pmf(0.0))
            self._law_const = pmf(0.0)
        else:
            rt = rate_field.table(win[0], win[1], 1025)
            self._rate_tab = rt
            self._rate_max = float(np.max(rt.values))
            self._rows, self._cmode, self._cx0, self._cdx = cdf_table_for(pmf, win)
            self._law_const = None
        self._rate_field = rate_field
        self._pmf = pmf

    def launch(self, streams: StreamFactory, x: float, mass: float, t0: float):
        """Run one subprocess of initial mass ``mass`` at (x, t0); returns
        (initial particle count, positions per snapshot)."""
        rng = streams.get("init")
        k = int(rng.poisson(self.n_sub * mass))
        empty = [np.empty(0) for _ in self.snap_times]
        if k == 0 or t0 >= self.horizon:
            return k, empty
        x0 = np.full(k, float(x))
        if self.mode == "bulk":
            out = kernels.run_population(
                x0, t0, self.horizon, self.dt,
                drift=self._drift_tab, sigma=self._sigma_tab,
                rate=self._rate_tab, rate_max=self._rate_max,
                cdf_rows=self._rows, cdf_mode=self._cmode,
                cdf_x0=self._cx0, cdf_dx=self._cdx,
                domain=self.D, snap_times=self.snap_times,
                rng=streams.get("run"), max_segments=self.max_segments)
            if out["censored"]:
                raise RuntimeError("subprocess hit the explosion guard")
            return k, out["snaps"]
        # genealogical mode: label-keyed streams, exact domain nesting;
        # the tree clock starts at the immigration time, so census shifts
        offspring = self._law_const if self._law_const is not None else self._pmf
        tree = simulate_mbp(self.spec, self._rate_field, offspring,
                            AtomicMeasure(x0), self.horizon - t0, self.dt,
                            streams.child("tree"), D=self.D)
        snaps = [tree.census(t - t0).positions if t > t0 else np.empty(0)
                 for t in self.snap_times]
        return k, snaps


def sample_backbone(mech: BranchingMechanism, w: SpatialField,
                    spec: DiffusionSpec, init, T: float, dt: float,
                    streams: StreamFactory,
                    D: Optional[Tuple[float, float]] = None,
                    law: BackboneBranchingLaw = None,
                    motion: DiffusionSpec = None,
                    max_nodes: int = 500_000) -> BackboneTree:
    """Simulate the backbone tree.

    ``init`` is an AtomicMeasure (fixed configuration) or a list of
    (x, mass) atoms to be Poissonized with intensity w * mu.
    """
    law = law or backbone_law(mech, w)
    motion = motion or w_transform(spec, w)
    if isinstance(init, AtomicMeasure):
        atoms = init
    else:
        rng = streams.get("poisson-init")
        weights = np.array([float(w(x)) * m for x, m in init])
        total = weights.sum()
        count = int(rng.poisson(total)) if total > 0 else 0
        if count and total > 0:
            locs = np.array([x for x, _ in init])
            idx = rng.choice(len(locs), size=count, p=weights / total)
            atoms = AtomicMeasure(locs[idx])
        else:
            atoms = AtomicMeasure(np.empty(0))
    if mech.is_spatially_constant and w.constant is not None:
        offspring = law.offspring(0.0)
    else:
        offspring = law.offspring
    return simulate_mbp(motion, law.q, offspring, atoms, T, dt,
                        streams.child("bb"), D=D, max_nodes=max_nodes)


def _segment_events(node, rate_fn, rate_max, t_end, rng):
    """Poisson events on one trajectory segment by thinning."""
    events = []
    if rate_max <= 0:
        return events
    t = node.birth
    while True:
        t += rng.standard_exponential() / rate_max
        if t >= t_end:
            return events
        x = node.position(t)
        if rng.random() * rate_max <= rate_fn(x):
            events.append((t, x))


def immigrate_continuum(tree: BackboneTree, engine: SubprocessEngine,
                        mech: BranchingMechanism, eps: float,
                        streams: StreamFactory, T: float = None) -> List[ImmigrationEvent]:
    """Continuum immigration: events at rate 2 beta(x)/eps along every
    alive backbone segment, each seeding a conditioned subprocess of
    initial mass eps (the small-mass excursion surrogate, first-order
    accurate in eps)."""
    if not (0.0 < eps <= 1.0):
        raise ValueError("eps must lie in (0, 1]")
    T = T if T is not None else engine.horizon
    beta = mech.beta
    rate_max = 2.0 * beta.upper / eps
    out = []
    for node in tree:
        t_end = min(T, node.end)
        if rate_max <= 0 or t_end <= node.birth:
            continue
        rng = streams.get("cont", node.label)
        events = _segment_events(node, lambda x: 2.0 * float(beta(x)) / eps,
                                 rate_max, t_end, rng)
        for j, (r, x) in enumerate(events):
            k, snaps = engine.launch(streams.child("cont-sub", node.label, j),
                                     x, eps, r)
            out.append(ImmigrationEvent("continuum", node.label, r, x, eps, k, snaps))
    return out


def immigrate_discontinuous(tree: BackboneTree, engine: SubprocessEngine,
                            mech: BranchingMechanism, w: SpatialField,
                            streams: StreamFactory, T: float = None) -> List[ImmigrationEvent]:
    """Mass-carrying immigration: events at rate integral y e^{-w y}
    pi(x, dy); the initial subprocess mass is the jump size drawn from
    the discounted size-biased law."""
    if mech.pi.is_empty:
        return []
    T = T if T is not None else engine.horizon
    zs = mech.pi.sizes
    rate_max = float(sum(c.upper * z * math.exp(-w.lower * z)
                         for z, c in zip(zs, mech.pi.weights)))

    def rate_fn(x):
        return float(sum(float(c(x)) * z * math.exp(-float(w(x)) * z)
                         for z, c in zip(zs, mech.pi.weights)))

    out = []
    for node in tree:
        t_end = min(T, node.end)
        if t_end <= node.birth:
            continue
        rng = streams.get("disc", node.label)
        events = _segment_events(node, rate_fn, rate_max, t_end, rng)
        for j, (r, x) in enumerate(events):
            sizes, wt = discontinuous_mass_weights(mech, w, x)
            p = wt / wt.sum()
            y = float(sizes[rng.choice(len(sizes), p=p)])
            k, snaps = engine.launch(streams.child("disc-sub", node.label, j),
                                     x, y, r)
            out.append(ImmigrationEvent("discontinuous", node.label, r, x, y, k, snaps))
    return out


def immigrate_branchpoint(tree: BackboneTree, engine: SubprocessEngine,
                          mech: BranchingMechanism, w: SpatialField,
                          streams: StreamFactory, T: float = None) -> List[ImmigrationEvent]:
    """Branch-point immigration: at every branch time, an extra mass
    drawn from the offspring-biased law starts a conditioned subprocess
    at the branch location (zero mass for the purely quadratic part)."""
    T = T if T is not None else engine.horizon
    out = []
    for node in tree.branch_points():
        if node.end > T:
            continue
        x = float(node.path[-1])
        rng = streams.get("bp", node.label)
        y = branch_mass_sampler(mech, w, x, node.n_offspring, rng)
        node.branch_mass = y
        if y <= 0:
            out.append(ImmigrationEvent("branchpoint", node.label, node.end, x,
                                        0.0, 0, [np.empty(0) for _ in engine.snap_times]))
            continue
        k, snaps = engine.launch(streams.child("bp-sub", node.label), x, y, node.end)
        out.append(ImmigrationEvent("branchpoint", node.label, node.end, x, y, k, snaps))
    return out


def assemble_delta(mech: BranchingMechanism, w: SpatialField,
                   spec: DiffusionSpec, mu_atoms, T: float,
                   snap_times: Sequence[float], streams: StreamFactory,
                   n: int = 1000, n_sub: int = 100, eps: float = 1e-2,
                   dt: float = 1e-3, D: Optional[Tuple[float, float]] = None,
                   mode: str = "bulk", law: BackboneBranchingLaw = None,
                   motion: DiffusionSpec = None,
                   mech_star: BranchingMechanism = None,
                   max_segments: int = 100_000_000):
    """One replication of the decorated process.

    Returns (list of DecoratedState per snapshot time, BackboneTree,
    events).  The conditioned side X* runs at level n from mu; each
    immigrant subprocess runs at level n_sub.
    """
    snap_times = np.asarray(snap_times, dtype=float)
    mech_star = mech_star or conditioned_mechanism(mech, w)
    tree = sample_backbone(mech, w, spec, mu_atoms, T, dt, streams, D=D,
                           law=law, motion=motion)
    engine = SubprocessEngine(mech_star, spec, n_sub, dt, snap_times, D=D,
                              mode=mode, window=None if D else spec.domain)
    ev_c = immigrate_continuum(tree, engine, mech, eps, streams.child("ic"), T)
    ev_d = immigrate_discontinuous(tree, engine, mech, w, streams.child("id"), T)
    ev_b = immigrate_branchpoint(tree, engine, mech, w, streams.child("ib"), T)

    if mode == "bulk":
        xstar_run = superprocess_approx(mech_star, spec, mu_atoms, n, T, dt,
                                        snap_times, streams.child("xstar"),
                                        D=D, max_segments=max_segments)
        xstar_snaps = [m.positions for m in xstar_run["measures"]]
    else:
        rng = streams.child("xstar").get("pop")
        x0 = poisson_atoms(mu_atoms, n, rng)
        rate_field, pmf = scaled_branch_law(mech_star, n)
        offspring = pmf(0.0) if mech_star.is_spatially_constant else pmf
        xtree = simulate_mbp(spec, rate_field, offspring, AtomicMeasure(x0),
                             T, dt, streams.child("xstar-tree"), D=D)
        xstar_snaps = [xtree.census(t).positions for t in snap_times]

    states = []
    for i, t in enumerate(snap_times):
        def gather(events):
            parts = [e.snapshots[i] for e in events if len(e.snapshots[i])]
            return np.concatenate(parts) if parts else np.empty(0)
        states.append(DecoratedState(
            t=float(t),
            xstar=WeightedMeasure(xstar_snaps[i], n),
            cont=WeightedMeasure(gather(ev_c), n_sub),
            disc=WeightedMeasure(gather(ev_d), n_sub),
            branch=WeightedMeasure(gather(ev_b), n_sub),
            backbone=tree.census(float(t)),
        ))
    return states, tree, {"continuum": ev_c, "discontinuous": ev_d,
                          "branchpoint": ev_b}


def global_limit_probe(mech: BranchingMechanism, w: SpatialField,
                       spec: DiffusionSpec, mu_atoms, T: float,
                       domain_ladder: Sequence[Tuple[float, float]],
                       seed: int, replications: int, f, h,
                       n: int = 100, n_sub: int = 20, eps: float = 0.1,
                       dt: float = 1e-2):
    """Domain-exhaustion monotonicity: under shared label-keyed streams,
    <h, Z^{D_j}_T> and <f, Delta^{D_j}_T> must be nondecreasing along a
    nested domain ladder, replication by replication.  Returns a report
    with the violation count (the contract is exactly zero)."""
    for (a1, b1), (a2, b2) in zip(domain_ladder, domain_ladder[1:]):
        if a2 > a1 or b2 < b1:
            raise ValueError("domain ladder must be nested increasing")
    snap = [T]
    violations = 0
    rows = []
    for rep in range(replications):
        z_vals, d_vals = [], []
        for D in domain_ladder:
            streams = StreamFactory(seed, "probe", rep)
            states, tree, _ = assemble_delta(
                mech, w, spec, mu_atoms, T, snap, streams, n=n, n_sub=n_sub,
                eps=eps, dt=dt, D=tuple(D), mode="tree")
            st = states[0]
            z_vals.append(st.backbone.integrate(h))
            d_vals.append(st.delta_integrate(f))
        ok = all(z_vals[j] <= z_vals[j + 1] + 1e-12 for j in range(len(z_vals) - 1)) \
            and all(d_vals[j] <= d_vals[j + 1] + 1e-12 for j in range(len(d_vals) - 1))
        if not ok:
            violations += 1
        rows.append({"rep": rep, "z": z_vals, "delta": d_vals, "monotone": ok})
    return {"replications": replications, "violations": violations, "rows": rows}
