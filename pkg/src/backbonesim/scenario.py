"""Scenario configuration: schema, validation, and object building.

A scenario is a YAML mapping (schema documented in the README and
mirrored by the shipped files under ``backbonesim/scenarios/``).  The
seed is mandatory; every simulation entity derives its stream from it.
``scenario_hash`` fingerprints the canonical JSON form of the config;
all output files carry it so mixed-configuration inputs are rejected.

Coefficient fields accept three forms: a plain number, a ``piecewise``
step function, or an ``expression`` in x (evaluated with numpy in a
restricted namespace, with declared bounds -- bounds are contract, not
decoration: thinning rates and validation use them).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml

from .fields import SpatialField
from .fixedpoint import SolverConfig, largest_root, solve_w
from .mechanism import (BackboneBranchingLaw, BranchingMechanism,
                        LevyMeasureSpec, backbone_law, conditioned_mechanism)
from .motion import DiffusionSpec, w_transform

__all__ = ["ScenarioError", "load_scenario", "scenario_hash", "build_bundle",
           "Bundle", "builtin_scenario_path"]


class ScenarioError(ValueError):
    """Configuration rejected; the message carries the offending key."""


_EXPR_NAMES = {name: getattr(np, name) for name in
               ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "tanh",
                "cosh", "sinh", "minimum", "maximum", "where", "pi", "e")}


def _field_from(cfg, key: str, default=None) -> SpatialField:
    if cfg is None:
        if default is None:
            raise ScenarioError(f"{key}: missing required field")
        cfg = default
    if isinstance(cfg, (int, float)):
        return SpatialField(float(cfg), name=key)
    if not isinstance(cfg, dict):
        raise ScenarioError(f"{key}: expected number or mapping, got {type(cfg).__name__}")
    if "expression" in cfg:
        expr = cfg["expression"]
        if "lower" not in cfg or "upper" not in cfg:
            raise ScenarioError(f"{key}: expression fields must declare lower/upper bounds")
        code = compile(expr, f"<{key}>", "eval")
        for name in code.co_names:
            if name not in _EXPR_NAMES and name != "x":
                raise ScenarioError(f"{key}: name '{name}' not allowed in expressions")

        def fn(x, _code=code):
            return eval(_code, {"__builtins__": {}}, {**_EXPR_NAMES, "x": x})

        f = SpatialField(fn, lower=float(cfg["lower"]), upper=float(cfg["upper"]), name=key)
        f.validate_on(np.linspace(-10, 10, 2001))
        return f
    if "piecewise" in cfg:
        pw = cfg["piecewise"]
        breaks = np.asarray(pw["breaks"], dtype=float)
        values = np.asarray(pw["values"], dtype=float)
        if len(values) != len(breaks) + 1:
            raise ScenarioError(f"{key}: piecewise needs len(values) == len(breaks)+1")

        def fn(x, _b=breaks, _v=values):
            return _v[np.searchsorted(_b, x, side="right")]

        return SpatialField(fn, lower=float(values.min()), upper=float(values.max()),
                            name=key)
    raise ScenarioError(f"{key}: unrecognized field form {sorted(cfg)}")


def _jump_measure(cfg) -> LevyMeasureSpec:
    if not cfg:
        return LevyMeasureSpec.empty()
    if "atoms" in cfg:
        atoms = []
        for i, at in enumerate(cfg["atoms"]):
            if at.get("z", 0) <= 0:
                raise ScenarioError(f"mechanism.pi.atoms[{i}].z: must be positive")
            c = at.get("c", None)
            if c is None:
                raise ScenarioError(f"mechanism.pi.atoms[{i}].c: missing weight")
            atoms.append((float(at["z"]),
                          c if isinstance(c, (int, float)) else _field_from(c, f"pi.c[{i}]")))
        return LevyMeasureSpec.from_atoms(atoms)
    if "density" in cfg:
        d = cfg["density"]
        code = compile(d["expression"], "<pi.density>", "eval")
        for name in code.co_names:
            if name not in _EXPR_NAMES and name not in ("x", "z"):
                raise ScenarioError(f"pi.density: name '{name}' not allowed")

        def density(x, z, _code=code):
            return eval(_code, {"__builtins__": {}}, {**_EXPR_NAMES, "x": x, "z": z})

        nodes = np.asarray(d["z_nodes"], dtype=float)
        weights = np.asarray(d["z_weights"], dtype=float)
        return LevyMeasureSpec.from_density(
            density, nodes, weights, tail_bound=float(d.get("tail_bound", 0.0)),
            upper=float(d.get("upper", 1e6)))
    raise ScenarioError(f"mechanism.pi: unrecognized form {sorted(cfg)}")


_REQUIRED = ("name", "seed", "mechanism", "motion", "initial", "horizon", "snapshots")


def load_scenario(path=None, text=None) -> dict:
    """Parse and validate a scenario file; returns the config dict."""
    if text is None:
        with open(path) as fh:
            text = fh.read()
    try:
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"YAML parse error: {exc}")
    if not isinstance(cfg, dict):
        raise ScenarioError("scenario must be a mapping")
    for key in _REQUIRED:
        if key not in cfg:
            raise ScenarioError(f"{key}: missing required key")
    if not isinstance(cfg["seed"], int):
        raise ScenarioError("seed: must be an integer (mandatory)")
    if cfg["horizon"] <= 0:
        raise ScenarioError("horizon: must be positive")
    snaps = cfg["snapshots"]
    if not snaps or any(t < 0 or t > cfg["horizon"] for t in snaps):
        raise ScenarioError("snapshots: need times inside [0, horizon]")
    sim = cfg.setdefault("sim", {})
    sim.setdefault("n", 1000)
    sim.setdefault("n_sub", 100)
    sim.setdefault("eps", 1e-2)
    sim.setdefault("dt", 1e-3)
    sim.setdefault("replications", 1000)
    sim.setdefault("pop_cap", 100_000_000)
    if sim["eps"] <= 0 or sim["eps"] > 1:
        raise ScenarioError("sim.eps: must lie in (0, 1]")
    if sim["dt"] <= 0:
        raise ScenarioError("sim.dt: must be positive")
    cfg.setdefault("solver", {})
    cfg.setdefault("tests", {})
    cfg.setdefault("domain_ladder", [[-1.0, 1.0], [-2.0, 2.0], [-4.0, 4.0]])
    cfg.setdefault("corrupt_w_factor", 1.0)
    # build once to surface configuration errors early
    build_mechanism(cfg["mechanism"])
    build_motion(cfg["motion"])
    for i, at in enumerate(cfg["initial"].get("atoms", [])):
        if at.get("mass", -1) < 0:
            raise ScenarioError(f"initial.atoms[{i}].mass: must be nonnegative")
    return cfg


def scenario_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=float).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def build_mechanism(mcfg) -> BranchingMechanism:
    alpha = _field_from(mcfg.get("alpha"), "mechanism.alpha")
    beta = _field_from(mcfg.get("beta"), "mechanism.beta")
    if beta.lower < 0:
        raise ScenarioError("mechanism.beta: must be nonnegative")
    return BranchingMechanism(alpha, beta, _jump_measure(mcfg.get("pi")))


def build_motion(mcfg) -> DiffusionSpec:
    a = _field_from(mcfg.get("a"), "motion.a")
    b = _field_from(mcfg.get("b", 0.0), "motion.b")
    if a.lower <= 0:
        raise ScenarioError("motion.a: must be bounded away from 0 (ellipticity)")
    dom = mcfg.get("domain")
    domain = tuple(float(v) for v in dom) if dom else None
    return DiffusionSpec.build(a, b, domain=domain)


def solver_config(cfg: dict) -> SolverConfig:
    s = cfg.get("solver", {})
    return SolverConfig(
        tol=float(s.get("tol", 1e-9)),
        max_iter=int(s.get("max_iter", 300)),
        dt=float(s.get("dt", 5e-3)),
        n_x=int(s.get("n_x", 101)),
        kernel=s.get("kernel", "auto"),
        mc_samples=int(s.get("mc_samples", 4000)),
        identity_allowance=float(s.get("identity_allowance", 0.0)),
    )


@dataclass
class Bundle:
    """Scenario objects, built once per process."""

    cfg: dict
    hash: str
    mech: BranchingMechanism
    spec: DiffusionSpec
    w: SpatialField
    law: BackboneBranchingLaw
    motion_w: DiffusionSpec
    mech_star: BranchingMechanism
    mu_atoms: list
    w_diag: dict = field(default_factory=dict)

    @property
    def total_w_mass(self) -> float:
        return sum(float(self.w(x)) * m for x, m in self.mu_atoms)


def build_bundle(cfg: dict, w_field: Optional[SpatialField] = None) -> Bundle:
    """Build all scenario objects.  The survival exponent comes from the
    root shortcut for spatially constant mechanisms (exact), from the
    ladder solver otherwise; ``corrupt_w_factor`` scales it afterwards
    (the verification negative control)."""
    mech = build_mechanism(cfg["mechanism"])
    spec = build_motion(cfg["motion"])
    diag = {}
    if w_field is None:
        if mech.is_spatially_constant and spec.domain is None:
            root = largest_root(mech)
            if root <= 0:
                raise ScenarioError("mechanism is not supercritical: the "
                                    "survival exponent vanishes")
            w_field = SpatialField(root, name="w")
            diag = {"method": "root", "w": root}
        else:
            gf, diag = solve_w(mech, spec, solver_config(cfg))
            core = cfg.get("w_core")
            if core:
                xs = np.linspace(core[0], core[1], 201)
                floor = float(np.min(gf.at(xs)))
            else:
                floor = max(float(gf.final().min()), 1e-12)
            if floor <= 0:
                raise ScenarioError("survival exponent not bounded away from 0 "
                                    "on the configured core region")
            w_field = gf.as_spatial_field(floor=floor)
            diag["method"] = "ladder"
    factor = float(cfg.get("corrupt_w_factor", 1.0))
    if factor != 1.0:
        base = w_field
        if base.constant is not None:
            w_field = SpatialField(base.constant * factor, name="w(corrupt)")
        else:
            w_field = SpatialField(lambda x: factor * base(x),
                                   lower=base.lower * factor,
                                   upper=base.upper * factor, name="w(corrupt)")
        diag["corrupt_factor"] = factor
    law = backbone_law(mech, w_field)
    motion_w = w_transform(spec, w_field)
    mech_star = conditioned_mechanism(mech, w_field)
    mu_atoms = [(float(a["x"]), float(a["mass"]))
                for a in cfg["initial"].get("atoms", [])]
    return Bundle(cfg, scenario_hash(cfg), mech, spec, w_field, law, motion_w,
                  mech_star, mu_atoms, diag)


def builtin_scenario_path(name: str):
    from importlib import resources
    base = resources.files("backbonesim") / "scenarios" / f"{name}.yaml"
    if not base.is_file():
        avail = sorted(p.name[:-5] for p in (resources.files("backbonesim") / "scenarios").iterdir()
                       if p.name.endswith(".yaml"))
        raise ScenarioError(f"unknown scenario '{name}'; built-ins: {avail}")
    return base
