"""Scenario-driven command line.

Subcommands:
  solve      solver targets (survival exponent, Laplace exponents, the
             joint functional, consistency residuals) -> CSV + JSON
  simulate   replication batches for X, the decorated process, or the
             backbone -> manifest + CSV archives
  verify     the statistical certificate suite -> report JSON + summary
             CSV; exit 0 iff every selected test passes
  report     flatten a report JSON into plot-ready long-format CSV

Common flags: --config PATH or --scenario NAME (built-in), --seed N,
--out DIR, --threads N.  All outputs are deterministic functions of
(config, seed): no timestamps, sorted keys, repr-exact floats; every
file carries the scenario hash, and mixed-hash inputs are rejected.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .fixedpoint import solve_u, solve_u_star, solve_v, check_poissonization
from .particle import superprocess_approx
from .backbone import sample_backbone, assemble_delta
from .rng import StreamFactory
from .scenario import (ScenarioError, build_bundle, builtin_scenario_path,
                       load_scenario, scenario_hash, solver_config)
from .verify import ScenarioVerifier

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _load(args) -> dict:
    try:
        if args.config:
            cfg = load_scenario(args.config)
        elif args.scenario:
            cfg = load_scenario(text=builtin_scenario_path(args.scenario).read_text())
        else:
            raise ScenarioError("need --config PATH or --scenario NAME")
        if args.seed is not None:
            cfg["seed"] = int(args.seed)
        if getattr(args, "corrupt_w", None):
            cfg["corrupt_w_factor"] = float(args.corrupt_w)
        if getattr(args, "replications", None):
            cfg["sim"]["replications"] = int(args.replications)
        return cfg
    except (ScenarioError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def _outdir(args, cfg) -> Path:
    out = Path(args.out or f"out/{cfg['name']}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=float)
        fh.write("\n")


def cmd_solve(args) -> int:
    cfg = _load(args)
    out = _outdir(args, cfg)
    bundle = build_bundle(cfg)
    scfg = solver_config(cfg)
    h = bundle.hash
    meta = {"hash": h, "seed": cfg["seed"], "name": cfg["name"],
            "w_diagnostics": bundle.w_diag}

    xs = np.linspace(-4.0, 4.0, 81) if bundle.spec.domain is None else \
        np.linspace(bundle.spec.domain[0], bundle.spec.domain[1], 81)
    with open(out / "w.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x", "t", "value"])
        for x in xs:
            wr.writerow([repr(float(x)), "", repr(float(bundle.w(float(x))))])
    _write_json(out / "w.csv.json", meta)

    thetas = [float(v) for v in cfg.get("tests", {}).get("thetas", [1.0])]
    for theta in thetas:
        u = solve_u(bundle.mech, bundle.spec, theta, cfg["horizon"], scfg)
        u.meta.update(meta)
        u.write_csv(out / f"u_theta{theta:g}.csv")

    tcfg = cfg.get("tests", {})
    D = tuple(tcfg.get("identity_domain", (-2.0, 2.0)))
    T = float(tcfg.get("identity_horizon", min(1.0, cfg["horizon"])))
    f0 = float(tcfg.get("identity_f", 1.0))
    h0 = float(tcfg.get("identity_h", 1.0))
    ustar = solve_u_star(bundle.mech, bundle.spec, D, bundle.w, f0, T, scfg)
    ustar.meta.update(meta)
    ustar.write_csv(out / "u_star.csv")
    ev = solve_v(bundle.mech, bundle.spec, D, bundle.w, f0, h0, T, scfg)
    ev.meta.update(meta)
    ev.write_csv(out / "exp_minus_v.csv")
    rep = check_poissonization(bundle.mech, bundle.spec, D, bundle.w, f0, h0, T, scfg)
    _write_json(out / "consistency.json",
                {**meta, "residual_lhs_rhs": rep["residual_lhs_rhs"],
                 "residual_lhs_plain": rep["residual_lhs_plain"],
                 "residual_rhs_plain": rep["residual_rhs_plain"],
                 "shift_identity_residual": ustar.meta["shift_identity_residual"]})
    print(f"solve: wrote {out} (hash {h})")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load(args)
    out = _outdir(args, cfg)
    bundle = build_bundle(cfg)
    sim = cfg["sim"]
    reps = int(sim["replications"])
    snaps = [float(t) for t in cfg["snapshots"]]
    target = args.target
    rows = []
    censored = 0
    totals = {}
    for rep in range(reps):
        streams = StreamFactory(cfg["seed"], f"sim-{target}", rep)
        if target == "X":
            r = superprocess_approx(bundle.mech, bundle.spec, bundle.mu_atoms,
                                    sim["n"], cfg["horizon"], sim["dt"], snaps,
                                    streams, max_segments=sim["pop_cap"])
            censored += int(r["censored"])
            for t, m in zip(snaps, r["measures"]):
                rows.append((rep, t, "mass", m.total_mass))
                if args.dump_positions:
                    rows.extend((rep, t, "atom", p) for p in m.positions)
        elif target == "delta":
            states, tree, _ = assemble_delta(
                bundle.mech, bundle.w, bundle.spec, bundle.mu_atoms,
                cfg["horizon"], snaps, streams, n=sim["n"], n_sub=sim["n_sub"],
                eps=sim["eps"], dt=sim["dt"], law=bundle.law,
                motion=bundle.motion_w, mech_star=bundle.mech_star,
                max_segments=sim["pop_cap"])
            for st in states:
                for comp, val in zip(("xstar", "continuum", "discontinuous",
                                      "branchpoint", "backbone_count"),
                                     (*st.components_integrate(1.0),
                                      st.backbone.count)):
                    rows.append((rep, st.t, comp, val))
        elif target == "backbone":
            tree = sample_backbone(bundle.mech, bundle.w, bundle.spec,
                                   bundle.mu_atoms, cfg["horizon"], sim["dt"],
                                   streams, law=bundle.law,
                                   motion=bundle.motion_w)
            for rec in tree.records():
                rows.append((rep, *rec))
        else:
            print(f"unknown simulate target {target}", file=sys.stderr)
            return EXIT_CONFIG
    for r in rows:
        key = r[2] if target != "backbone" else "nodes"
        totals[key] = totals.get(key, 0.0) + (float(r[3]) if target != "backbone" else 1)

    name = f"{target.lower()}_runs.csv"
    with open(out / name, "w", newline="") as fh:
        wr = csv.writer(fh)
        if target == "backbone":
            wr.writerow(["replication", "label", "parent", "birth", "death",
                         "offspring", "branch_mass", "fate"])
        else:
            wr.writerow(["replication", "time", "component", "value"])
        for r in rows:
            wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating))
                         else v for v in r])
    _write_json(out / f"{target.lower()}_manifest.json", {
        "hash": bundle.hash, "name": cfg["name"], "seed": cfg["seed"],
        "target": target, "replications": reps, "n": sim["n"],
        "n_sub": sim["n_sub"], "eps": sim["eps"], "dt": sim["dt"],
        "censored": censored, "component_totals": totals,
        "kernel_backend": kernels.BACKEND})
    print(f"simulate {target}: {reps} replications -> {out / name}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = _load(args)
    out = _outdir(args, cfg)
    verifier = ScenarioVerifier(cfg, threads=args.threads)
    suites = args.suite.split(",") if args.suite else None
    reports, ok = verifier.run(suites)
    payload = {
        "hash": verifier.bundle.hash, "name": cfg["name"], "seed": cfg["seed"],
        "kernel_backend": kernels.BACKEND,
        "passed": ok,
        "reports": [json.loads(r.to_json()) for r in reports],
        "artifacts": {k: v for k, v in verifier.artifacts.items()
                      if k in ("scenario", "hash", "budgets")},
    }
    _write_json(out / "report.json", payload)
    with open(out / "summary.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["test", "estimate_a", "estimate_b", "combined_se",
                     "z_score", "pass"])
        for r in reports:
            tid, a, b, se, z, p = r.summary_row()
            wr.writerow([tid, repr(a), repr(b), repr(se), repr(z), p])
    for r in reports:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.test_id}: "
              f"A={r.estimate_a:.5f} B={r.estimate_b:.5f} z={r.z_score:+.2f}")
    print(f"verify: {'all tests passed' if ok else 'FAILURES'} -> {out}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_report(args) -> int:
    cfg = _load(args)
    out = _outdir(args, cfg)
    src = out / "report.json"
    if not src.exists():
        print(f"no report at {src}; run verify first", file=sys.stderr)
        return EXIT_FAIL
    payload = json.loads(src.read_text())
    if payload.get("hash") != scenario_hash(cfg):
        print("report hash does not match this configuration", file=sys.stderr)
        return EXIT_FAIL
    with open(out / "report_long.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["test", "quantity", "value"])
        for r in payload["reports"]:
            for q in ("estimate_a", "se_a", "estimate_b", "se_b", "z_score",
                      "threshold", "passed"):
                wr.writerow([r["test_id"], q, repr(r[q]) if isinstance(r[q], float)
                             else r[q]])
            for k, v in r.get("bias_budget", {}).items():
                wr.writerow([r["test_id"], f"budget:{k}", repr(float(v))])
    print(f"report: wrote {out / 'report_long.csv'}")
    return EXIT_OK


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="backbonesim",
        description="backbone decomposition of supercritical superprocesses: "
                    "solve, simulate, verify")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="scenario YAML path")
        p.add_argument("--scenario", help="built-in scenario name")
        p.add_argument("--seed", type=int, help="override the scenario seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="parallel workers over replications")

    p = sub.add_parser("solve", help="run the integral-equation targets")
    common(p)
    p.set_defaults(fn=cmd_solve)

    p = sub.add_parser("simulate", help="run replication batches")
    common(p)
    p.add_argument("--target", choices=("X", "delta", "backbone"), default="X")
    p.add_argument("--replications", type=int, help="override sim.replications")
    p.add_argument("--dump-positions", action="store_true",
                   help="write atom-level snapshot rows (large)")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("verify", help="run the statistical certificates")
    common(p)
    p.add_argument("--suite", help="comma-separated subset of test suites")
    p.add_argument("--corrupt-w", type=float, default=None,
                   help="scale the survival exponent (negative control)")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("report", help="flatten report JSON to long CSV")
    common(p)
    p.set_defaults(fn=cmd_report)

    args = ap.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
