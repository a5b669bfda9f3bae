import json
import math
from pathlib import Path

import numpy as np
import pytest

from backbonesim.cli import main
from backbonesim.scenario import (ScenarioError, build_bundle,
                                  builtin_scenario_path, load_scenario,
                                  scenario_hash)

MINI = """
name: mini
seed: 7
mechanism: {alpha: 1.0, beta: 1.0, pi: {}}
motion: {a: 0.5, b: 0.0, domain: null}
initial: {atoms: [{x: 0.0, mass: 1.0}]}
horizon: 0.5
snapshots: [0.5]
solver: {dt: 0.01, n_x: 21}
sim: {n: 60, n_sub: 20, eps: 0.05, dt: 0.005, replications: 60}
tests:
  suite: [equivalence]
  thetas: [1.0]
  times: [0.5]
  pilot_replications: 30
  eps_refinement: [0.25, 0.05]
"""


@pytest.fixture
def mini_cfg(tmp_path):
    p = tmp_path / "mini.yaml"
    p.write_text(MINI)
    return p


class TestScenario:
    def test_load_and_hash_stable(self, mini_cfg):
        c1 = load_scenario(mini_cfg)
        c2 = load_scenario(mini_cfg)
        assert scenario_hash(c1) == scenario_hash(c2)

    def test_missing_seed(self):
        with pytest.raises(ScenarioError, match="seed"):
            load_scenario(text="name: x\nmechanism: {alpha: 1, beta: 1}\n"
                               "motion: {a: 0.5, b: 0}\ninitial: {atoms: []}\n"
                               "horizon: 1\nsnapshots: [1]\n")

    def test_bad_key_diagnostics(self):
        with pytest.raises(ScenarioError, match="beta"):
            load_scenario(text=MINI.replace("beta: 1.0", "beta: -1.0"))
        with pytest.raises(ScenarioError, match="eps"):
            load_scenario(text=MINI.replace("eps: 0.05", "eps: 2.0"))

    def test_expression_fields(self):
        cfg = load_scenario(text=MINI.replace(
            "beta: 1.0",
            "beta: {expression: '1.0 + 0.1*cos(x)', lower: 0.9, upper: 1.1}"))
        b = build_bundle(cfg)
        assert b.mech.beta(0.0) == pytest.approx(1.1)

    def test_expression_rejects_names(self):
        with pytest.raises(ScenarioError, match="not allowed"):
            load_scenario(text=MINI.replace(
                "beta: 1.0",
                "beta: {expression: '__import__(1)', lower: 0, upper: 1}"))

    def test_builtin_scenarios_load(self):
        for name in ("quadratic", "stable_atom", "spatial_beta"):
            cfg = load_scenario(text=builtin_scenario_path(name).read_text())
            assert cfg["name"] == name

    def test_unknown_builtin(self):
        with pytest.raises(ScenarioError, match="built-ins"):
            builtin_scenario_path("nope")

    def test_corrupt_factor_scales_w(self, mini_cfg):
        cfg = load_scenario(mini_cfg)
        cfg["corrupt_w_factor"] = 0.5
        b = build_bundle(cfg)
        assert float(b.w(0.0)) == pytest.approx(0.5)


class TestCli:
    def test_malformed_config_exit_2(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text("horizon: -1\n")
        with pytest.raises(SystemExit) as exc:
            main(["solve", "--config", str(p)])
        assert exc.value.code == 2

    def test_solve_outputs(self, mini_cfg, tmp_path):
        out = tmp_path / "out"
        assert main(["solve", "--config", str(mini_cfg), "--out", str(out)]) == 0
        w_rows = (out / "w.csv").read_text().strip().splitlines()
        assert w_rows[0] == "x,t,value"
        vals = [float(r.split(",")[2]) for r in w_rows[1:]]
        assert max(abs(v - 1.0) for v in vals) < 1e-9
        assert (out / "consistency.json").exists()
        cons = json.loads((out / "consistency.json").read_text())
        assert cons["residual_lhs_rhs"] < 1e-6

    def test_simulate_deterministic(self, mini_cfg, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        for out in (out1, out2):
            rc = main(["simulate", "--config", str(mini_cfg), "--target", "X",
                       "--replications", "5", "--out", str(out)])
            assert rc == 0
        assert (out1 / "x_runs.csv").read_bytes() == (out2 / "x_runs.csv").read_bytes()
        assert (out1 / "x_manifest.json").read_bytes() == \
            (out2 / "x_manifest.json").read_bytes()

    def test_simulate_zero_replications(self, mini_cfg, tmp_path):
        out = tmp_path / "z"
        rc = main(["simulate", "--config", str(mini_cfg), "--target", "delta",
                   "--replications", "0", "--out", str(out)])
        assert rc == 0
        rows = (out / "delta_runs.csv").read_text().strip().splitlines()
        assert len(rows) == 1  # header only

    def test_simulate_backbone_records(self, mini_cfg, tmp_path):
        out = tmp_path / "bb"
        rc = main(["simulate", "--config", str(mini_cfg), "--target", "backbone",
                   "--replications", "3", "--out", str(out)])
        assert rc == 0
        rows = (out / "backbone_runs.csv").read_text().strip().splitlines()
        assert rows[0].startswith("replication,label,parent,birth,death")

    def test_verify_pass_and_report(self, mini_cfg, tmp_path):
        out = tmp_path / "v"
        rc = main(["verify", "--config", str(mini_cfg), "--out", str(out),
                   "--threads", "1"])
        assert rc == 0
        payload = json.loads((out / "report.json").read_text())
        assert payload["passed"]
        assert (out / "summary.csv").exists()
        rc = main(["report", "--config", str(mini_cfg), "--out", str(out)])
        assert rc == 0
        long_rows = (out / "report_long.csv").read_text().splitlines()
        assert long_rows[0] == "test,quantity,value"
        assert len(long_rows) > 5

    def test_report_hash_mismatch_rejected(self, mini_cfg, tmp_path):
        out = tmp_path / "v2"
        assert main(["verify", "--config", str(mini_cfg), "--out", str(out),
                     "--threads", "1"]) == 0
        other = tmp_path / "other.yaml"
        other.write_text(MINI.replace("seed: 7", "seed: 8"))
        assert main(["report", "--config", str(other), "--out", str(out)]) == 1

    def test_negative_control_fails(self, mini_cfg, tmp_path):
        # halving the survival exponent must break the equivalence test
        out = tmp_path / "nc"
        rc = main(["verify", "--config", str(mini_cfg), "--out", str(out),
                   "--threads", "1", "--corrupt-w", "0.5",
                   "--suite", "equivalence"])
        assert rc == 1
