import csv
import json
import os

import numpy as np
import pytest
import yaml

from corwa.certificate import save_certificate
from corwa.cli import main
from corwa.config import ConfigError, config_from_dict, load_config, save_config
from corwa.scenario import build_scenario, init_certificate
from corwa.simulate import MetricsReport, simulate


DI2 = {
    "schema": 1, "scenario": "di2", "seed": 0,
    "topology": {"q": 2, "m": 2, "radius": 10.0, "position_slice": [0]},
    "dynamics": {"coupling": 0.05, "u_max": 1.5, "sim_dt": 0.05, "sim_steps": 60},
    "sets": {"goal_radius": 0.5, "initial_low": [-1.2, -0.3],
             "initial_high": [-0.2, 0.3],
             "domain_low": [-2.0, -0.8], "domain_high": [2.0, 0.8],
             "unsafe_coord": 0, "unsafe_threshold": 1.4, "unsafe_side": "above",
             "safe_band": 0.4, "positivity_radius": 0.1},
    "training": {"learning_rate": 0.01, "epochs": 2, "batch_size": 16,
                 "dataset_size": 64, "lie_step": 0.001},
    "verifier": {"t_step": 0.001, "max_depth": 8, "max_boxes": 500,
                 "surrogate_points": 5},
    "cegis": {"max_iterations": 2},
    "nets": {"h_hidden": [4]},
}


def write_cfg(tmp_path, overrides=None, name="cfg.yaml"):
    data = json.loads(json.dumps(DI2))
    if overrides:
        data.update(overrides)
    path = tmp_path / name
    with open(path, "w") as f:
        yaml.safe_dump(data, f)
    return str(path)


class TestConfig:
    def test_round_trip_identity(self, tmp_path):
        cfg = config_from_dict(DI2)
        p = tmp_path / "a.yaml"
        save_config(cfg, p)
        again = load_config(p)
        assert again.to_dict() == cfg.to_dict()

    def test_unknown_key_rejected(self):
        bad = json.loads(json.dumps(DI2))
        bad["nonsense"] = 1
        with pytest.raises(ConfigError):
            config_from_dict(bad)

    def test_unknown_nested_key_rejected(self):
        bad = json.loads(json.dumps(DI2))
        bad["training"]["wat"] = 2
        with pytest.raises(ConfigError):
            config_from_dict(bad)

    def test_schema_version_guard(self):
        bad = json.loads(json.dumps(DI2))
        bad["schema"] = 9
        with pytest.raises(ConfigError):
            config_from_dict(bad)

    def test_unknown_scenario_rejected(self):
        bad = json.loads(json.dumps(DI2))
        bad["scenario"] = "boats"
        with pytest.raises(ConfigError):
            config_from_dict(bad)


class TestSimulate:
    def test_metric_determinism(self, tmp_path):
        cfg = config_from_dict(DI2)
        scn = build_scenario(cfg)
        cert, _ = init_certificate(scn, seed=0)
        a = simulate(scn, cert, seed=3).metrics
        b = simulate(scn, cert, seed=3).metrics
        assert a.to_dict() == b.to_dict()

    def test_zero_dynamics_constant_states(self):
        data = json.loads(json.dumps(DI2))
        data["dynamics"]["coupling"] = 0.0
        cfg = config_from_dict(data)
        scn = build_scenario(cfg)
        cert, _ = init_certificate(scn, seed=0)
        # zero the controller head so u = clamp(0) = 0
        for net in cert.controller_nets:
            net.layers[0].w[:] = 0.0
            net.layers[0].b[:] = 0.0
        # start exactly at rest
        scn.initial = [type(scn.initial[0])(np.zeros(2), np.zeros(2))
                       for _ in range(scn.q)]
        res = simulate(scn, cert, seed=0)
        assert np.allclose(res.states[0], res.states[-1])
        assert res.metrics.tracking_rmse == pytest.approx(0.0, abs=1e-12)

    def test_ttc_definition(self):
        # two agents, gap 20, closing speed 2 -> instantaneous TTC 10
        from corwa.simulate import _metrics

        class Ctx:
            @staticmethod
            def metrics_context():
                return {"kind": "di2"}
        states = np.zeros((2, 2, 2))
        states[0, 0] = (0.0, 0.0)
        states[0, 1] = (20.0, -2.0)
        states[1, 0] = (0.0, 0.0)
        states[1, 1] = (20.0 - 0.1, -2.0)   # gap shrinks 2 m/s over dt=0.05
        rep = _metrics(Ctx, states, 0.05, violations=0)
        assert rep.avg_ttc == pytest.approx(10.0)

    def test_robot_metrics_include_obstacles(self, tmp_path):
        cfg = load_config(os.path.join(os.path.dirname(__file__), "..",
                                       "configs", "robot.yaml"))
        cfg.dynamics.sim_steps = 5
        scn = build_scenario(cfg)
        cert, _ = init_certificate(scn, seed=0)
        res = simulate(scn, cert, seed=0)
        assert np.isfinite(res.metrics.min_obstacle_distance)
        assert res.metrics.min_obstacle_distance > 0


class TestCliCommands:
    def test_train_exit_zero_and_artifacts(self, tmp_path):
        cfg_path = write_cfg(tmp_path, {"out": str(tmp_path / "run")})
        rc = main(["train", "--config", cfg_path])
        assert rc == 0
        assert os.path.exists(tmp_path / "run" / "certificate.json")
        assert os.path.exists(tmp_path / "run" / "loss.csv")

    def test_verify_exit_two_on_failure(self, tmp_path):
        out = tmp_path / "run"
        cfg_path = write_cfg(tmp_path, {"out": str(out)})
        assert main(["train", "--config", cfg_path]) == 0
        # tiny budget: barely-trained certificate cannot verify
        rc = main(["verify", "--config", cfg_path, "--budget", "200"])
        assert rc == 2
        report = json.load(open(out / "verification.json"))
        assert report["verdict"] in ("Counterexample", "Unknown")
        assert report["queries"]

    def test_cegis_exit_two_on_budget_exhaustion(self, tmp_path):
        cfg_path = write_cfg(tmp_path, {"out": str(tmp_path / "run")})
        rc = main(["cegis", "--config", cfg_path])
        assert rc == 2
        rep = json.load(open(tmp_path / "run" / "cegis.json"))
        assert rep["final_status"] == "IterationBudgetExhausted"

    def test_simulate_and_report(self, tmp_path):
        out = tmp_path / "run"
        cfg_path = write_cfg(tmp_path, {"out": str(out)})
        assert main(["train", "--config", cfg_path]) == 0
        assert main(["simulate", "--config", cfg_path]) == 0
        for f in ("trajectory.csv", "metrics.json", "metrics.csv"):
            assert os.path.exists(out / f)
        assert main(["report", "--artifacts", str(out)]) == 0
        assert os.path.exists(out / "trajectory.svg")
        assert os.path.exists(out / "metrics_table.csv")
        with open(out / "metrics_table.csv") as f:
            header = next(csv.reader(f))
        assert header == list(MetricsReport.FIELDS)

    def test_report_missing_artifacts_lists_expectations(self, tmp_path):
        rc = main(["report", "--artifacts", str(tmp_path)])
        assert rc == 1

    def test_seed_override(self, tmp_path):
        out = tmp_path / "run"
        cfg_path = write_cfg(tmp_path, {"out": str(out)})
        assert main(["train", "--config", cfg_path, "--seed", "7"]) == 0
        saved = load_config(out / "config.yaml")
        assert saved.seed == 7

    def test_transfer_roundtrip(self, tmp_path):
        base = {
            "schema": 1, "scenario": "platoon", "seed": 0,
            "out": str(tmp_path / "p3"),
            "topology": {"q": 3, "m": 2, "radius": 1000.0,
                         "communicable": "chain", "position_slice": [0]},
            "dynamics": {"u_max": 5.0, "sim_dt": 0.1, "sim_steps": 50,
                         "desired_gap": 20.0, "leader_speed": 20.0},
            "sets": {"goal_radius": 1.0, "initial_low": [-3.0, -1.0],
                     "initial_high": [3.0, 1.0],
                     "domain_low": [-19.0, -3.0], "domain_high": [19.0, 3.0],
                     "unsafe_coord": 0, "unsafe_threshold": -18.0,
                     "unsafe_side": "below", "safe_band": 2.0,
                     "positivity_radius": 0.2},
            "training": {"learning_rate": 0.005, "epochs": 1, "batch_size": 16,
                         "dataset_size": 48, "lie_step": 0.001},
            "nets": {"h_hidden": [4]},
        }
        small_path = tmp_path / "p3.yaml"
        with open(small_path, "w") as f:
            yaml.safe_dump(base, f)
        big = json.loads(json.dumps(base))
        big["topology"]["q"] = 6
        big["out"] = str(tmp_path / "p6")
        big_path = tmp_path / "p6.yaml"
        with open(big_path, "w") as f:
            yaml.safe_dump(big, f)
        assert main(["train", "--config", str(small_path)]) == 0
        rc = main(["transfer", "--config", str(small_path),
                   "--large-config", str(big_path),
                   "--cert", str(tmp_path / "p3" / "certificate.json")])
        assert rc == 0
        assert os.path.exists(tmp_path / "p3" / "certificate_transferred.json")
