"""
Tests for the command-line front end and its exit codes.
"""
import json

import pytest

from backend.app import cli
from backend.app.core.config import settings
from backend.app.core.errors import DegenerateCancellation
from backend.app.services import workflows

SMALL = {
    "name": "pair",
    "platoon": {
        "n": 2,
        "vehicles": [
            {"mass_kg": 8.0, "actuator_tau_s": 0.1, "zero_sigma": 1.0},
            {"mass_kg": 4.0, "actuator_tau_s": 0.2, "zero_sigma": 2.0},
        ],
        "h_s": 0.5,
    },
    "design": {"basis_degree": 3, "basis_pole_s": 0.2, "grid_points": 60},
    "simulation": {
        "dt_s": 0.002,
        "duration_s": 4.0,
        "leader_control": [{"kind": "pulse", "amplitude": 1.0, "start_s": 0.5, "end_s": 1.5}],
    },
}


@pytest.fixture
def scenario_path(tmp_path):
    path = tmp_path / "pair.json"
    path.write_text(json.dumps(SMALL))
    return path


@pytest.fixture
def controller_path(tmp_path, scenario_path):
    out = tmp_path / "pair.controller.json"
    assert cli.main(["synth", str(scenario_path), "--out", str(out)]) == cli.EXIT_OK
    return out


class TestSynthCommand:
    """platoon synth"""

    def test_writes_controller(self, capsys, controller_path):
        doc = json.loads(controller_path.read_text())
        assert doc["n"] == 2 and doc["scenario"] == "pair"
        assert "bezout residual" in capsys.readouterr().out

    def test_norm_override(self, tmp_path, scenario_path):
        out = tmp_path / "h2.json"
        assert cli.main(["synth", str(scenario_path), "--norm", "h2", "--out", str(out)]) == cli.EXIT_OK
        assert json.loads(out.read_text())["norm"] == "h2"

    def test_missing_file(self, tmp_path):
        assert cli.main(["synth", str(tmp_path / "nope.json")]) == cli.EXIT_INVALID_INPUT

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert cli.main(["synth", str(path)]) == cli.EXIT_INVALID_INPUT

    def test_schema_violation(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({**SMALL, "platoon": {**SMALL["platoon"], "n": 3}}))
        assert cli.main(["synth", str(path)]) == cli.EXIT_INVALID_INPUT

    def test_design_failure(self, scenario_path, monkeypatch):
        def fail(scenario):
            raise DegenerateCancellation("numerator nearly vanishes at a pole")
        monkeypatch.setattr(workflows, "synth", fail)
        assert cli.main(["synth", str(scenario_path)]) == cli.EXIT_DESIGN_FAILURE


class TestVerifyCommand:
    """platoon verify"""

    def test_pass(self, controller_path, scenario_path, capsys):
        assert cli.main(["verify", str(controller_path), str(scenario_path)]) == cli.EXIT_OK
        assert "[FAIL]" not in capsys.readouterr().out

    def test_altered_controller_fails(self, controller_path, scenario_path):
        doc = json.loads(controller_path.read_text())
        doc["vehicles"][1]["feedforward"]["num"] = [3.0 * x for x in doc["vehicles"][1]["feedforward"]["num"]]
        controller_path.write_text(json.dumps(doc))
        assert cli.main(["verify", str(controller_path), str(scenario_path)]) == cli.EXIT_VERIFY_FAILED

    def test_wrong_platoon(self, controller_path, tmp_path):
        other = tmp_path / "other.json"
        other.write_text(json.dumps({**SMALL, "platoon": {**SMALL["platoon"], "h_s": 0.0}}))
        assert cli.main(["verify", str(controller_path), str(other)]) == cli.EXIT_INVALID_INPUT

    def test_design_delay_mismatch(self, controller_path, tmp_path):
        """A delay-free design checked against a delayed scenario"""
        delayed = tmp_path / "delayed.json"
        delayed.write_text(json.dumps({**SMALL, "delays": {"theta_s": 0.03, "phi_s": 0.1}}))
        assert cli.main(["verify", str(controller_path), str(delayed)]) == cli.EXIT_DESIGN_FAILURE


class TestSimulateCommand:
    """platoon simulate"""

    def test_outputs(self, controller_path, scenario_path, tmp_path):
        out = tmp_path / "run"
        assert cli.main(["simulate", str(controller_path), str(scenario_path), "--out", str(out)]) == cli.EXIT_OK
        names = {p.name for p in out.iterdir()}
        assert {"trajectories.csv", "metrics.json", "inputs.svg", "spacing.svg",
                "position.svg", "velocity.svg"} <= names
        summary = json.loads((out / "metrics.json").read_text())
        assert summary["metrics"]["nonzero_channels"] == [1]

    def test_non_integer_delay(self, tmp_path):
        path = tmp_path / "delayed.json"
        path.write_text(json.dumps({**SMALL, "delays": {"theta_s": 0.03, "phi_s": 0.1}}))
        ctrl = tmp_path / "delayed.controller.json"
        assert cli.main(["synth", str(path), "--out", str(ctrl)]) == cli.EXIT_OK
        code = cli.main(["simulate", str(ctrl), str(path), "--dt", "0.003", "--out", str(tmp_path / "r")])
        assert code == cli.EXIT_INVALID_INPUT

    def test_divergence(self, controller_path, scenario_path, tmp_path, monkeypatch):
        monkeypatch.setattr(settings, "DIVERGENCE_LIMIT", 1e-3)
        code = cli.main(["simulate", str(controller_path), str(scenario_path), "--out", str(tmp_path / "r")])
        assert code == cli.EXIT_DIVERGENCE


class TestParser:
    """Argument parsing."""

    def test_command_required(self):
        with pytest.raises(SystemExit):
            cli.main([])

    def test_example_defaults(self):
        args = cli.build_parser().parse_args(["example"])
        assert args.h == 0.5 and args.duration == 60.0 and args.dt is None
