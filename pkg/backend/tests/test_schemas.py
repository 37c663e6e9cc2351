"""
Unit tests for Pydantic schemas and data models.
Tests validation, constraints, and edge cases.
"""
from pathlib import Path

import pytest
from pydantic import ValidationError

from backend.app.models.schemas import (
    CheckResult,
    ControllerDocument,
    DelaySection,
    DesignSection,
    Headway,
    NormKind,
    PlantSpec,
    SineGainResult,
    ScenarioFile,
    SignalKind,
    SignalSpec,
    VehicleParams,
    VerifyReport,
)

SCENARIOS = Path(__file__).parent.parent.parent / "scenarios"

UNIT = {"mass_kg": 1.0, "actuator_tau_s": 1.0, "zero_sigma": 1.0}


def platoon(n: int = 2, **kwargs) -> dict:
    return {"n": n, "vehicles": [UNIT] * n, **kwargs}


class TestEnums:
    """Tests for string enums."""

    def test_norm_values(self):
        assert NormKind.H2 == "h2"
        assert NormKind.HINF == "hinf"

    def test_signal_kinds(self):
        assert {k.value for k in SignalKind} == {"pulse", "step", "sine", "trapezoid"}


class TestVehicleModels:
    """Tests for vehicle and headway models."""

    def test_vehicle_params_frozen(self):
        v = VehicleParams(index=1, **UNIT)
        with pytest.raises(ValidationError):
            v.mass_kg = 2.0

    def test_nonpositive_mass(self):
        with pytest.raises(ValidationError):
            VehicleParams(index=1, mass_kg=0.0, actuator_tau_s=1.0, zero_sigma=1.0)

    def test_negative_headway(self):
        with pytest.raises(ValidationError):
            Headway(h_seconds=-0.1)

    def test_unknown_key_rejected(self):
        with pytest.raises(ValidationError):
            VehicleParams(index=1, colour="red", **UNIT)


class TestPlantSpec:
    """G_wp must be strictly proper."""

    def test_default_double_integrator(self):
        p = PlantSpec()
        assert p.num == [1.0] and p.den == [0.0, 0.0, 1.0]

    def test_biproper_rejected(self):
        with pytest.raises(ValidationError):
            PlantSpec(num=[1.0, 1.0], den=[1.0, 1.0])

    def test_zero_denominator_rejected(self):
        with pytest.raises(ValidationError):
            PlantSpec(num=[1.0], den=[0.0, 0.0])


class TestScenarioFile:
    """Tests for the scenario document."""

    def test_minimal_defaults(self):
        s = ScenarioFile(platoon=platoon())
        assert s.design.norm == NormKind.HINF
        assert s.delays.compensated is True
        assert s.simulation.dt_s == 1e-3
        assert s.simulation.delay_model == "exact"

    def test_vehicle_count_mismatch(self):
        with pytest.raises(ValidationError):
            ScenarioFile(platoon={"n": 3, "vehicles": [UNIT]})

    def test_disturbance_index_checked(self):
        with pytest.raises(ValidationError):
            ScenarioFile(platoon=platoon(), simulation={
                "disturbances": {"5": [{"kind": "step", "amplitude": 1.0}]}})

    def test_disturbance_keys_are_ints(self):
        s = ScenarioFile(platoon=platoon(), simulation={
            "disturbances": {"2": [{"kind": "step", "amplitude": 1.0}]}})
        assert list(s.simulation.disturbances) == [2]

    def test_grid_bounds(self):
        with pytest.raises(ValidationError):
            DesignSection(grid_w_min_rad_s=10.0, grid_w_max_rad_s=1.0)

    def test_negative_delay(self):
        with pytest.raises(ValidationError):
            DelaySection(theta_s=-0.03)

    @pytest.mark.parametrize("name", ["reference", "homogeneous", "sine_response", "uncompensated"])
    def test_bundled_scenarios_parse(self, name):
        s = ScenarioFile.model_validate_json((SCENARIOS / f"{name}.json").read_text())
        assert len(s.platoon.vehicles) == s.platoon.n

    def test_reference_scenario_values(self):
        s = ScenarioFile.model_validate_json((SCENARIOS / "reference.json").read_text())
        assert s.platoon.n == 6
        assert s.platoon.h_s == 0.5
        assert (s.delays.theta_s, s.delays.phi_s) == (0.03, 0.1)
        assert list(s.simulation.disturbances) == [4]


class TestSignalSpec:
    """Tests for input signal validation."""

    def test_pulse_needs_end(self):
        with pytest.raises(ValidationError):
            SignalSpec(kind=SignalKind.PULSE, amplitude=1.0, start_s=1.0)

    def test_pulse_end_after_start(self):
        with pytest.raises(ValidationError):
            SignalSpec(kind=SignalKind.PULSE, amplitude=1.0, start_s=4.0, end_s=1.0)

    def test_sine_needs_frequency(self):
        with pytest.raises(ValidationError):
            SignalSpec(kind=SignalKind.SINE, amplitude=1.0)

    def test_step_open_ended(self):
        s = SignalSpec(kind=SignalKind.STEP, amplitude=-2.0, start_s=3.0)
        assert s.end_s is None


class TestControllerDocument:
    """Tests for the serialized controller."""

    def doc(self, indices):
        return {
            "scenario": "x", "n": len(indices), "h_s": 0.5, "norm": "hinf",
            "basis": {"degree": 2, "pole_s": 0.1},
            "vehicles": [{"index": k, "local": {"num": [1.0], "den": [1.0]}} for k in indices],
        }

    def test_valid(self):
        d = ControllerDocument(**self.doc([1, 2]))
        assert d.version == 1
        assert d.vehicles[1].feedforward is None

    def test_out_of_order(self):
        with pytest.raises(ValidationError):
            ControllerDocument(**self.doc([2, 1]))


class TestReports:
    """Computed fields on reports."""

    def test_verify_passed(self):
        ok = CheckResult(name="a", passed=True)
        bad = CheckResult(name="b", passed=False, residual=0.3)
        assert VerifyReport(scenario="x", checks=[ok]).passed
        report = VerifyReport(scenario="x", checks=[ok, bad])
        assert not report.passed
        assert report.model_dump()["passed"] is False

    def test_sine_gain_relative_error(self):
        p = SineGainResult(vehicle=2, source=2, freq_rad_s=1.0, simulated_gain=1.01, predicted_gain=1.0)
        assert p.relative_error == pytest.approx(0.01)
