"""
Integration tests for the synth / verify / simulate pipelines and the
CSV / SVG exports.
"""
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from backend.app.core.errors import MismatchedPlantDelay
from backend.app.models.schemas import ControllerDocument, NormKind, ScenarioFile
from backend.app.services.reporting import CSV_NAME, PANELS, to_frame, write_csv, write_svg_panels
from backend.app.services.workflows import (
    apply_overrides,
    load_scenario,
    simulate_workflow,
    synth,
    verify,
)

SCENARIOS = Path(__file__).parent.parent.parent / "scenarios"

pytestmark = pytest.mark.integration


def small_scenario(**delays) -> ScenarioFile:
    return ScenarioFile.model_validate({
        "name": "small",
        "platoon": {
            "n": 2,
            "vehicles": [
                {"mass_kg": 8.0, "actuator_tau_s": 0.1, "zero_sigma": 1.0},
                {"mass_kg": 4.0, "actuator_tau_s": 0.2, "zero_sigma": 2.0},
            ],
            "h_s": 0.5,
        },
        "design": {"norm": "hinf", "basis_degree": 3, "basis_pole_s": 0.2, "grid_points": 80},
        "delays": delays,
        "simulation": {
            "dt_s": 0.001,
            "duration_s": 6.0,
            "leader_control": [{"kind": "pulse", "amplitude": 1.0, "start_s": 0.5, "end_s": 2.0}],
            "disturbances": {"2": [{"kind": "pulse", "amplitude": 0.5, "start_s": 3.0, "end_s": 4.0}]},
        },
    })


@pytest.fixture(scope="module")
def outcome():
    return synth(small_scenario())


class TestOverrides:
    """Command-line overrides."""

    def test_overrides_win(self):
        s = apply_overrides(small_scenario(), norm=NormKind.H2, basis_degree=5, grid_points=40, dt_s=0.002)
        assert s.design.norm == NormKind.H2
        assert s.design.basis_degree == 5
        assert s.design.grid_points == 40
        assert s.simulation.dt_s == 0.002

    def test_none_keeps_file_values(self):
        s = small_scenario()
        assert apply_overrides(s) == s

    def test_load_bundled(self):
        assert load_scenario(SCENARIOS / "homogeneous.json").design.norm == NormKind.H2


class TestSynth:
    """Design pipeline."""

    def test_report(self, outcome):
        r = outcome.report
        assert r.scenario == "small"
        assert len(r.local_norms) == 2
        assert all(np.isfinite(r.local_norms))
        assert r.bezout_residual < 1e-8
        assert r.homogeneous_bound is None

    def test_document_shape(self, outcome):
        doc = outcome.document
        assert [v.index for v in doc.vehicles] == [1, 2]
        assert doc.vehicles[0].feedforward is None
        assert doc.vehicles[1].feedforward is not None
        assert len(doc.vehicles[0].q_coefficients) == 4

    def test_homogeneous_bound_reported(self):
        s = apply_overrides(load_scenario(SCENARIOS / "homogeneous.json"), basis_degree=3, grid_points=60)
        report = synth(s).report
        assert report.homogeneous_bound is not None
        assert report.homogeneous_bound > 0


class TestVerify:
    """The verify battery on designed and altered controllers."""

    def test_json_round_trip_passes(self, outcome):
        doc = ControllerDocument.model_validate_json(outcome.document.model_dump_json())
        report = verify(small_scenario(), doc)
        assert report.passed, [c for c in report.checks if not c.passed]
        assert {c.name for c in report.checks} == {
            "bezout", "leader_information", "t_zw_bidiagonal", "s_membership", "string_stability"}

    def test_altered_feedforward_fails(self, outcome):
        data = outcome.document.model_dump()
        data["vehicles"][1]["feedforward"]["num"] = [2.0 * x for x in data["vehicles"][1]["feedforward"]["num"]]
        report = verify(small_scenario(), ControllerDocument.model_validate(data))
        failed = {c.name for c in report.checks if not c.passed}
        assert "leader_information" in failed
        assert "s_membership" in failed

    def test_without_youla_coefficients(self, outcome):
        data = outcome.document.model_dump()
        for v in data["vehicles"]:
            v["q_coefficients"] = []
        report = verify(small_scenario(), ControllerDocument.model_validate(data))
        stab = next(c for c in report.checks if c.name == "string_stability")
        assert stab.passed and stab.detail.startswith("skipped")

    def test_platoon_mismatch(self, outcome):
        other = load_scenario(SCENARIOS / "homogeneous.json")
        with pytest.raises(ValueError):
            verify(other, outcome.document)

    def test_uncompensated_broadcast_fails(self):
        s = small_scenario(theta_s=0.03, phi_s=0.1, compensated=False)
        report = verify(s, synth(s).document)
        assert not report.passed
        assert not next(c for c in report.checks if c.name == "leader_information").passed

    def test_compensated_controller_passes(self):
        """Measurement delay placed by the controller, plant delayed by φ only"""
        s = small_scenario(theta_s=0.03, phi_s=0.1)
        doc = synth(s).document
        assert doc.measurement_delay_s == pytest.approx(0.03)
        report = verify(s, doc)
        assert report.passed, [c for c in report.checks if not c.passed]

    def test_design_delay_mismatch(self):
        """An uncompensated design loaded under a compensated scenario is rejected"""
        doc = synth(small_scenario(theta_s=0.03, phi_s=0.1, compensated=False)).document
        compensated = small_scenario(theta_s=0.03, phi_s=0.1)
        with pytest.raises(MismatchedPlantDelay):
            verify(compensated, doc)
        with pytest.raises(MismatchedPlantDelay):
            simulate_workflow(compensated, doc)
        assert not next(c for c in report.checks if c.name == "leader_information").passed


class TestSimulateAndExport:
    """Simulation summary, CSV and SVG panels."""

    def test_summary(self, outcome):
        r, summary = simulate_workflow(small_scenario(), outcome.document)
        assert summary.samples == r.t.size == 6001
        assert summary.metrics.nonzero_channels == [1, 2]
        assert summary.sine_gains == []

    def test_csv_columns(self, outcome, tmp_path):
        r, _ = simulate_workflow(small_scenario(), outcome.document)
        path = write_csv(r, tmp_path)
        assert path.name == CSV_NAME
        df = pd.read_csv(path)
        assert list(df.columns) == ["t", "y0", "v0", "u0", "y1", "v1", "z1", "u1", "y2", "v2", "z2", "u2"]
        assert len(df) == r.t.size
        assert np.allclose(df["z2"].to_numpy(), r.z[1], atol=1e-6)
        assert to_frame(r).shape == df.shape

    def test_csv_reproducible(self, outcome, tmp_path):
        """Re-running the same scenario gives a byte-identical CSV"""
        first = write_csv(simulate_workflow(small_scenario(), outcome.document)[0], tmp_path / "a").read_bytes()
        second = write_csv(simulate_workflow(small_scenario(), outcome.document)[0], tmp_path / "b").read_bytes()
        assert first == second

    def test_svg_deterministic(self, outcome, tmp_path):
        r, _ = simulate_workflow(small_scenario(), outcome.document)
        first = [p.read_bytes() for p in write_svg_panels(r, tmp_path / "a")]
        second = write_svg_panels(r, tmp_path / "b")
        assert [p.stem for p in second] == list(PANELS)
        assert first == [p.read_bytes() for p in second]

    @pytest.mark.slow
    def test_sine_response_matches_frequency_response(self):
        """Steady-state z gains within 2% of |T_zw(jω)|"""
        s = apply_overrides(load_scenario(SCENARIOS / "sine_response.json"), basis_degree=4, grid_points=80)
        _, summary = simulate_workflow(s, synth(s).document)
        assert {(p.source, p.vehicle) for p in summary.sine_gains} == {(2, 2), (2, 3)}
        for p in summary.sine_gains:
            assert p.relative_error < 0.02
