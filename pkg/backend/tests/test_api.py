"""
Integration tests for API endpoints.
Tests basic functionality of all API routes.
"""
import pytest
from fastapi.testclient import TestClient

from backend.app.core.config import settings
from backend.app.main import app

client = TestClient(app)

SCENARIO = {
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
        "disturbances": {"2": [{"kind": "pulse", "amplitude": 0.5, "start_s": 2.0, "end_s": 3.0}]},
    },
}


@pytest.fixture(scope="module")
def controller():
    response = client.post("/v1/design/synth", json={"scenario": SCENARIO})
    assert response.status_code == 200
    return response.json()["controller"]


class TestHealthEndpoint:
    """Tests for /health endpoint."""

    def test_health_check(self):
        """Test that health check returns 200 and correct structure."""
        response = client.get("/health")
        assert response.status_code == 200

        data = response.json()
        assert data["status"] == "ok"
        assert "timestamp" in data
        assert data["version"] == "0.1.0"


class TestRootEndpoint:
    """Tests for root endpoint."""

    def test_root(self):
        """Test root endpoint returns API information."""
        response = client.get("/")
        assert response.status_code == 200

        data = response.json()
        assert data["version"] == "0.1.0"
        assert "/v1/design/synth" in data["endpoints"]


class TestSynthEndpoint:
    """Tests for /v1/design/synth."""

    def test_synth(self, controller):
        """Controller document lists both followers"""
        assert controller["n"] == 2
        assert [v["index"] for v in controller["vehicles"]] == [1, 2]

    def test_norm_override(self):
        response = client.post("/v1/design/synth", json={"scenario": SCENARIO, "norm": "h2"})
        assert response.status_code == 200
        report = response.json()["report"]
        assert report["norm"] == "h2"
        assert report["total_cost"] > 0

    def test_invalid_scenario(self):
        """Vehicle count mismatch is rejected by validation"""
        bad = {**SCENARIO, "platoon": {**SCENARIO["platoon"], "n": 3}}
        response = client.post("/v1/design/synth", json={"scenario": bad})
        assert response.status_code == 422

    def test_unknown_norm(self):
        response = client.post("/v1/design/synth", json={"scenario": SCENARIO, "norm": "h3"})
        assert response.status_code == 422


class TestVerifyEndpoint:
    """Tests for /v1/design/verify."""

    def test_verify_passes(self, controller):
        response = client.post("/v1/design/verify", json={"scenario": SCENARIO, "controller": controller})
        assert response.status_code == 200
        data = response.json()
        assert data["passed"] is True
        assert len(data["checks"]) == 5

    def test_platoon_mismatch(self, controller):
        other = {**SCENARIO, "platoon": {**SCENARIO["platoon"], "h_s": 0.0}}
        response = client.post("/v1/design/verify", json={"scenario": other, "controller": controller})
        assert response.status_code == 422


class TestSimulationEndpoint:
    """Tests for /v1/simulation/run."""

    def test_run(self, controller):
        response = client.post("/v1/simulation/run", json={"scenario": SCENARIO, "controller": controller})
        assert response.status_code == 200
        data = response.json()
        assert data["samples"] == 2001
        assert data["metrics"]["nonzero_channels"] == [1, 2]

    def test_non_integer_delay(self):
        delayed = {**SCENARIO, "delays": {"theta_s": 0.03, "phi_s": 0.1},
                   "simulation": {**SCENARIO["simulation"], "dt_s": 0.003}}
        ctrl = client.post("/v1/design/synth", json={"scenario": delayed}).json()["controller"]
        response = client.post("/v1/simulation/run", json={"scenario": delayed, "controller": ctrl})
        assert response.status_code == 422

    def test_divergence(self, controller, monkeypatch):
        monkeypatch.setattr(settings, "DIVERGENCE_LIMIT", 1e-3)
        response = client.post("/v1/simulation/run", json={"scenario": SCENARIO, "controller": controller})
        assert response.status_code == 400
        assert "diverged" in response.json()["detail"]
