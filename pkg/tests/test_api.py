"""
Tests for the FastAPI decision service.
"""

from unittest.mock import Mock, patch

import pytest

from src.errors import SolverError
from src.planner import CollaborationPlanner, set_planner
from tests.conftest import make_instance


@pytest.fixture(autouse=True)
def planner():
    """Fresh planner without a model for every test."""
    planner = CollaborationPlanner()
    set_planner(planner)
    yield planner
    set_planner(None)


def _body(inst):
    return inst.model_dump(mode="json")


class TestServiceEndpoints:
    """Monitoring endpoints."""

    def test_root_endpoint(self, test_client):
        """Root returns service info."""
        response = test_client.get("/")
        assert response.status_code == 200
        data = response.json()
        assert "IRAC Decision Service" in data["message"]
        assert "version" in data

    def test_health_endpoint(self, test_client):
        """Health reports the model and breaker state."""
        response = test_client.get("/health")
        assert response.status_code == 200
        data = response.json()
        assert data["status"] == "healthy"
        assert data["model_loaded"] is False
        assert data["fast_path_breaker"]["state"] == "closed"

    def test_ready_endpoint(self, test_client):
        response = test_client.get("/ready")
        assert response.status_code == 200
        assert response.json() == {"status": "ready"}

    def test_metrics_count_paths(self, test_client, small_instance):
        """Each decision is counted under the path that answered."""
        test_client.post("/decide", json=_body(small_instance))
        data = test_client.get("/metrics").json()
        assert data["paths"] == {"solver": 1}
        assert "environment" in data

    def test_openapi_docs_available(self, test_client):
        """OpenAPI schema and docs are served."""
        assert test_client.get("/openapi.json").status_code == 200
        assert test_client.get("/docs").status_code == 200


class TestDecide:
    """POST /decide."""

    def test_solver_path_without_model(self, test_client, small_instance):
        """Without a model PMM answers with a feasible decision."""
        response = test_client.post("/decide", json=_body(small_instance))
        assert response.status_code == 200
        data = response.json()
        assert data["meta"]["path"] == "solver"
        assert data["solver_name"] == "pmm"
        assert data["feasibility"]["feasible"]
        assert len(data["x"]) == small_instance.num_users

    def test_invalid_instance_is_422(self, test_client):
        """Instance invariants are enforced."""
        inst = make_instance([0.02, 0.03], [1e-3, 1e-3], power_budget=0.0)
        response = test_client.post("/decide", json=_body(inst))
        assert response.status_code == 422
        assert "power_budget" in response.json()["detail"]

    def test_malformed_body_is_422(self, test_client):
        """Missing fields fail request validation."""
        response = test_client.post("/decide", json={"switching_gain": [0.02]})
        assert response.status_code == 422

    @patch("src.main.get_planner")
    def test_solver_failure_is_500(self, mock_get_planner, test_client, small_instance):
        """A solver failure maps to 500 without leaking details."""
        mock_planner = Mock()
        mock_planner.decide.side_effect = SolverError("diverged", diagnostics={"beta": 1.0})
        mock_get_planner.return_value = mock_planner
        response = test_client.post("/decide", json=_body(small_instance))
        assert response.status_code == 500
        assert "beta" not in response.json()["detail"]


class TestSolve:
    """POST /solve/{solver}."""

    def test_greedy(self, test_client, small_instance):
        """Named baselines run directly."""
        response = test_client.post("/solve/greedy", json=_body(small_instance))
        assert response.status_code == 200
        assert response.json()["solver_name"] == "greedy"

    @pytest.mark.parametrize("name", ["ilo", "nope"])
    def test_unknown_solver_is_404(self, test_client, small_instance, name):
        """The learned path and unknown names are not routable here."""
        response = test_client.post(f"/solve/{name}", json=_body(small_instance))
        assert response.status_code == 404

    def test_brute_force_cap_is_422(self, test_client):
        """Oversized brute-force requests are rejected as invalid input."""
        inst = make_instance([0.02] * 23, [1e-3] * 23)
        response = test_client.post("/solve/brute_force", json=_body(inst))
        assert response.status_code == 422
