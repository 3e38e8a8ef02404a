"""
Pytest configuration and fixtures.
Shared instances and scenarios.
"""

import pytest
from fastapi.testclient import TestClient

from src.harness import far_user_instance, scenario_from_profile
from src.instance import Instance, ScenarioConfig, generate_instance


def make_instance(
    switching_gain,
    channel_gain,
    power_budget=0.04,
    max_collab=None,
    **overrides,
) -> Instance:
    """Hand-built instance with the default link parameters."""
    K = len(switching_gain)
    fields = {
        "switching_gain": list(switching_gain),
        "channel_gain": list(channel_gain),
        "bandwidth": [2e6] * K,
        "volume": [1.5e6] * K,
        "noise": [1e-10] * K,
        "power_budget": power_budget,
        "max_collab": K if max_collab is None else max_collab,
        "deadline": 0.060,
        "edge_render_time": 0.0065,
    }
    fields.update(overrides)
    return Instance(**fields)


@pytest.fixture
def small_scenario():
    """K=8 scenario, small enough for brute force in every test."""
    return ScenarioConfig(num_users=8, max_collab=4, seed=11)


@pytest.fixture
def small_instance(small_scenario):
    return generate_instance(small_scenario, 0)


@pytest.fixture
def reference_scenario():
    return scenario_from_profile("paper-truck")


@pytest.fixture
def reference_instance(reference_scenario):
    return generate_instance(reference_scenario, 0)


@pytest.fixture
def far_user():
    return far_user_instance()


@pytest.fixture
def test_client():
    """Create FastAPI test client."""
    from src.main import app

    return TestClient(app)
