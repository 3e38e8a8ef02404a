"""
Named scenario profiles and hand-built case-study instances.
Values are plain dicts in SI units (watts, hertz, seconds, bits, meters).
"""

from copy import deepcopy

SCENARIO_PROFILES = {
    # Reference evaluation setup: N=600, (K, S)=(20, 10), 100x100 m^2,
    # alpha=3, sigma^2=-70 dBm, T=60 ms, T0=6.5 ms, B=2 MHz.
    "paper-truck": {
        "num_users": 20,
        "num_antennas": 600,
        "max_collab": 10,
        "area_side": 100.0,
        "pathloss_exponent": 3.0,
        "noise_power": 1e-10,
        "bandwidth": 2e6,
        "data_volume": 1.5e6,
        "deadline": 0.060,
        "edge_render_time": 0.0065,
        "local_render_time": 0.0167,
        "power_budget": 0.040,
        "loss_weight": 0.2,
        "min_distance": 1.0,
        "seed": 2025,
        "quality_config": {
            "mean_loss_edge": 0.029,
            "mean_loss_local": 0.041,
            "loss_jitter": 0.15,
        },
    },
    # Oracle-scale profile: small enough for exhaustive enumeration.
    "desk-small": {
        "num_users": 10,
        "num_antennas": 600,
        "max_collab": 5,
        "area_side": 100.0,
        "pathloss_exponent": 3.0,
        "noise_power": 1e-10,
        "bandwidth": 2e6,
        "data_volume": 1.5e6,
        "deadline": 0.060,
        "edge_render_time": 0.0065,
        "local_render_time": 0.0167,
        "power_budget": 0.040,
        "loss_weight": 0.2,
        "min_distance": 1.0,
        "seed": 7,
        "quality_config": {
            "mean_loss_edge": 0.029,
            "mean_loss_local": 0.041,
            "loss_jitter": 0.15,
        },
    },
}

REFERENCE_POWER_SWEEP_W = [0.010, 0.020, 0.030, 0.040]

# One "pain point" user (largest switching gain) sits at the far corner of the
# cell; everyone else is close. Largest-gain-first admission spends almost the
# whole budget on the far user, while serving all near users is cheaper and better.
FAR_USER_CASE = {
    "switching_gain": [0.070, 0.030, 0.028, 0.026, 0.024, 0.022],
    "distance": [140.0, 30.0, 32.0, 35.0, 38.0, 40.0],
    "num_antennas": 600,
    "pathloss_exponent": 3.0,
    "power_budget": 0.0077,
    "max_collab": 6,
}


# Older names still resolve.
PROFILE_ALIASES = {"reference-k20": "paper-truck"}


def get_profile(name: str) -> dict | None:
    """Return a deep copy of a named scenario profile (None if unknown). Aliases resolve."""
    profile = SCENARIO_PROFILES.get(PROFILE_ALIASES.get(name, name))
    return deepcopy(profile) if profile is not None else None


def list_profiles() -> list[str]:
    return sorted(SCENARIO_PROFILES)
