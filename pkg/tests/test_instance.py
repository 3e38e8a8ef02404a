"""
Tests for the problem data model and scenario generation.
"""

import numpy as np
import pytest

from src.errors import ValidationFailure
from src.instance import (
    Instance,
    QualityConfig,
    ScenarioConfig,
    dbm_to_watts,
    generate_instance,
    quality_violations,
    require_valid,
    sample_channel_gains,
    sample_quality_profile,
    scenario_rng,
    validate_instance,
)
from tests.conftest import make_instance


class TestScenarioConfig:
    """Scenario parsing and validation."""

    def test_defaults_are_valid(self):
        """Default scenario matches the evaluation setup."""
        cfg = ScenarioConfig()
        assert (cfg.num_users, cfg.num_antennas, cfg.max_collab) == (20, 600, 10)
        assert cfg.noise_power == pytest.approx(1e-10)

    def test_dbm_and_mw_keys_convert_to_watts(self):
        """`_dbm` and `_mw` suffixes are converted at parse time."""
        cfg = ScenarioConfig.from_dict({"noise_power_dbm": -70, "power_budget_mw": 10})
        assert cfg.noise_power == pytest.approx(1e-10, rel=1e-12)
        assert cfg.power_budget == pytest.approx(0.010, rel=1e-12)

    def test_dbm_to_watts(self):
        """0 dBm is one milliwatt."""
        assert dbm_to_watts(0) == pytest.approx(1e-3)
        assert dbm_to_watts(30) == pytest.approx(1.0)

    def test_every_violation_is_reported(self):
        """Invalid scenario lists each violated invariant."""
        with pytest.raises(ValidationFailure) as exc_info:
            ScenarioConfig.from_dict({"num_users": 0, "deadline": 0.001})
        message = str(exc_info.value)
        assert "num_users must be >= 1" in message
        assert "deadline > edge_render_time" in message

    def test_quality_config_ordering_enforced(self):
        """Edge loss must be below local loss."""
        with pytest.raises(ValidationFailure):
            ScenarioConfig.from_dict({"quality_config": {"mean_loss_edge": 0.05}})


class TestQualityProfile:
    """Latent quality sampling."""

    def test_zero_jitter_hits_anchors(self):
        """Without jitter every user gets the anchor losses and PSNRs."""
        rng = np.random.default_rng(0)
        profile = sample_quality_profile(rng, QualityConfig(loss_jitter=0.0), 50)
        assert profile.loss_edge == [0.029] * 50
        assert profile.loss_local == [0.041] * 50
        assert np.allclose(profile.psnr_edge, 27.49, atol=0.01)
        assert np.allclose(profile.psnr_local, 24.99, atol=0.01)

    def test_zero_jitter_gain_within_fixed_bounds(self):
        """Switching gain lies in [0.012, 0.070] at the anchors."""
        rng = np.random.default_rng(1)
        profile = sample_quality_profile(rng, QualityConfig(loss_jitter=0.0), 500)
        gains = np.asarray(profile.switching_gain)
        assert gains.min() >= 0.012 - 1e-12
        assert gains.max() <= 0.070 + 1e-12

    def test_triangle_consistency(self):
        """Every drawn profile satisfies the triangle bounds."""
        rng = np.random.default_rng(2)
        profile = sample_quality_profile(rng, QualityConfig(loss_jitter=0.4), 2000)
        assert quality_violations(profile, 2000) == []
        local = np.asarray(profile.loss_local)
        edge = np.asarray(profile.loss_edge)
        assert np.all(local > edge)

    def test_sample_mean_within_two_percent(self):
        """Lognormal draws preserve the configured mean."""
        rng = np.random.default_rng(3)
        qc = QualityConfig(loss_jitter=0.1)
        profile = sample_quality_profile(rng, qc, 10_000)
        mean = np.mean(profile.loss_edge)
        assert abs(mean - qc.mean_loss_edge) <= 0.02 * qc.mean_loss_edge

    def test_zero_slack_gain_is_loss_difference(self):
        """triangle_slack=0 pins L_k to loss_local - loss_edge."""
        rng = np.random.default_rng(4)
        profile = sample_quality_profile(rng, QualityConfig(triangle_slack=0.0), 30)
        expected = np.asarray(profile.loss_local) - np.asarray(profile.loss_edge)
        assert np.allclose(profile.switching_gain, expected, atol=1e-15)


class TestGenerateInstance:
    """Seeded instance generation."""

    def test_deterministic_for_seed_and_run(self, small_scenario):
        """Same (config, run_index) gives an identical instance."""
        a = generate_instance(small_scenario, 5)
        b = generate_instance(small_scenario, 5)
        assert a == b
        assert a.digest() == b.digest()

    def test_runs_are_independent(self, small_scenario):
        """Different run indices draw different channels."""
        a = generate_instance(small_scenario, 0)
        b = generate_instance(small_scenario, 1)
        assert a.channel_gain != b.channel_gain

    def test_generated_instance_is_valid(self, reference_instance):
        """Reference-profile instance passes validation."""
        assert validate_instance(reference_instance) == []
        assert reference_instance.num_users == 20
        assert reference_instance.max_collab == 10

    def test_unit_pathloss_mean_gain(self):
        """With unit pathloss E[gamma] = N."""
        rng = scenario_rng(9, 0)
        gamma = sample_channel_gains(rng, np.ones(2000), 600)
        assert abs(gamma.mean() - 600) < 5

    def test_distance_clamp_keeps_gains_finite(self):
        """Users inside the clamp radius still get finite gains."""
        cfg = ScenarioConfig(num_users=10, max_collab=5, area_side=0.5)
        inst = generate_instance(cfg, 0)
        assert np.all(np.isfinite(inst.gamma))
        assert np.all(inst.gamma > 0)

    def test_gain_envelope(self, reference_scenario):
        """Channel gains fall inside the pathloss envelope of the cell."""
        inst = generate_instance(reference_scenario, 3)
        N = reference_scenario.num_antennas
        d_max = np.sqrt(2) * reference_scenario.area_side
        assert np.all(inst.gamma < 1e3 * N * 1.0**-3)
        assert np.all(inst.gamma > 1e-5 * N * d_max**-3)


class TestInstance:
    """Instance helpers and validation."""

    def test_with_budget_changes_only_power(self, small_instance):
        """with_budget keeps every other field."""
        other = small_instance.with_budget(0.123)
        assert other.power_budget == 0.123
        assert other.channel_gain == small_instance.channel_gain
        assert other.digest() != small_instance.digest()

    def test_save_load_round_trip(self, small_instance, tmp_path):
        """JSON persistence keeps the instance intact."""
        path = tmp_path / "inst.json"
        small_instance.save(path)
        loaded = Instance.load(path)
        assert loaded.digest() == small_instance.digest()
        assert loaded.schema_version == "irac-instance/1"

    def test_load_names_bad_field(self, tmp_path):
        """Parse failures become ValidationFailure naming the field."""
        path = tmp_path / "bad.json"
        path.write_text('{"switching_gain": "oops"}')
        with pytest.raises(ValidationFailure) as exc_info:
            Instance.load(path)
        assert "switching_gain" in str(exc_info.value)

    def test_zero_channel_gain_reported(self):
        """A zero gain names the user and the field."""
        inst = make_instance([0.02, 0.03], [1e-3, 0.0])
        report = validate_instance(inst)
        assert any("user 1" in line and "channel_gain" in line for line in report)

    def test_deadline_below_render_time_reported(self):
        """T <= T0 is reported."""
        inst = make_instance([0.02], [1e-3], deadline=0.005)
        report = validate_instance(inst)
        assert any("deadline" in line for line in report)

    def test_validation_does_not_mutate(self):
        """Validation leaves the instance untouched."""
        inst = make_instance([0.02, -1.0], [1e-3, 1e-3])
        before = inst.model_dump()
        assert validate_instance(inst)
        assert inst.model_dump() == before

    def test_require_valid_raises(self):
        """require_valid raises with the full report."""
        with pytest.raises(ValidationFailure):
            require_valid(make_instance([0.02], [1e-3], power_budget=0.0))
