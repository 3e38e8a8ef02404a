"""
IRAC problem data model and seeded scenario generation.

One Instance is everything a solver needs: per-user switching gains L_k and
channel gains gamma_k = ||h_k||^2 plus the link parameters and global budgets.
A latent QualityProfile (losses against ground truth) can ride along so that a
solution can be scored; solvers never look at it.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.errors import ValidationFailure
from src.metrics import PSNR_CALIB_A, PSNR_CALIB_B, psnr_from_loss

logger = logging.getLogger(__name__)

INSTANCE_SCHEMA = "irac-instance/1"
MAX_RESAMPLE = 100


def dbm_to_watts(dbm: float) -> float:
    return 10 ** ((float(dbm) - 30.0) / 10.0)


def _convert_units(data: Any) -> Any:
    """Accept `<field>_dbm` and `<field>_mw` keys and convert them to watts."""
    if not isinstance(data, dict):
        return data
    converted = {}
    for key, value in data.items():
        if key.endswith("_dbm"):
            converted[key.removesuffix("_dbm")] = dbm_to_watts(value)
        elif key.endswith("_mw"):
            converted[key.removesuffix("_mw")] = float(value) * 1e-3
        else:
            converted[key] = value
    return converted


def validation_failure(exc: ValidationError, subject: str) -> ValidationFailure:
    """Flatten a pydantic error into one ValidationFailure naming every field."""
    violations = []
    for err in exc.errors():
        location = ".".join(str(part) for part in err["loc"]) or subject
        violations.append(f"{location}: {err['msg']}")
    return ValidationFailure(violations, subject=subject)


class QualityConfig(BaseModel):
    """How latent rendering quality is drawn per user."""

    model_config = ConfigDict(frozen=True)

    mean_loss_edge: float = 0.029
    mean_loss_local: float = 0.041
    loss_jitter: float = 0.15
    psnr_calib_A: float = PSNR_CALIB_A
    psnr_calib_B: float = PSNR_CALIB_B
    # Position of L_k inside its triangle bounds; None draws it uniformly.
    triangle_slack: float | None = None

    @model_validator(mode="after")
    def _check(self) -> QualityConfig:
        violations = []
        if not 0 < self.mean_loss_edge < self.mean_loss_local < 1:
            violations.append("require 0 < mean_loss_edge < mean_loss_local < 1")
        if self.loss_jitter < 0:
            violations.append("loss_jitter must be >= 0")
        if self.triangle_slack is not None and not 0 <= self.triangle_slack <= 1:
            violations.append("triangle_slack must lie in [0, 1]")
        if violations:
            raise ValueError("; ".join(violations))
        return self


class ScenarioConfig(BaseModel):
    """Random-scenario parameters, SI units throughout."""

    model_config = ConfigDict(frozen=True)

    num_users: int = 20
    num_antennas: int = 600
    max_collab: int = 10
    area_side: float = 100.0
    pathloss_exponent: float = 3.0
    noise_power: float = 1e-10
    bandwidth: float = 2e6
    data_volume: float = 1.5e6
    deadline: float = 0.060
    edge_render_time: float = 0.0065
    local_render_time: float = 0.0167
    power_budget: float = 0.040
    loss_weight: float = 0.2
    min_distance: float = 1.0
    quality_config: QualityConfig = Field(default_factory=QualityConfig)
    seed: int = 0

    @model_validator(mode="before")
    @classmethod
    def _units(cls, data: Any) -> Any:
        return _convert_units(data)

    @model_validator(mode="after")
    def _check(self) -> ScenarioConfig:
        violations = scenario_violations(self)
        if violations:
            raise ValueError("; ".join(violations))
        return self

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ScenarioConfig:
        try:
            return cls.model_validate(data)
        except ValidationError as exc:
            raise validation_failure(exc, "scenario") from exc


def scenario_violations(cfg: ScenarioConfig) -> list[str]:
    violations = []
    if cfg.num_users < 1:
        violations.append("num_users must be >= 1")
    if cfg.num_antennas < 1:
        violations.append("num_antennas must be >= 1")
    if cfg.max_collab < 0:
        violations.append("max_collab must be >= 0")
    if not cfg.deadline > cfg.edge_render_time > 0:
        violations.append("require deadline > edge_render_time > 0")
    for name in ("power_budget", "noise_power", "bandwidth", "data_volume", "area_side"):
        if not getattr(cfg, name) > 0:
            violations.append(f"{name} must be > 0")
    if not 0 <= cfg.loss_weight < 1:
        violations.append("loss_weight must lie in [0, 1)")
    if not cfg.min_distance > 0:
        violations.append("min_distance must be > 0")
    if cfg.local_render_time < 0:
        violations.append("local_render_time must be >= 0")
    return violations


class QualityProfile(BaseModel):
    """Latent per-user rendering quality (losses in (0, 1), PSNR in dB)."""

    model_config = ConfigDict(frozen=True)

    loss_local: list[float]
    loss_edge: list[float]
    switching_gain: list[float]
    psnr_local: list[float]
    psnr_edge: list[float]


class Instance(BaseModel):
    """One IRAC problem."""

    model_config = ConfigDict(frozen=True)

    schema_version: str = INSTANCE_SCHEMA
    switching_gain: list[float]
    channel_gain: list[float]
    bandwidth: list[float]
    volume: list[float]
    noise: list[float]
    power_budget: float
    max_collab: int
    deadline: float
    edge_render_time: float
    local_render_time: float = 0.0167
    quality: QualityProfile | None = None
    seed: int | None = None
    run_index: int | None = None

    @property
    def num_users(self) -> int:
        return len(self.switching_gain)

    @property
    def gains(self) -> np.ndarray:
        """Switching gains L_k as an array."""
        return np.asarray(self.switching_gain, dtype=float)

    @property
    def gamma(self) -> np.ndarray:
        return np.asarray(self.channel_gain, dtype=float)

    @property
    def bandwidth_array(self) -> np.ndarray:
        return np.asarray(self.bandwidth, dtype=float)

    @property
    def volume_array(self) -> np.ndarray:
        return np.asarray(self.volume, dtype=float)

    @property
    def noise_array(self) -> np.ndarray:
        return np.asarray(self.noise, dtype=float)

    def with_budget(self, power_budget: float) -> Instance:
        return self.model_copy(update={"power_budget": float(power_budget)})

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        """sha256 over the canonical JSON; equal digests mean identical instances."""
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.model_dump_json(indent=2))

    @classmethod
    def load(cls, path: str | Path) -> Instance:
        try:
            return cls.model_validate_json(Path(path).read_text())
        except ValidationError as exc:
            raise validation_failure(exc, f"instance file {path}") from exc


def _lognormal(rng: np.random.Generator, mean: float, jitter: float, size: int) -> np.ndarray:
    """Mean-preserving lognormal draws with relative standard deviation `jitter`."""
    if jitter == 0:
        return np.full(size, mean)
    sigma = np.sqrt(np.log1p(jitter**2))
    return mean * np.exp(sigma * rng.standard_normal(size) - sigma**2 / 2)


def sample_quality_profile(rng: np.random.Generator, qc: QualityConfig, K: int) -> QualityProfile:
    """Draw per-user losses consistent with the triangle inequality."""
    loss_edge = _lognormal(rng, qc.mean_loss_edge, qc.loss_jitter, K)
    for _ in range(MAX_RESAMPLE):
        bad = loss_edge >= 1
        if not bad.any():
            break
        loss_edge[bad] = _lognormal(rng, qc.mean_loss_edge, qc.loss_jitter, int(bad.sum()))
    loss_edge = np.where(loss_edge >= 1, qc.mean_loss_edge, loss_edge)

    loss_local = _lognormal(rng, qc.mean_loss_local, qc.loss_jitter, K)
    ratio = qc.mean_loss_local / qc.mean_loss_edge
    for _ in range(MAX_RESAMPLE):
        bad = (loss_local <= loss_edge) | (loss_local >= 1)
        if not bad.any():
            break
        loss_local[bad] = _lognormal(rng, qc.mean_loss_local, qc.loss_jitter, int(bad.sum()))
    else:
        bad = (loss_local <= loss_edge) | (loss_local >= 1)
        if bad.any():
            logger.warning("clamping %d local losses after %d resamples", bad.sum(), MAX_RESAMPLE)
            loss_local[bad] = np.minimum(loss_edge[bad] * ratio, (1 + loss_edge[bad]) / 2)

    lower = np.abs(loss_local - loss_edge)
    upper = loss_local + loss_edge
    if qc.triangle_slack is None:
        gain = rng.uniform(lower, upper)
    else:
        gain = lower + qc.triangle_slack * (upper - lower)

    return QualityProfile(
        loss_local=loss_local.tolist(),
        loss_edge=loss_edge.tolist(),
        switching_gain=gain.tolist(),
        psnr_local=np.atleast_1d(
            psnr_from_loss(loss_local, qc.psnr_calib_A, qc.psnr_calib_B)
        ).tolist(),
        psnr_edge=np.atleast_1d(psnr_from_loss(loss_edge, qc.psnr_calib_A, qc.psnr_calib_B)).tolist(),
    )


def scenario_rng(seed: int, run_index: int) -> np.random.Generator:
    """Independent stream per (seed, run); the same pair always yields the same draws."""
    return np.random.default_rng([int(seed) & (2**64 - 1), int(run_index)])


def sample_distances(rng: np.random.Generator, config: ScenarioConfig) -> np.ndarray:
    """Uniform positions in [0, side]^2 with the edge server at the origin."""
    positions = rng.uniform(0.0, config.area_side, size=(config.num_users, 2))
    return np.maximum(np.hypot(positions[:, 0], positions[:, 1]), config.min_distance)


def sample_channel_gains(
    rng: np.random.Generator, pathloss: np.ndarray, num_antennas: int
) -> np.ndarray:
    """||h||^2 for h ~ CN(0, rho I_N): rho/2 times a chi-square with 2N degrees of freedom."""
    entries = rng.standard_normal((pathloss.size, num_antennas, 2))
    return pathloss / 2 * np.sum(entries**2, axis=(1, 2))


def generate_instance(config: ScenarioConfig, run_index: int) -> Instance:
    """Random instance for run `run_index`; a pure function of (config, run_index)."""
    violations = scenario_violations(config)
    if violations:
        raise ValidationFailure(violations, subject="scenario")
    rng = scenario_rng(config.seed, run_index)
    K = config.num_users

    distance = sample_distances(rng, config)
    pathloss = distance ** (-config.pathloss_exponent)
    gamma = sample_channel_gains(rng, pathloss, config.num_antennas)
    quality = sample_quality_profile(rng, config.quality_config, K)

    return Instance(
        switching_gain=quality.switching_gain,
        channel_gain=gamma.tolist(),
        bandwidth=[config.bandwidth] * K,
        volume=[config.data_volume] * K,
        noise=[config.noise_power] * K,
        power_budget=config.power_budget,
        max_collab=config.max_collab,
        deadline=config.deadline,
        edge_render_time=config.edge_render_time,
        local_render_time=config.local_render_time,
        quality=quality,
        seed=config.seed,
        run_index=run_index,
    )


def instance_from_distances(
    switching_gain: list[float],
    distance: list[float],
    config: ScenarioConfig,
    **overrides: Any,
) -> Instance:
    """Deterministic instance with gamma_k = N d_k^-alpha (the mean channel gain)."""
    d = np.maximum(np.asarray(distance, dtype=float), config.min_distance)
    gamma = config.num_antennas * d ** (-config.pathloss_exponent)
    K = len(switching_gain)
    qc = config.quality_config
    edge = [qc.mean_loss_edge] * K
    local = [qc.mean_loss_local] * K
    fields: dict[str, Any] = {
        "switching_gain": list(switching_gain),
        "channel_gain": gamma.tolist(),
        "bandwidth": [config.bandwidth] * K,
        "volume": [config.data_volume] * K,
        "noise": [config.noise_power] * K,
        "power_budget": config.power_budget,
        "max_collab": config.max_collab,
        "deadline": config.deadline,
        "edge_render_time": config.edge_render_time,
        "local_render_time": config.local_render_time,
        "quality": QualityProfile(
            loss_local=local,
            loss_edge=edge,
            switching_gain=list(switching_gain),
            psnr_local=[psnr_from_loss(v, qc.psnr_calib_A, qc.psnr_calib_B) for v in local],
            psnr_edge=[psnr_from_loss(v, qc.psnr_calib_A, qc.psnr_calib_B) for v in edge],
        ),
    }
    fields.update(overrides)
    return Instance(**fields)


def validate_instance(inst: Instance) -> list[str]:
    """Every violated invariant of `inst`, empty when valid. Never mutates."""
    report: list[str] = []
    K = inst.num_users
    if K < 1:
        report.append("instance has no users")
    per_user = {
        "channel_gain": inst.channel_gain,
        "bandwidth": inst.bandwidth,
        "volume": inst.volume,
        "noise": inst.noise,
    }
    for name, values in per_user.items():
        if len(values) != K:
            report.append(f"{name} has {len(values)} entries, expected {K}")
            continue
        for k, value in enumerate(values):
            if not np.isfinite(value) or value <= 0:
                report.append(f"user {k}: {name} must be finite and > 0 (got {value})")
    for k, value in enumerate(inst.switching_gain):
        if not np.isfinite(value) or value < 0:
            report.append(f"user {k}: switching_gain must be finite and >= 0 (got {value})")
    if not inst.power_budget > 0:
        report.append(f"power_budget must be > 0 (got {inst.power_budget})")
    if inst.max_collab < 0:
        report.append(f"max_collab must be >= 0 (got {inst.max_collab})")
    if not inst.edge_render_time > 0:
        report.append(f"edge_render_time must be > 0 (got {inst.edge_render_time})")
    if not inst.deadline > inst.edge_render_time:
        report.append(
            f"deadline {inst.deadline} s must exceed edge_render_time {inst.edge_render_time} s"
        )
    if inst.quality is not None:
        report.extend(quality_violations(inst.quality, K))
    return report


def quality_violations(quality: QualityProfile, K: int, tol: float = 1e-12) -> list[str]:
    report = []
    columns = quality.model_dump()
    for name, values in columns.items():
        if len(values) != K:
            report.append(f"quality.{name} has {len(values)} entries, expected {K}")
    if report:
        return report
    for k in range(K):
        local, edge = quality.loss_local[k], quality.loss_edge[k]
        gain = quality.switching_gain[k]
        if not (0 < local < 1 and 0 < edge < 1):
            report.append(f"user {k}: losses must lie in (0, 1)")
        if not abs(local - edge) - tol <= gain <= local + edge + tol:
            report.append(f"user {k}: switching_gain violates the triangle bounds")
        if not (np.isfinite(quality.psnr_local[k]) and np.isfinite(quality.psnr_edge[k])):
            report.append(f"user {k}: psnr must be finite")
    return report


def require_valid(inst: Instance) -> Instance:
    violations = validate_instance(inst)
    if violations:
        raise ValidationFailure(violations, subject="instance")
    return inst
