"""
Closed-form downlink physics for the edge-to-user image transfer.

Under MRC with N >> K the per-user rate depends on the channel only through
gamma_k = ||h_k||^2:

    R_k(p) = B_k * log2(1 + gamma_k * p / sigma_k^2)

Delivering a fraction x of a V_k-bit frame inside the window T - T0 needs at
least g_k(x) = (sigma_k^2 / gamma_k) * (2^(x V_k / ((T - T0) B_k)) - 1) watts.
Every solver in the package works on that curve instead of on p directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from pydantic import BaseModel, Field

from src.errors import DomainError

if TYPE_CHECKING:
    from src.instance import Instance

LN2 = math.log(2.0)
DEFAULT_TOL = 1e-9


def _as_float_arrays(**values) -> dict[str, np.ndarray]:
    arrays = {name: np.asarray(value, dtype=float) for name, value in values.items()}
    for name, arr in arrays.items():
        if not np.all(np.isfinite(arr)):
            raise DomainError(f"{name} must be finite")
    return arrays


def _scalar_or_array(value: np.ndarray) -> float | np.ndarray:
    return float(value) if np.ndim(value) == 0 else value


def achievable_rate(gamma, power, noise, bandwidth) -> float | np.ndarray:
    """Shannon rate in bits/s; broadcasts over numpy arrays."""
    a = _as_float_arrays(gamma=gamma, power=power, noise=noise, bandwidth=bandwidth)
    if np.any(a["gamma"] <= 0):
        raise DomainError("gamma must be > 0")
    if np.any(a["power"] < 0):
        raise DomainError("power must be >= 0")
    if np.any(a["noise"] <= 0):
        raise DomainError("noise must be > 0")
    if np.any(a["bandwidth"] <= 0):
        raise DomainError("bandwidth must be > 0")
    snr = a["gamma"] * a["power"] / a["noise"]
    return _scalar_or_array(a["bandwidth"] * np.log1p(snr) / LN2)


def min_power_for_fraction(
    gamma, noise, bandwidth, volume, fraction, deadline: float, edge_render_time: float
) -> float | np.ndarray:
    """g_k(x): smallest power whose rate covers x*V/(T - T0)."""
    window = float(deadline) - float(edge_render_time)
    if not window > 0:
        raise DomainError(f"deadline must exceed edge render time (T - T0 = {window})")
    a = _as_float_arrays(
        gamma=gamma, noise=noise, bandwidth=bandwidth, volume=volume, fraction=fraction
    )
    if np.any(a["fraction"] < 0) or np.any(a["fraction"] > 1):
        raise DomainError("fraction must lie in [0, 1]")
    if np.any(a["gamma"] <= 0):
        raise DomainError("gamma must be > 0")
    exponent = a["fraction"] * a["volume"] * LN2 / (window * a["bandwidth"])
    return _scalar_or_array(a["noise"] / a["gamma"] * np.expm1(exponent))


def end_to_end_latency(
    gamma, noise, bandwidth, volume, x, power, edge_render_time: float, local_render_time: float
) -> float | np.ndarray:
    """
    Per-user frame latency in seconds.

    x=0 renders locally (local_render_time); x=1 waits T0 plus the download
    time V/R. A collaborating user with zero power never receives its frame,
    which is reported as +inf rather than raised.
    """
    a = _as_float_arrays(gamma=gamma, noise=noise, bandwidth=bandwidth, volume=volume, x=x)
    if np.any((a["x"] != 0) & (a["x"] != 1)):
        raise DomainError("latency is defined for binary collaboration bits only")
    p = np.asarray(power, dtype=float)
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise DomainError("power must be finite and >= 0")
    rate = np.asarray(achievable_rate(a["gamma"], p, a["noise"], a["bandwidth"]), dtype=float)
    with np.errstate(divide="ignore"):
        download = np.where(rate > 0, a["volume"] / np.where(rate > 0, rate, 1.0), np.inf)
    latency = np.where(a["x"] == 1, float(edge_render_time) + download, float(local_render_time))
    return _scalar_or_array(latency)


@dataclass(frozen=True)
class PowerCurve:
    """
    Vectorised g_k(x) = scale_k * (exp(rate_k * x) - 1) for all users.

    scale_k = sigma_k^2 / gamma_k (watts); rate_k = V_k ln2 / ((T - T0) B_k).
    """

    scale: np.ndarray
    rate: np.ndarray

    @classmethod
    def from_instance(cls, inst: Instance) -> PowerCurve:
        window = inst.deadline - inst.edge_render_time
        if not window > 0:
            raise DomainError(f"deadline must exceed edge render time (T - T0 = {window})")
        gamma = inst.gamma
        if np.any(gamma <= 0):
            raise DomainError("gamma must be > 0")
        return cls(
            scale=inst.noise_array / gamma,
            rate=inst.volume_array * LN2 / (window * inst.bandwidth_array),
        )

    def value(self, x) -> np.ndarray:
        return self.scale * np.expm1(self.rate * np.asarray(x, dtype=float))

    def slope(self, x) -> np.ndarray:
        return self.scale * self.rate * np.exp(self.rate * np.asarray(x, dtype=float))

    @property
    def full(self) -> np.ndarray:
        """g_k(1): power needed to download the whole frame in time."""
        return self.value(np.ones_like(self.scale))


class FeasibilityReport(BaseModel):
    """Slack of every IRAC constraint at a candidate (x, p)."""

    rate_residuals: list[float] = Field(description="R_k - x_k V_k / (T - T0), bits/s")
    power_slack: float = Field(description="P - sum(p), watts")
    cardinality_slack: int = Field(description="S - sum(x)")
    bound_violations: list[str] = Field(default_factory=list)
    violations: list[str] = Field(default_factory=list)
    feasible: bool
    tolerance: float


def check_feasibility(inst: Instance, x, p, tol: float = DEFAULT_TOL) -> FeasibilityReport:
    """Evaluate the rate, power, cardinality and bound constraints with relative tolerance."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    K = inst.num_users
    if x.shape != (K,) or p.shape != (K,):
        raise DomainError(f"expected vectors of length {K}, got x{x.shape} and p{p.shape}")

    bound_violations: list[str] = []
    for k in range(K):
        if not np.isfinite(x[k]) or x[k] not in (0.0, 1.0):
            bound_violations.append(f"user {k}: x={x[k]!r} is not binary")
        if not np.isfinite(p[k]) or p[k] < 0:
            bound_violations.append(f"user {k}: p={p[k]!r} must be finite and >= 0")

    violations = list(bound_violations)
    window = inst.deadline - inst.edge_render_time
    safe_p = np.where(np.isfinite(p) & (p >= 0), p, 0.0)
    rate = np.asarray(
        achievable_rate(inst.gamma, safe_p, inst.noise_array, inst.bandwidth_array), dtype=float
    )
    required = np.clip(x, 0.0, 1.0) * inst.volume_array / window
    residuals = rate - required
    for k in np.flatnonzero(residuals < -tol * required):
        violations.append(
            f"user {k}: rate {rate[k]:.6g} b/s below required {required[k]:.6g} b/s"
        )

    power_slack = float(inst.power_budget - np.sum(safe_p))
    if power_slack < -tol * inst.power_budget:
        violations.append(f"total power exceeds budget by {-power_slack:.6g} W")

    cardinality_slack = int(inst.max_collab - int(np.sum(x == 1.0)))
    if cardinality_slack < 0:
        violations.append(f"{-cardinality_slack} more collaborating users than S={inst.max_collab}")

    return FeasibilityReport(
        rate_residuals=residuals.tolist(),
        power_slack=power_slack,
        cardinality_slack=cardinality_slack,
        bound_violations=bound_violations,
        violations=violations,
        feasible=not violations,
        tolerance=tol,
    )
