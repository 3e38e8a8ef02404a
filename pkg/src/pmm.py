"""
Penalty majorization-minimization (PMM) for the IRAC problem.

The binary collaboration bits are relaxed to [0, 1] and the exact penalty

    phi(x) = (1/beta) * sum_k x_k (1 - x_k)

is added to the switching objective. phi is concave, so each MM step replaces
it by its tangent plane at the previous iterate; after eliminating p through
the minimum-power curve g_k the step is the convex program

    minimize  sum_k a_k x_k,   a_k = -L_k + (1 - 2 x_prev_k) / beta
    s.t.      sum_k g_k(x_k) <= P,  sum_k x_k <= S,  0 <= x <= 1

solved here through its two-multiplier Lagrangian dual. For multipliers
(mu >= 0 on power, nu >= 0 on cardinality) each user's minimizer of
a x + mu g(x) + nu x has a closed form, because g' = scale*rate*exp(rate*x)
inverts analytically.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.errors import DomainError, SolverError
from src.instance import Instance
from src.link import DEFAULT_TOL, FeasibilityReport, PowerCurve, check_feasibility
from src.observability import trace_span

logger = logging.getLogger(__name__)

SOLUTION_SCHEMA = "irac-solution/1"
MAX_BISECTION_STEPS = 500
DESCENT_SLACK = 1e-9


class PmmParams(BaseModel):
    """Penalty schedule and stopping rules. beta=None starts at 1 / max_k L_k."""

    model_config = ConfigDict(frozen=True)

    beta: float | None = None
    beta_shrink: float = 0.5
    max_outer_iters: int = 200
    x_tol: float = 1e-6
    dual_tol: float = 1e-10
    binary_tol: float = 1e-3
    max_beta_shrinks: int = 20
    initial_x: list[float] | Literal["uniform"] = "uniform"

    @model_validator(mode="after")
    def _check(self) -> PmmParams:
        violations = []
        if self.beta is not None and not self.beta > 0:
            violations.append("beta must be > 0")
        if not 0 < self.beta_shrink < 1:
            violations.append("beta_shrink must lie in (0, 1)")
        for name in ("x_tol", "dual_tol", "binary_tol"):
            if not getattr(self, name) > 0:
                violations.append(f"{name} must be > 0")
        if self.max_outer_iters < 1:
            violations.append("max_outer_iters must be >= 1")
        if self.max_beta_shrinks < 0:
            violations.append("max_beta_shrinks must be >= 0")
        if isinstance(self.initial_x, list) and any(not 0 <= v <= 1 for v in self.initial_x):
            violations.append("initial_x entries must lie in [0, 1]")
        if violations:
            raise ValueError("; ".join(violations))
        return self


class Solution(BaseModel):
    """A collaboration decision with its powers, objective and constraint report."""

    schema_version: str = SOLUTION_SCHEMA
    x: list[float]
    p: list[float]
    objective_P1: float
    surrogate_trace: list[float] = Field(default_factory=list)
    feasibility: FeasibilityReport
    solver_name: str
    wall_time: float = 0.0
    iterations: int = 0
    status: str = "ok"
    meta: dict[str, Any] = Field(default_factory=dict)

    @property
    def selected(self) -> list[int]:
        return [k for k, v in enumerate(self.x) if v == 1.0]


def objective_p1(inst: Instance, x) -> float:
    """GS switching objective sum_k (1 - x_k) L_k."""
    return float(np.sum((1.0 - np.asarray(x, dtype=float)) * inst.gains))


def make_solution(
    inst: Instance,
    x,
    p,
    solver_name: str,
    *,
    wall_time: float = 0.0,
    iterations: int = 0,
    surrogate_trace: list[float] | None = None,
    status: str = "ok",
    meta: dict[str, Any] | None = None,
    tol: float = DEFAULT_TOL,
) -> Solution:
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    return Solution(
        x=x.tolist(),
        p=p.tolist(),
        objective_P1=objective_p1(inst, x),
        surrogate_trace=list(surrogate_trace or []),
        feasibility=check_feasibility(inst, x, p, tol=tol),
        solver_name=solver_name,
        wall_time=wall_time,
        iterations=iterations,
        status=status,
        meta=dict(meta or {}),
    )


def _box(x, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
        raise DomainError(f"{name} must lie in [0, 1]")
    return arr


def _check_beta(beta: float) -> None:
    if not beta > 0:
        raise DomainError(f"beta must be > 0, got {beta}")


def penalty(x, beta: float) -> float:
    x = _box(x)
    _check_beta(beta)
    return float(np.sum(x * (1.0 - x)) / beta)


def surrogate_penalty(x, x_prev, beta: float) -> tuple[float, np.ndarray]:
    """Tangent-plane majorizer of the penalty at x_prev, with its (constant) gradient."""
    x = _box(x)
    x_prev = _box(x_prev, "x_prev")
    _check_beta(beta)
    value = float(np.sum(x - 2.0 * x_prev * x + x_prev**2) / beta)
    return value, (1.0 - 2.0 * x_prev) / beta


def p2_objective(inst: Instance, x, beta: float) -> float:
    """Penalized relaxation objective: switching loss plus exact penalty."""
    return objective_p1(inst, x) + penalty(x, beta)


@dataclass(frozen=True)
class KktResiduals:
    """Relative first-order optimality gaps of a subproblem solution."""

    stationarity: float
    power_feasibility: float
    cardinality_feasibility: float
    power_complementarity: float
    cardinality_complementarity: float

    @property
    def max_residual(self) -> float:
        return max(
            self.stationarity,
            self.power_feasibility,
            self.cardinality_feasibility,
            self.power_complementarity,
            self.cardinality_complementarity,
        )

    def as_dict(self) -> dict[str, float]:
        return {
            "stationarity": self.stationarity,
            "power_feasibility": self.power_feasibility,
            "cardinality_feasibility": self.cardinality_feasibility,
            "power_complementarity": self.power_complementarity,
            "cardinality_complementarity": self.cardinality_complementarity,
        }


@dataclass(frozen=True)
class SubproblemResult:
    x: np.ndarray
    power_multiplier: float
    cardinality_multiplier: float
    objective: float
    kkt: KktResiduals


def _minimizer(z: np.ndarray, mu: float, curve: PowerCurve) -> np.ndarray:
    """argmin over [0,1] of -z x + mu g(x), per user."""
    if mu == 0.0:
        return (z > 0).astype(float)
    x = np.zeros_like(z)
    pos = z > 0
    ratio = z[pos] / (mu * curve.scale[pos] * curve.rate[pos])
    x[pos] = np.clip(np.log(ratio) / curve.rate[pos], 0.0, 1.0)
    return x


def _partition(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return (x > 0) & (x < 1), x >= 1


def _exact_multiplier(z: np.ndarray, x: np.ndarray, curve: PowerCurve, budget: float):
    """
    Power multiplier that makes sum g = P exactly, assuming the partition of x
    into zero, interior and saturated users stays fixed. On the interior
    g_k = z_k / (mu * rate_k) - scale_k, so the budget equation is linear in 1/mu.
    """
    interior, ones = _partition(x)
    if not interior.any():
        return None
    numerator = float(np.sum(z[interior] / curve.rate[interior]))
    denominator = budget + float(np.sum(curve.scale[interior])) - float(np.sum(curve.full[ones]))
    if not denominator > 0:
        return None
    return numerator / denominator


def _fit_power(
    z: np.ndarray, curve: PowerCurve, budget: float, dual_tol: float
) -> tuple[float, np.ndarray]:
    """Smallest mu >= 0 whose minimizer meets the power budget."""
    pos = z > 0
    x_free = _minimizer(z, 0.0, curve)
    if not pos.any() or float(np.sum(curve.value(x_free))) <= budget:
        return 0.0, x_free

    slope_at_zero = curve.scale * curve.rate
    slope_at_one = slope_at_zero * np.exp(curve.rate)
    lo = float(np.min(z[pos] / slope_at_one[pos]))
    hi = float(np.max(z[pos] / slope_at_zero[pos]))
    x_hi = np.zeros_like(z)
    for _ in range(MAX_BISECTION_STEPS):
        mid = math.sqrt(lo * hi)
        x_mid = _minimizer(z, mid, curve)
        if float(np.sum(curve.value(x_mid))) <= budget:
            hi, x_hi = mid, x_mid
        else:
            lo = mid

        exact = _exact_multiplier(z, x_mid, curve, budget)
        if exact is not None:
            x_exact = _minimizer(z, exact, curve)
            same = [np.array_equal(a, b) for a, b in zip(_partition(x_exact), _partition(x_mid))]
            if all(same):
                return exact, x_exact
        if hi - lo <= dual_tol * hi:
            return hi, x_hi
    raise SolverError(
        "power multiplier bisection did not converge",
        diagnostics={"mu_lo": lo, "mu_hi": hi, "budget": budget},
    )


def _kkt(
    coeffs: np.ndarray,
    x: np.ndarray,
    mu: float,
    nu: float,
    curve: PowerCurve,
    budget: float,
    max_collab: int,
) -> KktResiduals:
    power = float(np.sum(curve.value(x)))
    count = float(np.sum(x))
    card_scale = max(max_collab, 1)

    slope = mu * curve.slope(x)
    grad = coeffs + nu + slope
    scale = np.abs(coeffs) + nu + slope + np.finfo(float).tiny
    interior, _ = _partition(x)
    violation = np.where(interior, np.abs(grad), np.where(x <= 0, np.maximum(-grad, 0.0), 0.0))
    violation = np.where(x >= 1, np.maximum(grad, 0.0), violation)

    return KktResiduals(
        stationarity=float(np.max(violation / scale)) if x.size else 0.0,
        power_feasibility=max(power - budget, 0.0) / budget,
        cardinality_feasibility=max(count - max_collab, 0.0) / card_scale,
        power_complementarity=max(budget - power, 0.0) / budget if mu > 0 else 0.0,
        cardinality_complementarity=max(max_collab - count, 0.0) / card_scale if nu > 0 else 0.0,
    )


def solve_linear_program(
    coeffs, curve: PowerCurve, budget: float, max_collab: int, dual_tol: float = 1e-10
) -> SubproblemResult:
    """
    Globally minimize sum a_k x_k over {sum g(x) <= P, sum x <= S, 0 <= x <= 1}.

    nu is bisected for the smallest value meeting the cardinality budget, with
    mu refit at every step. Where the count jumps across S, the answer is the
    convex combination of both sides that sits exactly on S; convexity of g
    keeps it within the power budget.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if not np.all(np.isfinite(coeffs)):
        raise DomainError("subproblem coefficients must be finite")

    def result(x, mu, nu):
        x = np.clip(x, 0.0, 1.0)
        kkt = _kkt(coeffs, x, mu, nu, curve, budget, max_collab)
        return SubproblemResult(x, mu, nu, float(coeffs @ x), kkt)

    if max_collab <= 0 or not np.any(coeffs < 0):
        return result(np.zeros_like(coeffs), 0.0, 0.0)

    mu, x = _fit_power(-coeffs, curve, budget, dual_tol)
    if float(np.sum(x)) <= max_collab:
        return result(x, mu, 0.0)

    lo, x_lo = 0.0, x
    hi, x_hi, mu_hi = float(np.max(-coeffs)), np.zeros_like(coeffs), 0.0
    for _ in range(MAX_BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        if not lo < mid < hi or hi - lo <= dual_tol * hi:
            break
        mu_mid, x_mid = _fit_power(-(coeffs + mid), curve, budget, dual_tol)
        if float(np.sum(x_mid)) <= max_collab:
            hi, x_hi, mu_hi = mid, x_mid, mu_mid
        else:
            lo, x_lo = mid, x_mid
    else:
        raise SolverError(
            "cardinality multiplier bisection did not converge",
            diagnostics={"nu_lo": lo, "nu_hi": hi, "max_collab": max_collab},
        )

    count_hi, count_lo = float(np.sum(x_hi)), float(np.sum(x_lo))
    if count_hi < max_collab:
        theta = (max_collab - count_hi) / (count_lo - count_hi)
        x_hi = theta * x_lo + (1.0 - theta) * x_hi
    return result(x_hi, mu_hi, hi)


def solve_subproblem(inst: Instance, x_prev, beta: float, dual_tol: float = 1e-10) -> SubproblemResult:
    """One MM step. beta=inf drops the penalty and solves the plain relaxation."""
    x_prev = _box(x_prev, "x_prev")
    _check_beta(beta)
    coeffs = -inst.gains + (1.0 - 2.0 * x_prev) / beta
    curve = PowerCurve.from_instance(inst)
    return solve_linear_program(coeffs, curve, inst.power_budget, inst.max_collab, dual_tol)


def recover_power(inst: Instance, x, curve: PowerCurve | None = None) -> np.ndarray:
    """Minimal powers p_k = g_k(x_k); zero wherever x_k = 0."""
    curve = curve or PowerCurve.from_instance(inst)
    return curve.value(_box(x))


def _gain_per_watt(inst: Instance, full: np.ndarray) -> np.ndarray:
    return inst.gains / full


def _by_ratio(ratio: np.ndarray) -> np.ndarray:
    """Indices by descending ratio; equal ratios keep index order."""
    return np.argsort(-ratio, kind="stable")


def round_and_repair(inst: Instance, x_cont, curve: PowerCurve | None = None) -> np.ndarray:
    """
    Threshold at 0.5, then drop the active user with the least switching gain
    per watt of full-frame power until both budgets hold.
    """
    x = (_box(x_cont) >= 0.5).astype(float)
    full = (curve or PowerCurve.from_instance(inst)).full
    ratio = _gain_per_watt(inst, full)
    while np.sum(x) > inst.max_collab or float(np.sum(full * x)) > inst.power_budget:
        active = np.flatnonzero(x == 1.0)
        drop = active[np.argmin(ratio[active])]
        x[drop] = 0.0
    return x


def fill_slack(inst: Instance, x, curve: PowerCurve | None = None) -> np.ndarray:
    """Admit idle users with L_k > 0 by descending L_k / g_k(1) while both budgets hold."""
    x = np.array(_box(x), dtype=float)
    full = (curve or PowerCurve.from_instance(inst)).full
    gains = inst.gains
    used, count = float(full @ x), int(np.sum(x))
    for k in _by_ratio(_gain_per_watt(inst, full)):
        if count >= inst.max_collab:
            break
        if x[k] == 0.0 and gains[k] > 0 and used + full[k] <= inst.power_budget:
            x[k] = 1.0
            used += full[k]
            count += 1
    return x


def polish(inst: Instance, x, curve: PowerCurve | None = None) -> tuple[np.ndarray, int]:
    """
    Steepest exchange descent on the P1 objective from a feasible binary x.

    A move either admits one idle user or swaps one active user for an idle
    one; the move with the largest gain is taken until none improves. Every
    move strictly raises the served gain, so the loop ends.
    """
    x = np.array(_box(x), dtype=float)
    full = (curve or PowerCurve.from_instance(inst)).full
    gains = inst.gains
    budget = inst.power_budget
    moves = 0
    while True:
        active = np.flatnonzero(x == 1.0)
        idle = np.flatnonzero(x == 0.0)
        if idle.size == 0:
            break
        used = float(full @ x)
        best_gain, best_move = 0.0, None
        if active.size < inst.max_collab:
            admit = np.where(used + full[idle] <= budget, gains[idle], -np.inf)
            j = int(np.argmax(admit))
            if admit[j] > best_gain:
                best_gain, best_move = float(admit[j]), (int(idle[j]),)
        if active.size:
            fits = used - full[active][:, None] + full[idle][None, :] <= budget
            swap = np.where(fits, gains[idle][None, :] - gains[active][:, None], -np.inf)
            i, j = np.unravel_index(int(np.argmax(swap)), swap.shape)
            if swap[i, j] > best_gain:
                best_gain, best_move = float(swap[i, j]), (int(active[i]), int(idle[j]))
        if best_move is None:
            break
        for k in best_move:
            x[k] = 1.0 - x[k]
        moves += 1
    return x, moves


def _ranked_admission(inst: Instance, z: np.ndarray, full: np.ndarray) -> np.ndarray:
    """Admit users by descending z (ties by gain per watt) while both budgets hold."""
    ratio = _gain_per_watt(inst, full)
    order = np.lexsort((-ratio, -z))
    x = np.zeros(inst.num_users)
    used, count = 0.0, 0
    for k in order:
        if count >= inst.max_collab or z[k] <= 0:
            break
        if used + full[k] <= inst.power_budget:
            x[k] = 1.0
            used += full[k]
            count += 1
    return x


def _finish(inst: Instance, anchors: list[np.ndarray], curve: PowerCurve) -> tuple[np.ndarray, dict]:
    """
    Binary decision from the continuous MM path: every anchor is rounded by
    threshold-and-repair and by ranked admission, each start is topped up
    with fill_slack and polished, and the best P1 objective wins (first on ties).
    """
    full = curve.full
    starts = [np.zeros(inst.num_users)]
    for z in anchors:
        starts.append(round_and_repair(inst, z, curve))
        starts.append(_ranked_admission(inst, z, full))

    seen: set[bytes] = set()
    best_x, best_value, total_moves = None, math.inf, 0
    for start in starts:
        key = start.tobytes()
        if key in seen:
            continue
        seen.add(key)
        x, moves = polish(inst, fill_slack(inst, start, curve), curve)
        total_moves += moves
        value = objective_p1(inst, x)
        if value < best_value:
            best_x, best_value = x, value
    final_rounding = round_and_repair(inst, anchors[-1], curve)
    return best_x, {
        "starts": len(seen),
        "polish_moves": total_moves,
        "rounded_objective": objective_p1(inst, final_rounding),
    }


def _initial_point(inst: Instance, params: PmmParams, curve: PowerCurve) -> np.ndarray:
    K = inst.num_users
    if params.initial_x != "uniform":
        x0 = np.asarray(params.initial_x, dtype=float)
        if x0.shape != (K,):
            raise DomainError(f"initial_x has {x0.size} entries, expected {K}")
    else:
        x0 = np.full(K, 0.5)
    if float(np.sum(curve.value(x0))) > inst.power_budget or np.sum(x0) > inst.max_collab:
        logger.debug("initial point infeasible for the relaxation; starting from x=0")
        return np.zeros(K)
    return x0


def _distance_to_binary(x: np.ndarray) -> float:
    return float(np.max(np.minimum(x, 1.0 - x))) if x.size else 0.0


def pmm_solve(inst: Instance, params: PmmParams | None = None) -> Solution:
    """
    MM outer loop with an exact-penalty schedule.

    Each beta stage iterates until the step is below x_tol; a stage that ends
    off-binary shrinks beta, unless the previous shrink left the iterate where
    it was. The P2 objective at successive iterates of one stage must be
    non-increasing; a violation is a solver bug and raises.

    surrogate_trace holds the final stage; meta["stage_traces"] keeps every
    stage, each monotone under its own beta.
    """
    params = params or PmmParams()
    K = inst.num_users
    with trace_span("pmm_solve", K=K) as span:
        gains = inst.gains
        if K == 0 or float(np.max(gains)) <= 0:
            x = np.zeros(K)
            return make_solution(
                inst, x, recover_power(inst, x), "pmm", status="converged", meta={"beta": None}
            )

        curve = PowerCurve.from_instance(inst)
        beta = params.beta if params.beta is not None else 1.0 / float(np.max(gains))
        x = _initial_point(inst, params, curve)
        current = p2_objective(inst, x, beta)
        stage_traces = [[current]]
        betas = [beta]
        anchors: list[np.ndarray] = []
        shrinks = 0
        stage_steps = 0
        status = "max-iters"
        iterations = 0
        last_kkt: dict[str, float] = {}

        for iterations in range(1, params.max_outer_iters + 1):
            step = solve_subproblem(inst, x, beta, params.dual_tol)
            x_new = step.x
            candidate = p2_objective(inst, x_new, beta)
            if candidate > current + DESCENT_SLACK * max(1.0, abs(current)):
                raise SolverError(
                    "MM step increased the penalized objective",
                    diagnostics={
                        "iteration": iterations,
                        "previous": current,
                        "candidate": candidate,
                        "beta": beta,
                    },
                )
            delta = float(np.max(np.abs(x_new - x)))
            x, current = x_new, candidate
            stage_traces[-1].append(current)
            stage_steps += 1
            last_kkt = step.kkt.as_dict()
            if iterations == 1:
                # from x = 0.5 the first step is the unpenalized relaxation
                anchors.append(x)

            if delta > params.x_tol:
                continue
            anchors.append(x)
            if _distance_to_binary(x) <= params.binary_tol:
                status = "converged"
                break
            if shrinks >= params.max_beta_shrinks or (shrinks > 0 and stage_steps == 1):
                status = "converged-fractional"
                break
            beta *= params.beta_shrink
            shrinks += 1
            stage_steps = 0
            current = p2_objective(inst, x, beta)
            stage_traces.append([current])
            betas.append(beta)

        if status == "max-iters":
            logger.warning("pmm hit max_outer_iters=%d on K=%d", params.max_outer_iters, K)
            anchors.append(x)
        x_bin, finish = _finish(inst, anchors, curve)
        p = recover_power(inst, x_bin, curve)
        span.annotate(iterations=iterations, status=status)

    return make_solution(
        inst,
        x_bin,
        p,
        "pmm",
        wall_time=span.duration_s,
        iterations=iterations,
        surrogate_trace=stage_traces[-1],
        status=status,
        meta={
            "beta_schedule": betas,
            "stage_traces": stage_traces,
            "distance_to_binary": _distance_to_binary(x),
            "kkt": last_kkt,
            "finish": finish,
        },
    )
