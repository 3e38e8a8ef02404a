"""
Comparison schemes and the exhaustive oracle.

Every scheme returns the same Solution type as PMM so that runs can be
compared head to head. Admission-style heuristics always grant an admitted
user its full-frame power g_k(1); users are never partially served.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from functools import wraps
from typing import Any

import numpy as np

from src.errors import DomainError
from src.instance import Instance
from src.link import PowerCurve, end_to_end_latency
from src.observability import trace_span
from src.pmm import Solution, make_solution, objective_p1, recover_power, round_and_repair, solve_subproblem

logger = logging.getLogger(__name__)

BRUTE_FORCE_MAX_USERS = 22
BRUTE_FORCE_CHUNK = 1 << 16


@dataclass
class Decision:
    x: np.ndarray
    p: np.ndarray
    iterations: int = 0
    trace: list[float] = field(default_factory=list)
    status: str = "ok"
    meta: dict[str, Any] = field(default_factory=dict)


def timed_solver(name: str) -> Callable:
    """Turn a function returning a Decision into a timed solver returning a Solution."""

    def decorator(func: Callable[..., Decision]) -> Callable[..., Solution]:
        @wraps(func)
        def wrapper(inst: Instance, *args, **kwargs) -> Solution:
            with trace_span(name, K=inst.num_users) as span:
                decision = func(inst, *args, **kwargs)
            return make_solution(
                inst,
                decision.x,
                decision.p,
                name,
                wall_time=span.duration_s,
                iterations=decision.iterations,
                surrogate_trace=decision.trace,
                status=decision.status,
                meta=decision.meta,
            )

        return wrapper

    return decorator


def _admit_in_order(inst: Instance, order) -> np.ndarray:
    """Walk users in `order`, admitting each whose full-frame power still fits."""
    full = PowerCurve.from_instance(inst).full
    x = np.zeros(inst.num_users)
    used, count = 0.0, 0
    for k in order:
        if count >= inst.max_collab:
            break
        if used + full[k] <= inst.power_budget:
            x[k] = 1.0
            used += full[k]
            count += 1
    return x


def _descending(values: np.ndarray) -> list[int]:
    """Indices by value descending; equal values keep index order."""
    return sorted(range(values.size), key=lambda k: (-values[k], k))


@timed_solver("user_gs")
def solve_user_gs(inst: Instance) -> Decision:
    """Everyone renders locally."""
    K = inst.num_users
    return Decision(x=np.zeros(K), p=np.zeros(K))


@timed_solver("edge_gs")
def solve_edge_gs(inst: Instance) -> Decision:
    """
    Everyone downloads the edge render. Over budget, the minimal powers are
    scaled down proportionally to spend P exactly, so deadlines may be missed;
    the returned Solution then reports itself infeasible.
    """
    K = inst.num_users
    x = np.ones(K)
    p = recover_power(inst, x)
    total = float(np.sum(p))
    scaled = total > inst.power_budget
    if scaled:
        p = p * (inst.power_budget / total)
    latency = np.asarray(
        end_to_end_latency(
            inst.gamma,
            inst.noise_array,
            inst.bandwidth_array,
            inst.volume_array,
            x,
            p,
            inst.edge_render_time,
            inst.local_render_time,
        ),
        dtype=float,
    )
    late = latency > inst.deadline * (1 + 1e-9)
    feasible = not late.any() and inst.max_collab >= K
    return Decision(
        x=x,
        p=p,
        status="ok" if feasible else "infeasible",
        meta={
            "power_scaled": scaled,
            "max_latency": float(np.max(latency)),
            "late_users": np.flatnonzero(late).tolist(),
        },
    )


@timed_solver("max_rate")
def solve_max_rate(inst: Instance) -> Decision:
    """Rate-driven admission: strongest channels first, switching gains ignored."""
    x = _admit_in_order(inst, _descending(inst.gamma))
    window = inst.deadline - inst.edge_render_time
    return Decision(
        x=x,
        p=recover_power(inst, x),
        meta={"sum_rate": float(np.sum(x * inst.volume_array) / window)},
    )


@timed_solver("greedy")
def solve_greedy(inst: Instance) -> Decision:
    """Largest switching gain first; skip whoever no longer fits."""
    x = _admit_in_order(inst, _descending(inst.gains))
    return Decision(x=x, p=recover_power(inst, x))


@timed_solver("rounding")
def solve_rounding(inst: Instance) -> Decision:
    """Round the unpenalized continuous relaxation, then repair."""
    relaxed = solve_subproblem(inst, np.zeros(inst.num_users), math.inf)
    x = round_and_repair(inst, relaxed.x)
    return Decision(
        x=x,
        p=recover_power(inst, x),
        meta={"relaxation_objective": float(np.sum(inst.gains) + relaxed.objective)},
    )


def _local_moves(x: np.ndarray) -> list[tuple[int, ...]]:
    active = np.flatnonzero(x == 1.0).tolist()
    idle = np.flatnonzero(x == 0.0).tolist()
    flips = [(k,) for k in range(x.size)]
    swaps = [(i, j) for i in active for j in idle]
    return flips + swaps


def _apply(x: np.ndarray, move: tuple[int, ...]) -> np.ndarray:
    y = x.copy()
    for k in move:
        y[k] = 1.0 - y[k]
    return y


def _fits(inst: Instance, x: np.ndarray, full: np.ndarray) -> bool:
    return np.sum(x) <= inst.max_collab and float(np.sum(full * x)) <= inst.power_budget


@timed_solver("local_search")
def solve_local_search(inst: Instance, max_iters: int = 1000, seed: int = 0) -> Decision:
    """
    First-improvement search over single flips and one-in/one-out swaps,
    starting from the greedy admission. Moves are scanned in a seeded random
    order; the search ends at a local optimum or after max_iters accepted moves.
    """
    rng = np.random.default_rng(seed)
    full = PowerCurve.from_instance(inst).full
    x = solve_greedy(inst).x
    x = np.asarray(x, dtype=float)
    value = objective_p1(inst, x)
    trace = [value]
    status = "local-optimum"
    accepted = 0
    while accepted < max_iters:
        moves = _local_moves(x)
        improved = False
        for idx in rng.permutation(len(moves)):
            candidate = _apply(x, moves[idx])
            if not _fits(inst, candidate, full):
                continue
            candidate_value = objective_p1(inst, candidate)
            if candidate_value < value:
                x, value = candidate, candidate_value
                trace.append(value)
                accepted += 1
                improved = True
                break
        if not improved:
            break
    else:
        status = "max-iters"
    return Decision(x=x, p=recover_power(inst, x), iterations=accepted, trace=trace, status=status)


def _mask_bits(masks: np.ndarray, K: int) -> np.ndarray:
    """Row per mask; user 0 is the most significant bit."""
    shifts = np.arange(K - 1, -1, -1, dtype=np.int64)
    return ((masks[:, None] >> shifts) & 1).astype(float)


@timed_solver("brute_force")
def solve_brute_force(inst: Instance) -> Decision:
    """
    Exhaustive optimum over all 2^K collaboration patterns.

    Ties go to fewer collaborating users, then to the lexicographically
    smallest x (the smallest mask, since user 0 is the leading bit).
    """
    K = inst.num_users
    if K > BRUTE_FORCE_MAX_USERS:
        raise DomainError(
            f"brute force is capped at K={BRUTE_FORCE_MAX_USERS} users, instance has K={K}"
        )
    full = PowerCurve.from_instance(inst).full
    gains = inst.gains
    total = float(np.sum(gains))
    best: tuple[float, int, int] | None = None
    for start in range(0, 1 << K, BRUTE_FORCE_CHUNK):
        masks = np.arange(start, min(start + BRUTE_FORCE_CHUNK, 1 << K), dtype=np.int64)
        bits = _mask_bits(masks, K)
        counts = bits.sum(axis=1).astype(int)
        ok = (counts <= inst.max_collab) & (bits @ full <= inst.power_budget)
        if not ok.any():
            continue
        objective = total - bits[ok] @ gains
        order = np.lexsort((masks[ok], counts[ok], objective))
        i = order[0]
        candidate = (float(objective[i]), int(counts[ok][i]), int(masks[ok][i]))
        if best is None or candidate < best:
            best = candidate

    # x = 0 is always feasible, so best is set
    mask = best[2]
    x = _mask_bits(np.array([mask], dtype=np.int64), K)[0]
    return Decision(x=x, p=recover_power(inst, x), meta={"patterns": 1 << K})
