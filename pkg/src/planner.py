"""
Online collaboration planner deployed at the edge server.

Two execution paths:

Fast path (learned):
  - trained imitation network + repair + analytic power recovery
  - sub-millisecond decisions at K = 20
  - guarded by a circuit breaker; every decision is feasibility-checked

Solver path (optimization):
  - PMM on the same instance
  - used when no model is loaded, the model's K does not match, the breaker
    is open, or the fast-path decision was rejected
"""

import logging
from collections import Counter
from pathlib import Path

from src.circuit_breaker import CircuitBreaker
from src.config import settings
from src.errors import BreakerOpenError, IracError, SolverError
from src.ilo import MlpModel, infer, load_model
from src.instance import Instance, require_valid
from src.observability import trace_span
from src.pmm import PmmParams, Solution, pmm_solve

logger = logging.getLogger(__name__)


class CollaborationPlanner:
    """Decides (x, p) per frame, preferring the learned fast path."""

    def __init__(
        self,
        model: MlpModel | None = None,
        params: PmmParams | None = None,
        breaker: CircuitBreaker | None = None,
    ):
        self.model = model
        self.params = params or PmmParams()
        self.breaker = breaker or CircuitBreaker(
            failure_threshold=settings.fast_path_failure_threshold,
            recovery_timeout=settings.fast_path_recovery_timeout,
            name="ilo-fast-path",
        )
        self.path_counts: Counter[str] = Counter()
        logger.info("CollaborationPlanner ready (model loaded: %s)", model is not None)

    @classmethod
    def from_settings(cls) -> "CollaborationPlanner":
        model = None
        if settings.model_path:
            path = Path(settings.model_path)
            if path.exists():
                model = load_model(path)
            else:
                logger.warning("IRAC_MODEL_PATH %s does not exist; fast path disabled", path)
        return cls(model=model)

    def _fast_path(self, inst: Instance) -> Solution:
        solution = infer(self.model, inst)
        if not solution.feasibility.feasible:
            raise SolverError(
                "fast-path decision failed the feasibility check",
                diagnostics={"violations": solution.feasibility.violations[:3]},
            )
        return solution

    def decide(self, inst: Instance) -> Solution:
        require_valid(inst)
        with trace_span("planner_decide", K=inst.num_users) as span:
            if self.model is not None and self.model.num_users == inst.num_users:
                try:
                    solution = self.breaker.call(self._fast_path, inst)
                except BreakerOpenError:
                    logger.info("[FAST PATH] breaker open; using PMM")
                    self.path_counts["fast_path_skipped"] += 1
                except (IracError, RuntimeError) as exc:
                    logger.warning("[FAST PATH] rejected: %s", exc)
                    self.path_counts["fast_path_rejected"] += 1
                else:
                    self.path_counts["fast"] += 1
                    span.annotate(path="fast")
                    solution.meta["path"] = "fast"
                    return solution
            elif self.model is not None:
                logger.info(
                    "[FAST PATH] model K=%d does not match instance K=%d",
                    self.model.num_users,
                    inst.num_users,
                )

            solution = pmm_solve(inst, self.params)
            self.path_counts["solver"] += 1
            span.annotate(path="solver")
        solution.meta["path"] = "solver"
        return solution

    def stats(self) -> dict:
        return {
            "model_loaded": self.model is not None,
            "model_num_users": self.model.num_users if self.model else None,
            "paths": dict(self.path_counts),
            "fast_path_breaker": self.breaker.get_state(),
        }


# Global planner instance
_planner: CollaborationPlanner | None = None


def get_planner() -> CollaborationPlanner:
    """Get or create the global planner instance."""
    global _planner
    if _planner is None:
        _planner = CollaborationPlanner.from_settings()
    return _planner


def set_planner(planner: CollaborationPlanner | None) -> None:
    global _planner
    _planner = planner

