"""
Circuit breaker around the imitation-learning fast path.

A model that keeps producing rejected decisions (K mismatch, infeasible
output after repair, runtime errors) is taken out of the loop for a while and
the planner falls back to PMM.
"""

import logging
import time
from collections.abc import Callable
from enum import Enum
from typing import Any

from src.errors import BreakerOpenError

logger = logging.getLogger(__name__)


class CircuitState(Enum):
    CLOSED = "closed"  # fast path in use
    OPEN = "open"  # fast path skipped
    HALF_OPEN = "half_open"  # one trial call admitted


class CircuitBreaker:
    """
    Consecutive-failure breaker.

    Transitions:
    - CLOSED -> OPEN: after failure_threshold consecutive failures
    - OPEN -> HALF_OPEN: once recovery_timeout seconds have elapsed
    - HALF_OPEN -> CLOSED: the trial call succeeds
    - HALF_OPEN -> OPEN: the trial call fails
    """

    def __init__(
        self,
        failure_threshold: int = 5,
        recovery_timeout: float = 60.0,
        name: str = "fast-path",
        clock: Callable[[], float] = time.monotonic,
    ):
        self.failure_threshold = failure_threshold
        self.recovery_timeout = recovery_timeout
        self.name = name
        self._clock = clock

        self.failure_count = 0
        self.state = CircuitState.CLOSED
        self.opened_at: float | None = None

        logger.info(
            "CircuitBreaker '%s' initialized: threshold=%d, recovery_timeout=%ss",
            name,
            failure_threshold,
            recovery_timeout,
        )

    def call(self, func: Callable, *args, **kwargs) -> Any:
        """Run func under breaker protection; raises BreakerOpenError while OPEN."""
        if self.state == CircuitState.OPEN:
            if self._should_attempt_reset():
                logger.info("CircuitBreaker '%s': OPEN -> HALF_OPEN", self.name)
                self.state = CircuitState.HALF_OPEN
            else:
                raise BreakerOpenError(f"CircuitBreaker '{self.name}' is OPEN")

        try:
            result = func(*args, **kwargs)
        except Exception as exc:
            self._record_failure()
            logger.error(
                "CircuitBreaker '%s' failure (%d/%d): %s",
                self.name,
                self.failure_count,
                self.failure_threshold,
                exc,
            )
            raise

        if self.state == CircuitState.HALF_OPEN:
            logger.info("CircuitBreaker '%s': HALF_OPEN -> CLOSED", self.name)
        self._reset()
        return result

    def _record_failure(self) -> None:
        self.failure_count += 1
        if self.state == CircuitState.HALF_OPEN or self.failure_count >= self.failure_threshold:
            if self.state != CircuitState.OPEN:
                logger.warning("CircuitBreaker '%s': %s -> OPEN", self.name, self.state.value)
            self.state = CircuitState.OPEN
            self.opened_at = self._clock()

    def _should_attempt_reset(self) -> bool:
        if self.opened_at is None:
            return True
        return self._clock() - self.opened_at >= self.recovery_timeout

    def _reset(self) -> None:
        self.failure_count = 0
        self.state = CircuitState.CLOSED
        self.opened_at = None

    def get_state(self) -> dict:
        """Snapshot for /health and /metrics."""
        return {
            "name": self.name,
            "state": self.state.value,
            "failure_count": self.failure_count,
            "failure_threshold": self.failure_threshold,
            "recovery_timeout": self.recovery_timeout,
        }
