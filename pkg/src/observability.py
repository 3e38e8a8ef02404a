"""
Lightweight observability utilities.

Solver runs, dataset generation and training epochs are the operations whose
latency matters here (the ILO fast path exists only because PMM is slow), so
each of them is wrapped in a span that emits one structured record:

    [TRACE] pmm_solve duration_ms=3.12 K=20 iterations=7
"""

from __future__ import annotations

import logging
import time
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any

from src.config import settings

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

logger = logging.getLogger("irac.trace")


def configure_logging(level: str | None = None) -> None:
    """Configure root logging once at process entry (CLI, service)."""
    logging.basicConfig(
        level=getattr(logging, (level or settings.log_level).upper(), logging.INFO),
        format=LOG_FORMAT,
    )


@dataclass
class Span:
    """Mutable span record; callers may attach metadata discovered mid-run."""

    name: str
    metadata: dict[str, Any] = field(default_factory=dict)
    duration_s: float = 0.0

    def annotate(self, **metadata: Any) -> None:
        self.metadata.update(metadata)


@contextmanager
def trace_span(name: str, **metadata: Any) -> Iterator[Span]:
    """
    Measure execution duration of a critical operation.

    Guarantees
    ----------
    - Always logs completion (even if an exception occurs)
    - Never suppresses exceptions
    - Produces structured key=value logs
    - ``span.duration_s`` is populated when the block exits
    """
    span = Span(name=name, metadata=dict(metadata))
    start = time.perf_counter()
    try:
        yield span
    finally:
        span.duration_s = time.perf_counter() - start
        meta = " ".join(f"{k}={v}" for k, v in span.metadata.items())
        logger.debug("[TRACE] %s duration_ms=%.3f %s", name, span.duration_s * 1000, meta)
