"""
Exception hierarchy shared by every module.

The CLI maps these onto exit codes (2 for validation/domain problems,
3 for solver failures) and the HTTP service onto status codes.
"""

from __future__ import annotations

from typing import Any


class IracError(Exception):
    """Base class for all errors raised by this package."""


class ValidationFailure(IracError, ValueError):
    """One or more invariants of a config or instance are violated."""

    def __init__(self, violations: list[str], subject: str = "input"):
        self.violations = list(violations)
        self.subject = subject
        super().__init__(f"invalid {subject}: " + "; ".join(self.violations))


class DomainError(IracError, ValueError):
    """A math function was called outside its domain."""


class SolverError(IracError, RuntimeError):
    """A solver could not produce a result; carries residual diagnostics."""

    def __init__(self, message: str, diagnostics: dict[str, Any] | None = None):
        self.diagnostics = dict(diagnostics or {})
        if self.diagnostics:
            detail = " ".join(f"{k}={v}" for k, v in self.diagnostics.items())
            message = f"{message} ({detail})"
        super().__init__(message)


class TrainingError(SolverError):
    """Imitation-network training diverged."""


class BreakerOpenError(IracError, RuntimeError):
    """Raised when the fast-path circuit breaker blocks execution."""
