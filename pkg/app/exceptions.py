"""
Error types shared by the services.

Precondition failures are plain ``ValueError``s with a readable message.
Numerical trouble during a flow is a ``NumericalAbort`` carrying the
diagnostics that were available when it happened.
"""
from typing import Any, Dict, Optional


class NumericalAbort(RuntimeError):
    """A computation lost the positivity or stability it relies on."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class MetricDegenerateError(NumericalAbort):
    """Pointwise metric (or a Gram block of it) stopped being positive-definite."""


class StepRejectedError(NumericalAbort):
    """Time step rejected after the maximum number of halvings."""


class ConfigError(ValueError):
    """Invalid run configuration. The message names the offending key path."""
