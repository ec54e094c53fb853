"""
Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ValidationError -> 1,
NumericalDivergenceError -> 2.
"""

from typing import Any, Dict, List, Optional


class AsaBladeError(Exception):
    """Base class for all errors raised by the package."""


class ValidationError(AsaBladeError, ValueError):
    """Bad shapes, out-of-range parameters, malformed files or configs."""


class NumericalDivergenceError(AsaBladeError, ArithmeticError):
    """NaN/Inf in a public output, or a training run that blew up.

    Args:
        message: Human readable description.
        trace: Optional per-iteration records collected before the abort.
    """

    def __init__(self, message: str, trace: Optional[List[Dict[str, Any]]] = None):
        super().__init__(message)
        self.trace = trace or []
