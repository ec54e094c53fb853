"""
Utilities Module

Logging, the exception hierarchy and console summary reports.
"""

from .logger import get_logger, debug, info, warning, error, critical, exception, set_level
from .errors import AsaBladeError, ValidationError, NumericalDivergenceError

__all__ = [
    'get_logger',
    'debug',
    'info',
    'warning',
    'error',
    'critical',
    'exception',
    'set_level',
    'AsaBladeError',
    'ValidationError',
    'NumericalDivergenceError',
]
