"""
Configuration Module

Environment-driven defaults for the attention pipeline, the distillation toy
and logging. The JSON run-config loader lives in run_config.
"""

from .settings import *

__all__ = [
    'OUTPUT_DIRECTORY',
    'MAX_WORKERS',
    'DEFAULT_SEED',
    'ASA_BLOCK_SIZE',
    'ASA_SAMPLES',
    'ASA_TAU',
    'ASA_MIN_KEEP',
    'ASA_MAX_KEEP',
    'ASA_POOL_N',
    'GILBERT_MODE',
    'PIPELINE_VARIANTS',
    'LOGGING_CONFIG',
    'LOG_DIR',
    'DEFAULT_LOG_LEVEL',
    'LOG_COLORS',
]
