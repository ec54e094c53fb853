"""
Bench Module

Synthetic structured workloads and end-to-end pipeline runs.
"""

from .workload import WorkloadSpec, generate_workload
from .pipeline import RunReport, run_pipeline, bench, sweep

__all__ = ['WorkloadSpec', 'generate_workload', 'RunReport', 'run_pipeline', 'bench', 'sweep']
