"""
Theory Module

Monte Carlo and exact checks of the order statistics behind the sampled prober.
"""

from .verify import rank_law_report, confidence_percentiles, proportionality_check, verify_theory

__all__ = ['rank_law_report', 'confidence_percentiles', 'proportionality_check', 'verify_theory']
