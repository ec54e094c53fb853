"""
asablade

Adaptive block-sparse attention (probe, mask, execute), its statistical
correctness suite, and a toy trajectory distribution matching distiller.
"""

__version__ = "1.0.0"
__author__ = "asablade team"
