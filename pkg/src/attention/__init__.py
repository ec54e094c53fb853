"""
Attention Module

Gilbert token ordering, sampled block-importance probing, threshold masks
and block-sparse attention executors.
"""

from .config import AttnConfig
from .gilbert import TokenGrid, Permutation, gilbert_order, apply_permutation, undo_permutation
from .prober import ImportanceMap, compute_block_importance, dense_importance_map
from .maskgen import BlockMask, threshold_mask, static_window_mask, target_sparsity_mask
from .sparse_attn import AttnOutput, dense_attention, sparse_attention, sparse_attention_gt

__all__ = [
    'AttnConfig',
    'TokenGrid',
    'Permutation',
    'gilbert_order',
    'apply_permutation',
    'undo_permutation',
    'ImportanceMap',
    'compute_block_importance',
    'dense_importance_map',
    'BlockMask',
    'threshold_mask',
    'static_window_mask',
    'target_sparsity_mask',
    'AttnOutput',
    'dense_attention',
    'sparse_attention',
    'sparse_attention_gt',
]
