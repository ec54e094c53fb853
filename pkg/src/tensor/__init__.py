"""
Tensor Module

Dense numeric substrate: matmul, softmax, pooling, seeded streams, FLOP
accounting, quality metrics and the ``.btf`` file format.
"""

from .core import (
    FlopCounter,
    RngStream,
    as_tensor,
    ensure_finite,
    matmul,
    mean_pool_rows,
    pool_window_sizes,
    row_softmax,
)
from .metrics import psnr, ssim, relative_error
from .btf import read_btf, write_btf, write_matrix_csv, write_permutation_csv

__all__ = [
    'FlopCounter',
    'RngStream',
    'as_tensor',
    'ensure_finite',
    'matmul',
    'mean_pool_rows',
    'pool_window_sizes',
    'row_softmax',
    'psnr',
    'ssim',
    'relative_error',
    'read_btf',
    'write_btf',
    'write_matrix_csv',
    'write_permutation_csv',
]
