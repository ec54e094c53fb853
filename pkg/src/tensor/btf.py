"""
Binary tensor files (``.btf``) and CSV exports.

Layout: magic ``BTF1``, u32 rank, rank x u32 extents, then row-major
float32 data. Every integer and float is little-endian.
"""

import os
from typing import Sequence

import numpy as np
import pandas as pd

from src.utils.errors import ValidationError
from src.utils.logger import get_logger

logger = get_logger(__name__)

BTF_MAGIC = b"BTF1"
_HEADER_DTYPE = np.dtype("<u4")
_DATA_DTYPE = np.dtype("<f4")


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def write_btf(path: str, x: np.ndarray) -> None:
    """Write ``x`` as a ``.btf`` file.

    Raises:
        ValidationError: If ``x`` is a scalar or has a zero extent.
        OSError: If the file cannot be written.
    """
    x = np.asarray(x)
    if x.ndim == 0 or x.size == 0:
        raise ValidationError(f"cannot write tensor of shape {x.shape}")
    _ensure_parent(path)
    header = np.array([x.ndim, *x.shape], dtype=_HEADER_DTYPE)
    with open(path, "wb") as f:
        f.write(BTF_MAGIC)
        f.write(header.tobytes())
        f.write(np.ascontiguousarray(x, dtype=_DATA_DTYPE).tobytes())
    logger.debug(f"Wrote {path}", context={"shape": x.shape})


def read_btf(path: str) -> np.ndarray:
    """Read a ``.btf`` file into a float32 array.

    Raises:
        ValidationError: If the file is missing, truncated or has a bad magic.
    """
    if not os.path.exists(path):
        raise ValidationError(f"tensor file not found: {path}")
    with open(path, "rb") as f:
        raw = f.read()

    if raw[:4] != BTF_MAGIC:
        raise ValidationError(f"{path} is not a BTF1 file")
    if len(raw) < 8:
        raise ValidationError(f"{path} is truncated")
    rank = int(np.frombuffer(raw, dtype=_HEADER_DTYPE, count=1, offset=4)[0])
    header_end = 8 + 4 * rank
    if rank == 0 or len(raw) < header_end:
        raise ValidationError(f"{path} has a malformed header")
    shape = tuple(int(e) for e in np.frombuffer(raw, dtype=_HEADER_DTYPE, count=rank, offset=8))
    count = int(np.prod(shape))
    if len(raw) != header_end + 4 * count:
        raise ValidationError(
            f"{path}: expected {count} values for shape {shape}, "
            f"found {(len(raw) - header_end) // 4}"
        )
    data = np.frombuffer(raw, dtype=_DATA_DTYPE, count=count, offset=header_end)
    return data.reshape(shape).astype(np.float32)


def write_matrix_csv(path: str, m: np.ndarray) -> None:
    """Write a matrix as a header-less CSV heatmap, one row per line."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValidationError(f"heatmap export expects a matrix, got {m.shape}")
    _ensure_parent(path)
    pd.DataFrame(m).to_csv(path, header=False, index=False)


def write_permutation_csv(path: str, forward: Sequence[int]) -> None:
    """Write one permutation index per line."""
    _ensure_parent(path)
    pd.Series(np.asarray(forward, dtype=np.int64)).to_csv(path, header=False, index=False)


def read_permutation_csv(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise ValidationError(f"permutation file not found: {path}")
    return pd.read_csv(path, header=None).iloc[:, 0].to_numpy(dtype=np.int64)
