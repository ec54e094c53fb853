"""
Dense numeric substrate.

Tensors are plain ``numpy.ndarray`` objects stored as 32-bit floats. Dot
products and softmax sums accumulate in 64-bit and are rounded back to 32-bit
on return unless the caller asks to keep the wide result.
"""

from dataclasses import dataclass, field, asdict
from typing import Dict, Optional, Tuple

import numpy as np

from src.utils.errors import NumericalDivergenceError, ValidationError
from src.utils.logger import get_logger

logger = get_logger(__name__)

STORAGE_DTYPE = np.float32
ACCUM_DTYPE = np.float64
_U64_MASK = (1 << 64) - 1


@dataclass
class FlopCounter:
    """Multiply/add/exp tallies for one run.

    Counters only ever grow. Concurrent tasks each own a counter and the
    results are folded together with ``merge`` once the tasks have joined.
    """

    mults: int = 0
    adds: int = 0
    exps: int = 0

    def add(self, mults: int = 0, adds: int = 0, exps: int = 0) -> "FlopCounter":
        if mults < 0 or adds < 0 or exps < 0:
            raise ValidationError("FLOP increments must be non-negative")
        self.mults += int(mults)
        self.adds += int(adds)
        self.exps += int(exps)
        return self

    def merge(self, other: "FlopCounter") -> "FlopCounter":
        return self.add(other.mults, other.adds, other.exps)

    @property
    def total(self) -> int:
        return self.mults + self.adds + self.exps

    def snapshot(self) -> "FlopCounter":
        return FlopCounter(self.mults, self.adds, self.exps)

    def to_dict(self) -> Dict[str, int]:
        data = asdict(self)
        data["total"] = self.total
        return data


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream.

    The Philox key is derived from ``seed`` and the split ``path``; the
    Philox counter starts at ``counter``. Equal ``(seed, path, counter)``
    triples produce identical draws everywhere, independent of the order in
    which sibling streams are consumed.
    """

    seed: int
    counter: int = 0
    path: Tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.counter < 0:
            raise ValidationError(f"RngStream counter must be non-negative, got {self.counter}")

    def generator(self) -> np.random.Generator:
        key = np.random.SeedSequence(
            entropy=int(self.seed) & _U64_MASK, spawn_key=self.path
        ).generate_state(2, np.uint64)
        counter = np.array([self.counter & _U64_MASK, 0, 0, 0], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def split(self, index: int) -> "RngStream":
        """Child stream ``index``; children of one parent never overlap."""
        if index < 0:
            raise ValidationError(f"split index must be non-negative, got {index}")
        return RngStream(self.seed, self.counter, self.path + (int(index),))

    def advance(self, steps: int = 1) -> "RngStream":
        return RngStream(self.seed, self.counter + int(steps), self.path)


def ensure_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    """Raise NumericalDivergenceError if ``x`` holds NaN or Inf."""
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NumericalDivergenceError(f"{what} has {bad} non-finite entries")
    return x


def as_tensor(x, ndim: Optional[int] = None, name: str = "tensor") -> np.ndarray:
    """Coerce ``x`` to a C-contiguous float32 array with positive extents.

    Args:
        x: Array-like input.
        ndim: Required rank, if any.
        name: Used in error messages.

    Raises:
        ValidationError: On wrong rank, zero extents or non-finite entries.
    """
    arr = np.ascontiguousarray(x, dtype=STORAGE_DTYPE)
    if ndim is not None and arr.ndim != ndim:
        raise ValidationError(f"{name} must have rank {ndim}, got shape {arr.shape}")
    if arr.ndim == 0 or any(extent <= 0 for extent in arr.shape):
        raise ValidationError(f"{name} must have positive extents, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} has non-finite entries")
    return arr


def _finish(out: np.ndarray, keep_precision: bool, what: str) -> np.ndarray:
    ensure_finite(out, what)
    if keep_precision:
        return out
    return out.astype(STORAGE_DTYPE)


def matmul(
    a: np.ndarray,
    b: np.ndarray,
    flops: Optional[FlopCounter] = None,
    keep_precision: bool = False,
) -> np.ndarray:
    """Matrix product with 64-bit accumulation.

    Args:
        a: (m, k) matrix.
        b: (k, n) matrix.
        flops: Counter charged m*n*k mults and m*n*(k-1) adds.
        keep_precision: Return the float64 product instead of rounding.

    Returns:
        (m, n) product.

    Raises:
        ValidationError: If the operands are not matrices or inner extents differ.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValidationError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ValidationError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if min(m, k, n) <= 0:
        raise ValidationError(f"matmul needs positive extents, got {a.shape} x {b.shape}")

    out = a.astype(ACCUM_DTYPE) @ b.astype(ACCUM_DTYPE)
    if flops is not None:
        flops.add(mults=m * n * k, adds=m * n * (k - 1))
    return _finish(out, keep_precision, "matmul output")


def row_softmax(
    s: np.ndarray,
    scale: float = 1.0,
    flops: Optional[FlopCounter] = None,
    keep_precision: bool = False,
) -> np.ndarray:
    """Numerically stable softmax over the last axis of a matrix.

    Entries equal to ``-inf`` are treated as masked logits. Every row must
    keep at least one finite logit.

    Raises:
        ValidationError: On NaN/+inf input or a fully masked row.
    """
    s = np.asarray(s, dtype=ACCUM_DTYPE)
    if s.ndim != 2 or s.shape[0] == 0 or s.shape[1] == 0:
        raise ValidationError(f"row_softmax expects a non-empty matrix, got {s.shape}")
    if np.any(np.isnan(s)) or np.any(s == np.inf):
        raise ValidationError("row_softmax input contains NaN or +inf")

    x = s * scale
    row_max = x.max(axis=1, keepdims=True)
    if np.any(row_max == -np.inf):
        raise ValidationError("row_softmax received a fully masked row")

    e = np.exp(x - row_max)
    out = e / e.sum(axis=1, keepdims=True)

    if flops is not None:
        m, n = s.shape
        flops.add(mults=2 * m * n, adds=m * n + m * (n - 1), exps=m * n)
    return _finish(out, keep_precision, "softmax output")


def pool_window_sizes(n_rows: int, window: int) -> np.ndarray:
    """Sizes of the consecutive ``window``-row groups covering ``n_rows`` rows."""
    if window <= 0:
        raise ValidationError(f"pool window must be >= 1, got {window}")
    starts = np.arange(0, n_rows, window)
    return np.minimum(starts + window, n_rows) - starts


def mean_pool_rows(x: np.ndarray, n: int, keep_precision: bool = False) -> np.ndarray:
    """Average consecutive groups of ``n`` rows; the trailing group may be short.

    Raises:
        ValidationError: If ``n`` < 1 or ``x`` is not a matrix.
    """
    if n <= 0:
        raise ValidationError(f"pool window must be >= 1, got {n}")
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError(f"mean_pool_rows expects a non-empty matrix, got {x.shape}")
    starts = np.arange(0, x.shape[0], n)
    sums = np.add.reduceat(x.astype(ACCUM_DTYPE), starts, axis=0)
    sizes = pool_window_sizes(x.shape[0], n)
    return _finish(sums / sizes[:, None], keep_precision, "pooled rows")
