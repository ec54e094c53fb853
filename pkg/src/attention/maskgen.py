"""
Block mask construction.

``threshold_mask`` keeps, per query block, the fewest key blocks whose
row-normalized importance reaches ``tau``, then clamps that count to the
configured retention range.
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from src.attention.config import AttnConfig
from src.attention.prober import ImportanceMap
from src.utils.errors import ValidationError
from src.utils.logger import get_logger

logger = get_logger(__name__)

CUMSUM_TOLERANCE = 1e-12
_CLAMP_SLACK = 1e-9
_SEARCH_STEPS = 40


@dataclass(frozen=True, eq=False)
class BlockMask:
    """Binary N_b x N_b block mask.

    Attributes:
        bits: Boolean matrix, True where the (query block, key block) pair
            is computed.
        degenerate_rows: Rows whose importance was all zero and were filled
            with the blocks nearest the diagonal.
        tau: Threshold that produced the mask, when known.
    """

    bits: np.ndarray
    degenerate_rows: Tuple[int, ...] = field(default_factory=tuple)
    tau: Optional[float] = None

    def __post_init__(self):
        bits = np.array(self.bits, copy=True)
        if bits.ndim != 2 or bits.shape[0] != bits.shape[1] or bits.shape[0] == 0:
            raise ValidationError(f"block mask must be square, got {bits.shape}")
        if bits.dtype != np.bool_:
            if not np.all((bits == 0) | (bits == 1)):
                raise ValidationError("block mask must be 0/1 valued")
            bits = bits.astype(np.bool_)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def full(cls, n_b: int) -> "BlockMask":
        return cls(np.ones((n_b, n_b), dtype=np.bool_), tau=1.0)

    @property
    def n_b(self) -> int:
        return int(self.bits.shape[0])

    @property
    def kept_per_row(self) -> np.ndarray:
        return self.bits.sum(axis=1)

    @property
    def kept(self) -> int:
        return int(self.bits.sum())

    @property
    def sparsity(self) -> float:
        return 1.0 - self.kept / float(self.bits.size)

    def token_mask(self, n: int, b: int) -> np.ndarray:
        """Expand to an (n, n) token-level boolean mask for block size ``b``."""
        if n_blocks_for(n, b) != self.n_b:
            raise ValidationError(f"mask has {self.n_b} blocks, sequence needs {n_blocks_for(n, b)}")
        blk = np.arange(n) // b
        return self.bits[np.ix_(blk, blk)]

    def check_retention(self, min_keep: float = 0.0, max_keep: float = 1.0) -> None:
        """Raise ValidationError if any row breaks the retention clamps."""
        lo, hi = retention_bounds(self.n_b, min_keep, max_keep)
        kept = self.kept_per_row
        if kept.min() < lo or kept.max() > hi:
            raise ValidationError(
                f"row retention outside [{lo}, {hi}]: min {kept.min()}, max {kept.max()}"
            )


def n_blocks_for(n: int, b: int) -> int:
    return -(-n // b)


def retention_bounds(n_b: int, min_keep: float, max_keep: float) -> Tuple[int, int]:
    """Per-row kept-block range; never below one, and the lower bound wins a conflict."""
    lo = max(1, math.ceil(min_keep * n_b - _CLAMP_SLACK))
    hi = max(1, math.floor(max_keep * n_b + _CLAMP_SLACK))
    return lo, max(hi, lo)


def tie_break_rank(row) -> np.ndarray:
    """Indices by descending score; equal scores keep ascending index order."""
    row = np.asarray(row, dtype=np.float64)
    return np.argsort(-row, kind="stable")


def _diagonal_fill(i: int, n_b: int, count: int) -> np.ndarray:
    j = np.arange(n_b)
    order = np.lexsort((j, np.abs(j - min(i, n_b - 1))))
    return order[:count]


def _as_values(p: Union[ImportanceMap, np.ndarray]) -> np.ndarray:
    values = p.values if isinstance(p, ImportanceMap) else p
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] == 0 or values.shape[1] == 0:
        raise ValidationError(f"importance must be a non-empty matrix, got {values.shape}")
    if np.any(np.isnan(values)) or np.any(values < 0) or np.any(np.isinf(values)):
        raise ValidationError("importance values must be finite and non-negative")
    return values


def threshold_mask(p: Union[ImportanceMap, np.ndarray], cfg: AttnConfig) -> BlockMask:
    """Cumulative-importance threshold mask.

    Each row is L1-normalized and ranked with ``tie_break_rank``; the
    smallest m whose cumulative share reaches ``cfg.tau`` is clamped to the
    retention range and the top m blocks are kept. ``tau == 1`` keeps every
    block (subject to ``max_keep``). A row with no mass keeps the blocks
    nearest its diagonal and is reported in ``degenerate_rows``.

    Args:
        p: ImportanceMap or raw non-negative matrix (any positive scale).
        cfg: Supplies tau, min_keep and max_keep.

    Returns:
        BlockMask satisfying the retention clamps.
    """
    values = _as_values(p)
    n_rows, n_b = values.shape
    lo, hi = retention_bounds(n_b, cfg.min_keep, cfg.max_keep)
    bits = np.zeros((n_rows, n_b), dtype=np.bool_)
    degenerate = []

    totals = values.sum(axis=1)
    for i in range(n_rows):
        if totals[i] <= 0.0:
            degenerate.append(i)
            bits[i, _diagonal_fill(i, n_b, lo)] = True
            continue
        normalized = values[i] / totals[i]
        order = tie_break_rank(normalized)
        if cfg.tau >= 1.0:
            m = n_b
        else:
            cumulative = np.cumsum(normalized[order])
            m = int(np.searchsorted(cumulative, cfg.tau - CUMSUM_TOLERANCE, side="left")) + 1
            m = min(m, n_b)
        m = min(max(m, lo), hi)
        bits[i, order[:m]] = True

    if degenerate:
        logger.warning(
            f"{len(degenerate)} importance row(s) had no mass, kept blocks nearest the diagonal",
            context={"rows": degenerate[:8], "tau": cfg.tau},
        )
    return BlockMask(bits=bits, degenerate_rows=tuple(degenerate), tau=cfg.tau)


def band_mask(n_b: int, below: int, above: int) -> BlockMask:
    """Mask keeping key blocks with ``-below <= j - i <= above``."""
    if below < 0 or above < 0:
        raise ValidationError(f"band extents must be >= 0, got {below}, {above}")
    if n_b < 1:
        raise ValidationError(f"n_b must be >= 1, got {n_b}")
    idx = np.arange(n_b)
    offset = idx[None, :] - idx[:, None]
    return BlockMask(bits=(offset >= -below) & (offset <= above))


def static_window_mask(n_b: int, window: int) -> BlockMask:
    """Banded mask keeping key blocks with ``|i - j| <= window // 2``."""
    if window < 1:
        raise ValidationError(f"window must be >= 1, got {window}")
    return band_mask(n_b, window // 2, window // 2)


def static_window_for_sparsity(n_b: int, target: float) -> BlockMask:
    """Band whose sparsity is closest to ``target`` (sparser on ties).

    Every band width from 1 to ``2 n_b - 1`` is tried; an even width ``w``
    keeps ``w/2 - 1`` blocks below the diagonal and ``w/2`` above it.
    """
    best: Optional[BlockMask] = None
    for width in range(1, 2 * n_b):
        mask = band_mask(n_b, (width - 1) // 2, width // 2)
        if best is None or abs(mask.sparsity - target) < abs(best.sparsity - target):
            best = mask
    return best


def target_sparsity_mask(
    p: Union[ImportanceMap, np.ndarray],
    cfg: AttnConfig,
    target: float,
) -> BlockMask:
    """Threshold mask at the largest tau whose sparsity is at least ``target``.

    Sparsity falls as tau grows, so tau is bisected. When even the smallest
    tau cannot reach the target (clamps keep too many blocks) the sparsest
    reachable mask is returned.
    """
    if not 0.0 <= target < 1.0:
        raise ValidationError(f"target sparsity must lie in [0, 1), got {target}")

    def build(tau: float) -> BlockMask:
        return threshold_mask(p, cfg.with_overrides(tau=tau))

    top = build(1.0)
    if top.sparsity >= target:
        return top
    lo_tau, hi_tau = 1e-9, 1.0
    best = build(lo_tau)
    if best.sparsity < target:
        logger.warning(
            f"Target sparsity {target:.3f} unreachable, best is {best.sparsity:.3f}",
            context={"min_keep": cfg.min_keep},
        )
        return best
    for _ in range(_SEARCH_STEPS):
        mid = 0.5 * (lo_tau + hi_tau)
        mask = build(mid)
        if mask.sparsity >= target:
            lo_tau, best = mid, mask
        else:
            hi_tau = mid
    return best


def mask_overlap(a: BlockMask, b: BlockMask) -> float:
    """Intersection over union of kept entries; two empty masks overlap fully."""
    if a.bits.shape != b.bits.shape:
        raise ValidationError(f"mask shapes differ: {a.bits.shape} vs {b.bits.shape}")
    union = np.logical_or(a.bits, b.bits).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a.bits, b.bits).sum() / union)


def mean_row_overlap(a: BlockMask, b: BlockMask) -> float:
    """Mean per-row intersection over union."""
    if a.bits.shape != b.bits.shape:
        raise ValidationError(f"mask shapes differ: {a.bits.shape} vs {b.bits.shape}")
    inter = np.logical_and(a.bits, b.bits).sum(axis=1)
    union = np.logical_or(a.bits, b.bits).sum(axis=1)
    per_row = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    return float(per_row.mean())
