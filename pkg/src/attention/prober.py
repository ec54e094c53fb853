"""
Block-importance estimation.

The prober samples ``k`` tokens from every ``b``-token block of Q and K and
builds a low-resolution attention map from the samples only. The map is
computed in a single streaming pass over key blocks: a running row max and
row sum, plus the per-key-block row maxima, are enough to recover
``max(softmax)`` inside every block without storing the sampled scores.
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from src.attention.config import AttnConfig
from src.tensor.core import FlopCounter, RngStream, matmul, row_softmax
from src.utils.errors import ValidationError
from src.utils.logger import get_logger

logger = get_logger(__name__)

SPARSE_PROBE = "sparse_probe"
FULL_ORACLE = "full_oracle"
PROVENANCES = (SPARSE_PROBE, FULL_ORACLE)


@dataclass(frozen=True, eq=False)
class ImportanceMap:
    """N_b x N_b block-importance matrix and where it came from."""

    values: np.ndarray
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValidationError(f"unknown provenance {self.provenance!r}")
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.shape[0] == 0:
            raise ValidationError(f"importance map must be square, got {v.shape}")
        if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0 + 1e-6:
            raise ValidationError("importance values must lie in [0, 1]")

    @property
    def n_b(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True, eq=False)
class BlockSample:
    """Sampled rows of a blocked tensor.

    ``tokens[offsets[i]:offsets[i + 1]]`` are the rows drawn from block i and
    ``indices`` holds their row numbers in the source tensor, so a draw can be
    replayed or checked.
    """

    tokens: np.ndarray
    indices: np.ndarray
    offsets: np.ndarray
    k: int

    @property
    def n_blocks(self) -> int:
        return int(self.offsets.size - 1)

    def block(self, i: int) -> np.ndarray:
        return self.tokens[self.offsets[i]:self.offsets[i + 1]]


def n_blocks(n: int, b: int) -> int:
    return -(-n // b)


def pad_to_block(x: np.ndarray, b: int) -> Tuple[np.ndarray, int]:
    """Zero-pad rows up to a multiple of ``b``.

    Returns:
        The padded tensor and the number of valid (original) rows.
    """
    if b < 1:
        raise ValidationError(f"block size must be >= 1, got {b}")
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValidationError(f"expected an (N, d) matrix, got {x.shape}")
    n = x.shape[0]
    padded_n = n_blocks(n, b) * b
    if padded_n == n:
        return x, n
    pad = np.zeros((padded_n - n, x.shape[1]), dtype=x.dtype)
    return np.concatenate([x, pad], axis=0), n


def _block_valid_rows(n_valid: int, b: int, n_b: int) -> np.ndarray:
    starts = np.arange(n_b) * b
    return np.clip(n_valid - starts, 0, b)


def block_sample(
    x: np.ndarray,
    cfg: AttnConfig,
    rng: RngStream,
    valid_len: Optional[int] = None,
) -> BlockSample:
    """Draw ``cfg.samples`` distinct rows from every block.

    Block i uses the child stream ``rng.split(i)``, so each block's draw is
    independent of the others and of evaluation order. Indices inside a
    block are returned in ascending order. Padded rows (at or beyond
    ``valid_len``) are never drawn; a trailing block with fewer valid rows
    than ``k`` yields all of its valid rows.

    Args:
        x: (N, d) tensor, possibly padded.
        cfg: Supplies block size, sample count and sampling strategy.
        rng: Parent stream.
        valid_len: Number of real rows; defaults to N.

    Returns:
        BlockSample with block-major rows.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValidationError(f"expected an (N, d) matrix, got {x.shape}")
    b, k = cfg.block_size, cfg.samples
    n_valid = x.shape[0] if valid_len is None else int(valid_len)
    if not 0 < n_valid <= x.shape[0]:
        raise ValidationError(f"valid_len must lie in [1, {x.shape[0]}], got {valid_len}")

    n_b = n_blocks(n_valid, b)
    valid_rows = _block_valid_rows(n_valid, b, n_b)
    picked: List[np.ndarray] = []
    for i, rows in enumerate(valid_rows):
        take = min(k, int(rows))
        if cfg.sampling == "strided":
            local = np.floor((np.arange(take) + 0.5) * rows / take).astype(np.int64)
        else:
            gen = rng.split(i).generator()
            local = np.sort(gen.choice(int(rows), size=take, replace=False))
        picked.append(i * b + local)

    counts = np.array([len(p) for p in picked], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    indices = np.concatenate(picked)
    return BlockSample(tokens=x[indices], indices=indices, offsets=offsets, k=k)


def max_pooled_attn_map(
    qs: BlockSample,
    ks: BlockSample,
    cfg: AttnConfig,
    scale: Optional[float] = None,
    flops: Optional[FlopCounter] = None,
) -> ImportanceMap:
    """Streaming max-pooled attention map over sampled tokens.

    Entry (i, j) is the largest softmax probability, normalized over all
    sampled keys, that any sampled query of block i assigns to a sampled
    key of block j.

    Raises:
        ValidationError: If the samples disagree on ``k`` or block count.
    """
    if qs.k != ks.k:
        raise ValidationError(f"sample count mismatch: queries k={qs.k}, keys k={ks.k}")
    if qs.n_blocks != ks.n_blocks:
        raise ValidationError(f"block count mismatch: {qs.n_blocks} vs {ks.n_blocks}")
    if qs.tokens.shape[1] != ks.tokens.shape[1]:
        raise ValidationError("query and key samples have different widths")

    n_b = qs.n_blocks
    s = cfg.resolve_scale(qs.tokens.shape[1]) if scale is None else scale
    fc = flops if flops is not None else FlopCounter()
    q = qs.tokens.astype(np.float64)
    rows = q.shape[0]

    running_max = np.full(rows, -np.inf)
    running_sum = np.zeros(rows)
    block_max = np.full((rows, n_b), -np.inf)

    for j in range(n_b):
        kj = ks.block(j)
        cols = kj.shape[0]
        scores = matmul(q, kj.T, flops=fc, keep_precision=True) * s
        m_ij = scores.max(axis=1)
        l_ij = np.exp(scores - m_ij[:, None]).sum(axis=1)
        m_new = np.maximum(running_max, m_ij)
        running_sum = np.exp(running_max - m_new) * running_sum + np.exp(m_ij - m_new) * l_ij
        running_max = m_new
        block_max[:, j] = m_ij
        fc.add(
            mults=rows * cols + 2 * rows,
            adds=rows * (cols - 1) + rows * cols + rows * (cols - 1) + 4 * rows,
            exps=rows * cols + 2 * rows,
        )

    probs = np.exp(block_max - running_max[:, None]) / running_sum[:, None]
    values = np.maximum.reduceat(probs, qs.offsets[:-1], axis=0)
    fc.add(mults=rows * n_b, adds=rows * n_b + (rows - n_b) * n_b, exps=rows * n_b)

    return ImportanceMap(values=values.astype(np.float32), provenance=SPARSE_PROBE)


def dense_importance_map(
    q: np.ndarray,
    k_: np.ndarray,
    cfg: AttnConfig,
    flops: Optional[FlopCounter] = None,
) -> ImportanceMap:
    """Full softmax attention max-pooled into b x b blocks.

    Padding is implicit: only the N real keys enter the softmax and the
    trailing partial block pools over its real rows and columns.
    """
    q = np.asarray(q)
    k_ = np.asarray(k_)
    if q.ndim != 2 or k_.ndim != 2 or q.shape != k_.shape:
        raise ValidationError(f"q and k must be equal (N, d) matrices, got {q.shape}, {k_.shape}")
    n, d = q.shape
    b = cfg.block_size
    fc = flops if flops is not None else FlopCounter()

    logits = matmul(q, k_.T, flops=fc, keep_precision=True)
    p = row_softmax(logits, scale=cfg.resolve_scale(d), flops=fc, keep_precision=True)
    starts = np.arange(0, n, b)
    pooled = np.maximum.reduceat(np.maximum.reduceat(p, starts, axis=0), starts, axis=1)
    fc.add(adds=n * n)

    return ImportanceMap(values=pooled.astype(np.float32), provenance=FULL_ORACLE)


def two_pass_sampled_map(qs: BlockSample, ks: BlockSample, cfg: AttnConfig) -> np.ndarray:
    """Materialize the sampled score matrix, softmax it, then max-pool.

    Reference for ``max_pooled_attn_map``.
    """
    scale = cfg.resolve_scale(qs.tokens.shape[1])
    p = row_softmax(matmul(qs.tokens, ks.tokens.T, keep_precision=True), scale=scale, keep_precision=True)
    pooled = np.maximum.reduceat(p, qs.offsets[:-1], axis=0)
    return np.maximum.reduceat(pooled, ks.offsets[:-1], axis=1)


def compute_block_importance(
    q: np.ndarray,
    k: np.ndarray,
    cfg: AttnConfig,
    rng: RngStream,
    flops: Optional[FlopCounter] = None,
):
    """Pad, sample and probe.

    Queries are drawn from ``rng.split(0)`` and keys from ``rng.split(1)``.
    Multi-head inputs of shape (H, N, d) are probed head by head, head h
    using ``rng.split(h)`` as its parent stream.

    Returns:
        One ImportanceMap for (N, d) inputs, a list of maps for (H, N, d).
    """
    q = np.asarray(q)
    k = np.asarray(k)
    if q.shape != k.shape:
        raise ValidationError(f"q and k shapes differ: {q.shape} vs {k.shape}")
    if q.ndim == 3:
        logger.debug(f"Probing {q.shape[0]} heads", context={"b": cfg.block_size, "k": cfg.samples})
        return [
            compute_block_importance(q[h], k[h], cfg, rng.split(h), flops)
            for h in range(q.shape[0])
        ]
    if q.ndim != 2:
        raise ValidationError(f"expected (N, d) or (H, N, d) inputs, got {q.shape}")

    q_pad, valid = pad_to_block(q, cfg.block_size)
    k_pad, _ = pad_to_block(k, cfg.block_size)
    qs = block_sample(q_pad, cfg, rng.split(0), valid_len=valid)
    ks = block_sample(k_pad, cfg, rng.split(1), valid_len=valid)
    return max_pooled_attn_map(qs, ks, cfg, flops=flops)
