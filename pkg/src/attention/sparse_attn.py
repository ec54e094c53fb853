"""
Block-sparse attention executors and their dense oracles.

``sparse_attention`` runs an online softmax over the key blocks a BlockMask
keeps. ``sparse_attention_gt`` additionally attends, for every query, to
mean-pooled global tokens whose logits carry a ``+ln(n')`` bias, where n'
is the number of real keys in the pooling window. Both regions share one
softmax normalizer.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from src.attention.config import AttnConfig
from src.attention.maskgen import BlockMask, n_blocks_for
from src.tensor.core import (
    FlopCounter,
    ensure_finite,
    matmul,
    mean_pool_rows,
    pool_window_sizes,
    row_softmax,
)
from src.utils.errors import ValidationError
from src.utils.logger import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True, eq=False)
class AttnOutput:
    """Executor result.

    Attributes:
        out: (N, d_v) float32 output.
        flops: All FLOPs spent by the executor.
        product_flops: The share spent in the QK^T and PV products.
        effective_sparsity: 1 - processed block pairs / N_b^2.
    """

    out: np.ndarray
    flops: FlopCounter
    product_flops: int
    effective_sparsity: float


def _check_qkv(q, k, v) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    q, k, v = (np.asarray(a) for a in (q, k, v))
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValidationError(f"q, k, v must be matrices, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape != k.shape or v.shape[0] != k.shape[0]:
        raise ValidationError(f"incompatible q, k, v shapes: {q.shape}, {k.shape}, {v.shape}")
    if q.shape[0] == 0 or q.shape[1] == 0 or v.shape[1] == 0:
        raise ValidationError("q, k, v must be non-empty")
    return q, k, v


def _check_mask(mask: BlockMask, n: int, b: int) -> None:
    expected = n_blocks_for(n, b)
    if mask.n_b != expected:
        raise ValidationError(f"mask has {mask.n_b} blocks, N={n} with b={b} needs {expected}")
    if mask.kept_per_row.min() < 1:
        raise ValidationError("mask has a query block with no kept key blocks")


class _OnlineSoftmax:
    """Running max / sum / weighted-value accumulator for one query block."""

    def __init__(self, rows: int, dv: int, flops: FlopCounter):
        self.m = np.full(rows, -np.inf)
        self.l = np.zeros(rows)
        self.acc = np.zeros((rows, dv))
        self.flops = flops
        self.product_flops = 0

    def update(self, q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float, bias=None):
        rows, d = q.shape
        cols, dv = v.shape
        s = q @ k.T * scale
        if bias is not None:
            s = s + bias
        m_new = np.maximum(self.m, s.max(axis=1))
        corr = np.exp(self.m - m_new)
        p = np.exp(s - m_new[:, None])
        self.l = self.l * corr + p.sum(axis=1)
        self.acc = self.acc * corr[:, None] + p @ v
        self.m = m_new

        qk = rows * cols * d + rows * cols * (d - 1)
        pv = rows * cols * dv + rows * cols * dv
        self.product_flops += qk + pv
        self.flops.add(
            mults=rows * cols * d + rows * cols + rows * cols * dv + rows * dv + rows,
            adds=(rows * cols * (d - 1) + rows * cols * dv + rows * (cols - 1) + rows
                  + rows * cols + rows * (cols - 1) + rows + rows * dv
                  + (rows * cols if bias is not None else 0)),
            exps=rows * cols + rows,
        )

    def finish(self) -> np.ndarray:
        rows, dv = self.acc.shape
        self.flops.add(mults=rows * dv)
        return self.acc / self.l[:, None]


def _run_blocks(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    mask: BlockMask,
    cfg: AttnConfig,
    flops: FlopCounter,
    global_kv: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None,
) -> Tuple[np.ndarray, int, int]:
    n, d = q.shape
    b = cfg.block_size
    scale = cfg.resolve_scale(d)
    q64, k64, v64 = (a.astype(np.float64) for a in (q, k, v))
    out = np.empty((n, v.shape[1]))
    product_flops = 0
    processed = 0

    for i in range(mask.n_b):
        q_blk = q64[i * b:(i + 1) * b]
        state = _OnlineSoftmax(q_blk.shape[0], v.shape[1], flops)
        if global_kv is not None:
            k_pool, v_pool, bias = global_kv
            state.update(q_blk, k_pool, v_pool, scale, bias=bias)
        for j in np.flatnonzero(mask.bits[i]):
            state.update(q_blk, k64[j * b:(j + 1) * b], v64[j * b:(j + 1) * b], scale)
            processed += 1
        out[i * b:(i + 1) * b] = state.finish()
        product_flops += state.product_flops

    return out, product_flops, processed


def dense_attention(q, k, v, cfg: AttnConfig, flops: Optional[FlopCounter] = None) -> AttnOutput:
    """Plain softmax(QK^T * scale) V."""
    q, k, v = _check_qkv(q, k, v)
    fc = flops if flops is not None else FlopCounter()
    n, d = q.shape
    logits = matmul(q, k.T, flops=fc, keep_precision=True)
    p = row_softmax(logits, scale=cfg.resolve_scale(d), flops=fc, keep_precision=True)
    out = matmul(p, v, flops=fc)
    product = n * n * d + n * n * (d - 1) + n * n * v.shape[1] + n * (n - 1) * v.shape[1]
    return AttnOutput(out=out, flops=fc, product_flops=product, effective_sparsity=0.0)


def sparse_attention(
    q, k, v,
    mask: BlockMask,
    cfg: AttnConfig,
    flops: Optional[FlopCounter] = None,
) -> AttnOutput:
    """Attention restricted to the key blocks kept by ``mask``.

    Raises:
        ValidationError: On shape mismatches or a query block with no kept keys.
    """
    q, k, v = _check_qkv(q, k, v)
    _check_mask(mask, q.shape[0], cfg.block_size)
    fc = flops if flops is not None else FlopCounter()

    out, product, processed = _run_blocks(q, k, v, mask, cfg, fc)
    ensure_finite(out, "sparse attention output")
    return AttnOutput(
        out=out.astype(np.float32),
        flops=fc,
        product_flops=product,
        effective_sparsity=1.0 - processed / float(mask.n_b ** 2),
    )


def dense_masked_oracle(q, k, v, mask: BlockMask, cfg: AttnConfig) -> np.ndarray:
    """Full logits, masked blocks set to -inf, then softmax and PV."""
    q, k, v = _check_qkv(q, k, v)
    n, d = q.shape
    _check_mask(mask, n, cfg.block_size)
    logits = matmul(q, k.T, keep_precision=True)
    logits[~mask.token_mask(n, cfg.block_size)] = -np.inf
    p = row_softmax(logits, scale=cfg.resolve_scale(d), keep_precision=True)
    return matmul(p, v)


def global_tokens(
    k: np.ndarray,
    v: np.ndarray,
    n: int,
    bias: bool = True,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean-pooled keys and values plus the per-token ``ln(n')`` logit bias.

    With ``bias=False`` the bias is all zeros.
    """
    k_pool = mean_pool_rows(k, n, keep_precision=True)
    v_pool = mean_pool_rows(v, n, keep_precision=True)
    if not bias:
        return k_pool, v_pool, np.zeros(k_pool.shape[0])
    return k_pool, v_pool, np.log(pool_window_sizes(k.shape[0], n).astype(np.float64))


def sparse_attention_gt(
    q, k, v,
    mask: BlockMask,
    cfg: AttnConfig,
    flops: Optional[FlopCounter] = None,
) -> AttnOutput:
    """Block-sparse attention plus always-visible global tokens.

    With ``cfg.pool_n == 0`` this is ``sparse_attention``.
    """
    if cfg.pool_n == 0:
        logger.debug("pool_n is 0, running plain block-sparse attention")
        return sparse_attention(q, k, v, mask, cfg, flops)

    q, k, v = _check_qkv(q, k, v)
    _check_mask(mask, q.shape[0], cfg.block_size)
    fc = flops if flops is not None else FlopCounter()
    n_rows = q.shape[0]
    pooled = global_tokens(k, v, cfg.pool_n, cfg.global_bias)
    fc.add(adds=2 * n_rows * k.shape[1], mults=2 * pooled[0].size)

    out, product, processed = _run_blocks(q, k, v, mask, cfg, fc, global_kv=pooled)
    ensure_finite(out, "global-token attention output")
    return AttnOutput(
        out=out.astype(np.float32),
        flops=fc,
        product_flops=product,
        effective_sparsity=1.0 - processed / float(mask.n_b ** 2),
    )


def dense_augmented_oracle(q, k, v, mask: BlockMask, cfg: AttnConfig) -> np.ndarray:
    """Dense attention over concat(K, pooled K) and concat(V, pooled V).

    The original region is masked with ``mask``; the pooled region is always
    visible and carries the ``ln(n')`` bias unless ``cfg.global_bias`` is off.
    """
    if cfg.pool_n < 1:
        raise ValidationError("the augmented oracle needs pool_n >= 1")
    q, k, v = _check_qkv(q, k, v)
    n, d = q.shape
    _check_mask(mask, n, cfg.block_size)
    k_pool, v_pool, bias = global_tokens(k, v, cfg.pool_n, cfg.global_bias)
    scale = cfg.resolve_scale(d)

    k_aug = np.concatenate([k.astype(np.float64), k_pool], axis=0)
    v_aug = np.concatenate([v.astype(np.float64), v_pool], axis=0)
    logits = matmul(q, k_aug.T, keep_precision=True) * scale
    logits[:, :n][~mask.token_mask(n, cfg.block_size)] = -np.inf
    logits[:, n:] += bias
    p = row_softmax(logits, keep_precision=True)
    return matmul(p, v_aug)


@dataclass(frozen=True)
class BiasCompensation:
    n: int
    logit: float
    biased_log_weight: float
    constituent_log_weight: float
    relative_error: float
    passed: bool


def bias_compensation_check(n: int, logit: float = 0.0, tolerance: float = 1e-6) -> BiasCompensation:
    """Compare ``exp(logit + ln n)`` against ``n * exp(logit)``.

    One pooled token over n identical keys should carry the same unnormalized
    weight as the n keys together. Both weights are kept in log space so
    large logits do not overflow.
    """
    if n < 1:
        raise ValidationError(f"window must be >= 1, got {n}")
    biased = float(logit + np.log(n))
    constituents = float(logsumexp(np.full(n, logit, dtype=np.float64)))
    rel = abs(float(np.expm1(biased - constituents)))
    return BiasCompensation(
        n=n,
        logit=logit,
        biased_log_weight=biased,
        constituent_log_weight=constituents,
        relative_error=rel,
        passed=rel <= tolerance,
    )
