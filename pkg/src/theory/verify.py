"""
Statistical checks behind the sampled prober.

Rank conventions: rank 1 is the largest value of a population of n
continuous values. Drawing k of the n values uniformly without replacement
and keeping the largest one is simulated on ranks directly: draw k distinct
ranks and return the smallest.
"""

import concurrent.futures
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy import stats
from scipy.special import gammaln, logsumexp

from src.attention.config import AttnConfig
from src.attention.maskgen import mask_overlap, mean_row_overlap, threshold_mask
from src.attention.prober import (
    block_sample,
    compute_block_importance,
    dense_importance_map,
    pad_to_block,
)
from src.config.settings import CONFIDENCE_LEVELS, MAX_WORKERS, RANK_LAW_CHUNK
from src.tensor.core import RngStream, matmul, row_softmax
from src.utils.errors import ValidationError
from src.utils.logger import get_logger

logger = get_logger(__name__)


def _check_nk(n: int, k: int) -> None:
    if n < 1 or k < 1:
        raise ValidationError(f"n and k must be >= 1, got n={n}, k={k}")
    if k > n:
        raise ValidationError(f"cannot draw k={k} distinct items from n={n}")


def analytic_mean_rank(n: int, k: int) -> float:
    return (n + 1) / (k + 1)


def analytic_var_rank(n: int, k: int) -> float:
    return k * (n - k) * (n + 1) / ((k + 1) ** 2 * (k + 2))


def _draw_min_rank(gen: np.random.Generator, n: int, k: int) -> int:
    return int(gen.choice(n, size=k, replace=False, shuffle=False).min()) + 1


def sample_max_rank_trial(n: int, k: int, rng: RngStream) -> int:
    """Rank of the sample maximum in one draw of k out of n."""
    _check_nk(n, k)
    return _draw_min_rank(rng.generator(), n, k)


def _rank_chunk(n: int, k: int, trials: int, rng: RngStream) -> np.ndarray:
    gen = rng.generator()
    return np.fromiter((_draw_min_rank(gen, n, k) for _ in range(trials)), dtype=np.int64, count=trials)


def simulate_min_ranks(
    n: int,
    k: int,
    trials: int,
    rng: RngStream,
    workers: int = MAX_WORKERS,
    chunk: int = RANK_LAW_CHUNK,
) -> np.ndarray:
    """Ranks of the sample maximum over ``trials`` independent draws.

    Trials are split into chunks; chunk c uses ``rng.split(c)``, so the
    result does not depend on ``workers``.
    """
    _check_nk(n, k)
    if trials < 1:
        raise ValidationError(f"trials must be >= 1, got {trials}")
    sizes = [min(chunk, trials - start) for start in range(0, trials, chunk)]
    parts: List[Optional[np.ndarray]] = [None] * len(sizes)

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = {
            executor.submit(_rank_chunk, n, k, size, rng.split(c)): c
            for c, size in enumerate(sizes)
        }
        for future in concurrent.futures.as_completed(futures):
            parts[futures[future]] = future.result()

    return np.concatenate(parts)


@dataclass
class RankLawReport:
    n: int
    k: int
    trials: int
    empirical_mean_rank: float
    empirical_var_rank: float
    analytic_mean: float
    analytic_var: float

    def __post_init__(self):
        if self.trials < 1:
            raise ValidationError("a rank-law report needs at least one trial")
        if not (np.isfinite(self.empirical_mean_rank) and np.isfinite(self.empirical_var_rank)):
            raise ValidationError("rank-law statistics must be finite")

    @classmethod
    def from_ranks(cls, n: int, k: int, ranks: np.ndarray) -> "RankLawReport":
        ranks = np.asarray(ranks, dtype=np.float64)
        return cls(
            n=n,
            k=k,
            trials=int(ranks.size),
            empirical_mean_rank=float(ranks.mean()),
            empirical_var_rank=float(ranks.var()),
            analytic_mean=analytic_mean_rank(n, k),
            analytic_var=analytic_var_rank(n, k),
        )

    @property
    def mean_rel_error(self) -> float:
        return abs(self.empirical_mean_rank - self.analytic_mean) / self.analytic_mean

    @property
    def var_rel_error(self) -> float:
        if self.analytic_var == 0.0:
            return 0.0 if self.empirical_var_rank == 0.0 else float("inf")
        return abs(self.empirical_var_rank - self.analytic_var) / self.analytic_var

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["mean_rel_error"] = self.mean_rel_error
        data["var_rel_error"] = self.var_rel_error
        data["analytic_std"] = float(np.sqrt(self.analytic_var))
        return data


def rank_law_report(
    n: int,
    k: int,
    trials: int,
    rng: RngStream,
    workers: int = MAX_WORKERS,
) -> RankLawReport:
    """Monte Carlo mean and variance of the sample-maximum rank against
    ``(n+1)/(k+1)`` and ``k(n-k)(n+1)/((k+1)^2 (k+2))``."""
    ranks = simulate_min_ranks(n, k, trials, rng, workers)
    report = RankLawReport.from_ranks(n, k, ranks)
    logger.info(
        f"Rank law: mean {report.empirical_mean_rank:.3f} vs {report.analytic_mean:.3f}, "
        f"var {report.empirical_var_rank:.1f} vs {report.analytic_var:.1f}",
        context={"n": n, "k": k, "trials": trials},
    )
    return report


def exact_rank_distribution(n: int, k: int) -> np.ndarray:
    """P(rank = r) for r = 1..n-k+1, from P(rank >= r) = C(n-r+1, k) / C(n, k)."""
    _check_nk(n, k)
    r = np.arange(1, n - k + 2)
    log_choose = gammaln(n - r + 2) - gammaln(k + 1) - gammaln(n - r - k + 2)
    log_total = gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)
    survival = np.exp(log_choose - log_total)
    pmf = survival - np.append(survival[1:], 0.0)
    return np.clip(pmf, 0.0, None)


@dataclass
class ConfidenceBound:
    level: float
    empirical_bound: float
    normal_bound: float
    exact_bound: float
    empirical_percentile: float
    normal_percentile: float
    exact_percentile: float


@dataclass
class ConfidenceTable:
    n: int
    k: int
    trials: int
    expected_rank: float
    expected_percentile: float
    bounds: List[ConfidenceBound] = field(default_factory=list)

    def bound(self, level: float) -> ConfidenceBound:
        for b in self.bounds:
            if abs(b.level - level) < 1e-9:
                return b
        raise ValidationError(f"no bound at level {level}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def confidence_table_from_ranks(
    n: int,
    k: int,
    ranks: np.ndarray,
    levels: Sequence[float] = CONFIDENCE_LEVELS,
) -> ConfidenceTable:
    """Upper rank bounds at each confidence level.

    Three estimates are reported side by side: the empirical quantile of
    ``ranks``, the normal approximation ``mean + z * sigma`` with the
    two-sided z of the level, and the quantile of the exact distribution.
    The percentile captured by a bound r is ``1 - r / n``.
    """
    ranks = np.asarray(ranks)
    mean = analytic_mean_rank(n, k)
    sigma = float(np.sqrt(analytic_var_rank(n, k)))
    cdf = np.cumsum(exact_rank_distribution(n, k))

    bounds = []
    for level in levels:
        if not 0.0 < level < 1.0:
            raise ValidationError(f"confidence level must lie in (0, 1), got {level}")
        empirical = float(np.quantile(ranks, level, method="inverted_cdf"))
        normal = mean + float(stats.norm.ppf(0.5 + level / 2.0)) * sigma
        exact = float(min(np.searchsorted(cdf, level - 1e-12, side="left") + 1, cdf.size))
        bounds.append(ConfidenceBound(
            level=level,
            empirical_bound=empirical,
            normal_bound=normal,
            exact_bound=exact,
            empirical_percentile=1.0 - empirical / n,
            normal_percentile=1.0 - normal / n,
            exact_percentile=1.0 - exact / n,
        ))

    return ConfidenceTable(
        n=n,
        k=k,
        trials=int(ranks.size),
        expected_rank=mean,
        expected_percentile=1.0 - mean / n,
        bounds=bounds,
    )


def confidence_percentiles(
    n: int,
    k: int,
    trials: int,
    rng: RngStream,
    levels: Sequence[float] = CONFIDENCE_LEVELS,
    workers: int = MAX_WORKERS,
) -> ConfidenceTable:
    ranks = simulate_min_ranks(n, k, trials, rng, workers)
    return confidence_table_from_ranks(n, k, ranks, levels)


@dataclass
class ProportionalityReport:
    """Sampled-probe vs full-attention importance, side by side.

    ``ratio_*`` describe P_sparse / P_full over entries where P_full > 0,
    against ``nominal_factor = b / k``. ``row_sum_ratio_*`` describe, per
    sampled query, the softmax denominator over sampled keys divided by the
    one over all keys, against ``k / b``.
    """

    nominal_factor: float
    ratio_mean: float
    ratio_min: float
    ratio_max: float
    nominal_row_sum_ratio: float
    row_sum_ratio_mean: float
    row_sum_ratio_min: float
    row_sum_ratio_max: float
    normalized_max_abs_diff: float
    normalized_mean_abs_diff: float
    mask_overlap: float
    mask_row_overlap: float
    masks_identical: bool

    @property
    def ratio_max_abs_dev(self) -> float:
        return max(abs(self.ratio_max - self.nominal_factor), abs(self.ratio_min - self.nominal_factor))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["ratio_max_abs_dev"] = self.ratio_max_abs_dev
        return data


def _row_normalize(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    totals = m.sum(axis=1, keepdims=True)
    return np.divide(m, totals, out=np.zeros_like(m), where=totals > 0)


def proportionality_check(q, k_, cfg: AttnConfig, rng: RngStream) -> ProportionalityReport:
    """Compare the sampled importance map with the full one.

    The sampled map is drawn exactly as ``compute_block_importance`` draws it
    from ``rng``, so the row-sum diagnostic sees the same sampled tokens.
    """
    q = np.asarray(q, dtype=np.float32)
    k_ = np.asarray(k_, dtype=np.float32)
    full = dense_importance_map(q, k_, cfg)
    sparse = compute_block_importance(q, k_, cfg, rng)

    nominal = cfg.block_size / cfg.samples
    f64 = full.values.astype(np.float64)
    s64 = sparse.values.astype(np.float64)
    positive = f64 > 0
    ratios = s64[positive] / f64[positive] if np.any(positive) else np.array([np.nan])

    scale = cfg.resolve_scale(q.shape[1])
    q_pad, valid = pad_to_block(q, cfg.block_size)
    k_pad, _ = pad_to_block(k_, cfg.block_size)
    qs = block_sample(q_pad, cfg, rng.split(0), valid_len=valid)
    ks = block_sample(k_pad, cfg, rng.split(1), valid_len=valid)
    sampled_q = qs.tokens.astype(np.float64)
    log_sparse = logsumexp(sampled_q @ ks.tokens.astype(np.float64).T * scale, axis=1)
    log_full = logsumexp(sampled_q @ k_.astype(np.float64).T * scale, axis=1)
    row_ratio = np.exp(log_sparse - log_full)

    diff = np.abs(_row_normalize(s64) - _row_normalize(f64))
    full_mask = threshold_mask(full, cfg)
    sparse_mask = threshold_mask(sparse, cfg)

    report = ProportionalityReport(
        nominal_factor=nominal,
        ratio_mean=float(np.mean(ratios)),
        ratio_min=float(np.min(ratios)),
        ratio_max=float(np.max(ratios)),
        nominal_row_sum_ratio=1.0 / nominal,
        row_sum_ratio_mean=float(row_ratio.mean()),
        row_sum_ratio_min=float(row_ratio.min()),
        row_sum_ratio_max=float(row_ratio.max()),
        normalized_max_abs_diff=float(diff.max()),
        normalized_mean_abs_diff=float(diff.mean()),
        mask_overlap=mask_overlap(full_mask, sparse_mask),
        mask_row_overlap=mean_row_overlap(full_mask, sparse_mask),
        masks_identical=bool(np.array_equal(full_mask.bits, sparse_mask.bits)),
    )
    logger.debug(
        f"Proportionality: ratio mean {report.ratio_mean:.4f} (nominal {nominal:.4f}), "
        f"mask overlap {report.mask_overlap:.4f}",
        context={"b": cfg.block_size, "k": cfg.samples},
    )
    return report


def high_quantile_diagnostic(block) -> float:
    """``(max - p99) / max`` of a block's attention probabilities.

    Zero for a constant block, close to one when a single entry dominates.
    """
    values = np.asarray(block, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValidationError("high_quantile_diagnostic needs a non-empty block")
    top = float(values.max())
    if top == 0.0:
        return 0.0
    return (top - float(np.percentile(values, 99))) / top


def block_quantile_gaps(p: np.ndarray, b: int) -> np.ndarray:
    """``high_quantile_diagnostic`` for every b x b block of a probability matrix."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ValidationError(f"expected a matrix, got {p.shape}")
    rows = range(0, p.shape[0], b)
    cols = range(0, p.shape[1], b)
    return np.array([[high_quantile_diagnostic(p[i:i + b, j:j + b]) for j in cols] for i in rows])


def verify_theory(
    n: int,
    k: int,
    trials: int,
    rng: RngStream,
    workers: int = MAX_WORKERS,
) -> Dict[str, Any]:
    """Rank law, confidence table and three proportionality cases as one document.

    The proportionality cases are: constant logits with b=128, k=16 (exact
    factor 8); exhaustive sampling k=b; and Gaussian random logits.
    """
    ranks = simulate_min_ranks(n, k, trials, rng.split(0), workers)
    law = RankLawReport.from_ranks(n, k, ranks)
    table = confidence_table_from_ranks(n, k, ranks)

    gen = rng.split(1).generator()
    uniform_q = np.ones((512, 16), dtype=np.float32)
    uniform_cfg = AttnConfig(block_size=128, samples=16)
    exhaustive_cfg = AttnConfig(block_size=32, samples=32)
    random_cfg = AttnConfig(block_size=32, samples=8)
    rq = gen.standard_normal((256, 32)).astype(np.float32)
    rk = gen.standard_normal((256, 32)).astype(np.float32)

    cases = {
        "uniform_logits": proportionality_check(uniform_q, uniform_q, uniform_cfg, rng.split(2)),
        "exhaustive": proportionality_check(rq, rk, exhaustive_cfg, rng.split(3)),
        "random": proportionality_check(rq, rk, random_cfg, rng.split(4)),
    }
    probs = row_softmax(matmul(rq, rk.T, keep_precision=True), scale=random_cfg.resolve_scale(32), keep_precision=True)
    gaps = block_quantile_gaps(probs, random_cfg.block_size)

    return {
        "rank_law": law.to_dict(),
        "confidence": table.to_dict(),
        "proportionality": {name: r.to_dict() for name, r in cases.items()},
        "high_quantile_gap": {"mean": float(gaps.mean()), "max": float(gaps.max())},
    }
