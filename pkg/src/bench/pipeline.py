"""
End-to-end runs: gilbert reorder, probe, mask, attend, undo reorder.

Every variant is scored against dense attention on the original token order.
PSNR and SSIM are computed on the output reshaped to the token grid (SSIM
per frame and channel, then averaged); they stand in for video metrics.
"""

import concurrent.futures
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from src.attention.config import AttnConfig
from src.attention.gilbert import apply_permutation, gilbert_order, undo_permutation
from src.attention.maskgen import (
    BlockMask,
    mask_overlap,
    n_blocks_for,
    static_window_for_sparsity,
    target_sparsity_mask,
    threshold_mask,
)
from src.attention.prober import compute_block_importance, dense_importance_map
from src.attention.sparse_attn import dense_attention, sparse_attention, sparse_attention_gt
from src.bench.workload import WorkloadSpec, generate_workload
from src.config.settings import MAX_WORKERS, PIPELINE_VARIANTS, SWEEP_COLUMNS
from src.tensor.core import FlopCounter, RngStream
from src.tensor.metrics import psnr, relative_error, ssim
from src.utils.errors import AsaBladeError, ValidationError
from src.utils.logger import get_logger

logger = get_logger(__name__)


@dataclass
class RunReport:
    """Quality and cost of one variant on one workload.

    ``flops_ratio`` compares the QK^T and PV product FLOPs with dense
    attention; probe FLOPs are reported separately.
    """

    variant: str
    tau: float
    seed: int
    sparsity: float
    rel_error: float
    psnr: float
    ssim: float
    flops_dense: int
    flops_sparse: int
    flops_probe: int
    flops_ratio: float
    overlap: float
    config: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.rel_error < 0 or not 0.0 <= self.sparsity <= 1.0:
            raise ValidationError(
                f"inconsistent report for {self.variant}: rel_error {self.rel_error}, sparsity {self.sparsity}"
            )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def row(self) -> Dict[str, Any]:
        return {column: getattr(self, column) for column in SWEEP_COLUMNS}


def _check_variants(variants: Sequence[str]) -> List[str]:
    variants = list(variants)
    if not variants:
        raise ValidationError("at least one variant is required")
    unknown = [v for v in variants if v not in PIPELINE_VARIANTS]
    if unknown:
        raise ValidationError(f"unknown variants {unknown}, expected a subset of {PIPELINE_VARIANTS}")
    return variants


def grid_ssim(out: np.ndarray, ref: np.ndarray, spec: WorkloadSpec, peak: float) -> float:
    """Mean SSIM over frames and channels of outputs laid out as (t, h, w, d)."""
    shape = (spec.t, spec.h, spec.w, out.shape[1])
    a = np.asarray(out, dtype=np.float64).reshape(shape)
    b = np.asarray(ref, dtype=np.float64).reshape(shape)
    scores = [ssim(a[f, :, :, c], b[f, :, :, c], peak) for f in range(spec.t) for c in range(shape[3])]
    return float(np.mean(scores))


def _score(
    variant: str,
    out: np.ndarray,
    ref: np.ndarray,
    mask: BlockMask,
    oracle: BlockMask,
    product: int,
    dense_product: int,
    flops: FlopCounter,
    dense_flops: FlopCounter,
    probe_flops: int,
    spec: WorkloadSpec,
    cfg: AttnConfig,
) -> RunReport:
    peak = float(ref.max() - ref.min()) or 1.0
    return RunReport(
        variant=variant,
        tau=float(mask.tau) if mask.tau is not None else float(cfg.tau),
        seed=spec.seed,
        sparsity=mask.sparsity,
        rel_error=relative_error(out, ref),
        psnr=psnr(out, ref, peak),
        ssim=grid_ssim(out, ref, spec, peak),
        flops_dense=dense_flops.total,
        flops_sparse=flops.total,
        flops_probe=probe_flops,
        flops_ratio=product / float(dense_product),
        overlap=mask_overlap(mask, oracle),
        config={**cfg.to_dict(), **spec.to_dict()},
    )


def run_pipeline(
    spec: WorkloadSpec,
    cfg: AttnConfig,
    variants: Sequence[str] = PIPELINE_VARIANTS,
    rng: Optional[RngStream] = None,
) -> List[RunReport]:
    """Run the requested variants on one workload.

    The workload comes from ``rng.split(0)`` and the probe from
    ``rng.split(1)``, ``rng`` defaulting to ``RngStream(spec.seed)``.

    With ``cfg.target_sparsity`` set, the static window is chosen nearest
    the target and ASA is driven to at least the window's sparsity; without
    it ASA uses ``cfg.tau`` and the window matches ASA's sparsity.

    Raises:
        ValidationError: On unknown variants; submodule errors are re-raised
            with the failing variant named.
    """
    variants = _check_variants(variants)
    rng = RngStream(spec.seed) if rng is None else rng
    q, k, v = generate_workload(spec, rng.split(0))
    n = q.shape[0]
    n_b = n_blocks_for(n, cfg.block_size)

    perm = gilbert_order(spec.grid, cfg.gilbert_mode)
    qp, kp, vp = (apply_permutation(a, perm) for a in (q, k, v))

    dense_fc = FlopCounter()
    dense = dense_attention(q, k, v, cfg, dense_fc)
    ref = dense.out.astype(np.float64)

    probe_fc = FlopCounter()
    pimp = compute_block_importance(qp, kp, cfg, rng.split(1), flops=probe_fc)
    oracle_map = dense_importance_map(qp, kp, cfg)

    static: Optional[BlockMask] = None
    if cfg.target_sparsity is not None:
        static = static_window_for_sparsity(n_b, cfg.target_sparsity)
        asa_mask = target_sparsity_mask(pimp, cfg, static.sparsity)
    else:
        asa_mask = threshold_mask(pimp, cfg)
        static = static_window_for_sparsity(n_b, asa_mask.sparsity)
    logger.debug(
        f"Static band sparsity {static.sparsity:.4f}, ASA sparsity {asa_mask.sparsity:.4f}",
        context={"seed": spec.seed, "gap": abs(static.sparsity - asa_mask.sparsity)},
    )
    oracle = threshold_mask(oracle_map, cfg.with_overrides(tau=asa_mask.tau))

    reports = []
    for variant in variants:
        try:
            fc = FlopCounter()
            if variant == "dense":
                full = BlockMask.full(n_b)
                reports.append(_score(variant, ref, ref, full, oracle, dense.product_flops,
                                      dense.product_flops, dense_fc, dense_fc, 0, spec, cfg))
                continue
            if variant == "static_window":
                mask, result = static, sparse_attention(qp, kp, vp, static, cfg, fc)
                probe = 0
            elif variant == "asa":
                mask, result = asa_mask, sparse_attention(qp, kp, vp, asa_mask, cfg, fc)
                probe = probe_fc.total
            else:
                gt_cfg = cfg.with_overrides(global_bias=variant == "asa_gt")
                mask, result = asa_mask, sparse_attention_gt(qp, kp, vp, asa_mask, gt_cfg, fc)
                probe = probe_fc.total
            out = undo_permutation(result.out, perm).astype(np.float64)
            reports.append(_score(variant, out, ref, mask, oracle, result.product_flops,
                                  dense.product_flops, fc, dense_fc, probe, spec, cfg))
        except AsaBladeError as e:
            logger.error(f"Variant {variant} failed: {e}", context={"seed": spec.seed})
            raise type(e)(f"[{variant}] {e}") from e

    for r in reports:
        logger.debug(
            f"{r.variant}: sparsity {r.sparsity:.3f}, rel_error {r.rel_error:.4g}",
            context={"seed": spec.seed, "tau": r.tau},
        )
    return reports


def _aggregate(reports: List[RunReport]) -> Dict[str, Dict[str, float]]:
    frame = pd.DataFrame([r.to_dict() for r in reports]).drop(columns=["config"])
    frame = frame.replace([np.inf, -np.inf], np.nan)
    metrics = ["sparsity", "rel_error", "psnr", "ssim", "flops_ratio", "overlap"]
    summary: Dict[str, Dict[str, float]] = {}
    for variant, group in frame.groupby("variant", sort=False):
        summary[variant] = {"runs": int(len(group))}
        for metric in metrics:
            values = group[metric].dropna()
            summary[variant][f"{metric}_mean"] = float(values.mean()) if len(values) else math.inf
            summary[variant][f"{metric}_std"] = float(values.std(ddof=0)) if len(values) else 0.0
    return summary


def bench(
    spec: WorkloadSpec,
    cfg: AttnConfig,
    variants: Sequence[str] = PIPELINE_VARIANTS,
    seeds: int = 20,
    workers: int = MAX_WORKERS,
) -> Dict[str, Any]:
    """Run the pipeline for ``seeds`` consecutive workload seeds and aggregate.

    Seeds run concurrently and are reduced in seed order. PSNR means skip
    infinite values (exact variants).
    """
    variants = _check_variants(variants)
    if seeds < 1:
        raise ValidationError(f"seeds must be >= 1, got {seeds}")
    specs = [spec.with_seed(spec.seed + s) for s in range(seeds)]
    results: Dict[int, List[RunReport]] = {}

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = {executor.submit(run_pipeline, s, cfg, variants): i for i, s in enumerate(specs)}
        for future in concurrent.futures.as_completed(futures):
            results[futures[future]] = future.result()

    reports = [r for i in range(seeds) for r in results[i]]
    summary = _aggregate(reports)
    logger.info(f"Bench finished over {seeds} seed(s)", context={"variants": variants})
    return {
        "workload": spec.to_dict(),
        "config": cfg.to_dict(),
        "seeds": seeds,
        "summary": summary,
        "runs": [r.to_dict() for r in reports],
    }


def sweep(
    spec: WorkloadSpec,
    cfg: AttnConfig,
    taus: Sequence[float],
    variants: Sequence[str] = ("asa", "static_window"),
    out: Optional[str] = None,
    workers: int = MAX_WORKERS,
) -> pd.DataFrame:
    """One row per (tau, variant), columns ``SWEEP_COLUMNS``.

    Points run concurrently; rows are ordered by tau as given, then variant.
    The CSV is written once, after all points finish.

    Raises:
        ValidationError: On an empty tau or variant list.
        OSError: If ``out`` cannot be written.
    """
    variants = _check_variants(variants)
    taus = [float(t) for t in taus]
    if not taus:
        raise ValidationError("at least one tau is required")
    base = replace(cfg, target_sparsity=None)
    rows: Dict[int, List[RunReport]] = {}

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = {
            executor.submit(run_pipeline, spec, base.with_overrides(tau=tau), variants): i
            for i, tau in enumerate(taus)
        }
        for future in concurrent.futures.as_completed(futures):
            i = futures[future]
            rows[i] = future.result()
            for r in rows[i]:
                r.tau = taus[i]

    frame = pd.DataFrame([r.row() for i in range(len(taus)) for r in rows[i]], columns=SWEEP_COLUMNS)
    if out:
        frame.to_csv(out, index=False)
        logger.info(f"Sweep written to {out}", context={"rows": len(frame)})
    return frame
