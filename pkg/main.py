import os
import sys
import json
import time
import argparse
from typing import Any, Callable, Dict, List, Optional

import numpy as np
from dotenv import load_dotenv

# Load environment variables before importing other modules
load_dotenv()

from src.config.settings import (
    DEFAULT_SEED,
    MAX_WORKERS,
    OUTPUT_DIRECTORY,
    PIPELINE_VARIANTS,
    RANK_LAW_K,
    RANK_LAW_N,
    RANK_LAW_TRIALS,
    TDM_ITERS,
    TDM_STAGES,
)
from src.config.run_config import load_run_config
from src.utils.errors import NumericalDivergenceError, ValidationError
from src.utils.logger import get_logger, info, error, set_level
from src.utils.report import print_summary_report
from src.attention.config import AttnConfig
from src.attention.gilbert import (
    TokenGrid,
    count_seam_jumps,
    gilbert_order,
    mean_intra_block_distance,
)
from src.attention.maskgen import BlockMask, target_sparsity_mask, threshold_mask
from src.attention.prober import compute_block_importance, dense_importance_map
from src.attention.sparse_attn import (
    dense_augmented_oracle,
    dense_masked_oracle,
    sparse_attention,
    sparse_attention_gt,
)
from src.bench.pipeline import bench, sweep
from src.bench.workload import WorkloadSpec
from src.distill.scores import parse_teacher
from src.distill.tdm import DistillConfig, distill
from src.tensor.btf import read_btf, write_btf, write_matrix_csv, write_permutation_csv
from src.tensor.core import FlopCounter, RngStream
from src.tensor.metrics import psnr, relative_error, ssim
from src.theory.verify import verify_theory

# Get a logger instance for this module
logger = get_logger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_DIVERGENCE = 2


def output_path(args: argparse.Namespace, default_name: str) -> str:
    """Resolve ``--out`` against ``--out-dir`` and create the parent directory.

    Args:
        args: Parsed arguments.
        default_name: File name used when ``--out`` is omitted.

    Returns:
        Path to write to.
    """
    path = args.out or default_name
    if not os.path.isabs(path) and os.path.dirname(path) == "":
        path = os.path.join(args.out_dir, path)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    return path


def write_json(path: str, payload: Dict[str, Any]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, default=str)


def attn_config(run_config: Dict[str, Any], **flags: Any) -> AttnConfig:
    """Explicit flags override the JSON config, which overrides the environment defaults.

    A block size given without a sample count caps the inherited sample count.
    """
    data = AttnConfig.from_dict(run_config).to_dict()
    data.update({key: value for key, value in flags.items() if value is not None})
    if flags.get("samples") is None:
        data["samples"] = min(data["samples"], data["block_size"])
    return AttnConfig(**data)


def workload_spec(run_config: Dict[str, Any], seed: int) -> WorkloadSpec:
    data = dict(run_config)
    data.setdefault("seed", seed)
    return WorkloadSpec.from_dict(data)


def cmd_gilbert(args: argparse.Namespace, run_config: Dict[str, Any]) -> Dict[str, Dict[str, Any]]:
    grid = TokenGrid(args.t, args.h, args.w)
    mode = args.mode or run_config.get("gilbert_mode", "3d")
    perm = gilbert_order(grid, mode)
    path = output_path(args, "perm.csv")
    write_permutation_csv(path, perm.forward)
    block = args.block or int(run_config.get("block_size", 64))
    return {
        "Curve": {
            "Grid": grid.shape,
            "Mode": mode,
            "Seam jumps": count_seam_jumps(perm, grid),
            f"Mean intra-block distance (b={block})": mean_intra_block_distance(perm, grid, block),
        },
        "Output": {"Permutation": path},
    }


def cmd_probe(args: argparse.Namespace, run_config: Dict[str, Any]) -> Dict[str, Dict[str, Any]]:
    cfg = attn_config(run_config, block_size=args.block, samples=args.samples)
    q, k = read_btf(args.q), read_btf(args.k)
    flops = FlopCounter()
    if args.oracle:
        pimp = dense_importance_map(q, k, cfg, flops=flops)
    else:
        pimp = compute_block_importance(q, k, cfg, RngStream(args.seed), flops=flops)
    path = output_path(args, "pimp.btf")
    write_btf(path, pimp.values)
    return {
        "Probe": {
            "Provenance": pimp.provenance,
            "Blocks": pimp.n_b,
            "Block size": cfg.block_size,
            "Samples": cfg.samples,
            "FLOPs": flops.total,
        },
        "Output": {"Importance map": path},
    }


def cmd_mask(args: argparse.Namespace, run_config: Dict[str, Any]) -> Dict[str, Dict[str, Any]]:
    cfg = attn_config(
        run_config, tau=args.tau, min_keep=args.min_keep, max_keep=args.max_keep,
        target_sparsity=args.target_sparsity,
    )
    values = read_btf(args.pimp)
    if cfg.target_sparsity is not None:
        mask = target_sparsity_mask(values, cfg, cfg.target_sparsity)
    else:
        mask = threshold_mask(values, cfg)
    path = output_path(args, "mask.btf")
    write_btf(path, mask.bits.astype(np.float32))
    if args.csv:
        write_matrix_csv(args.csv, values)
    return {
        "Mask": {
            "Blocks": mask.n_b,
            "Tau": mask.tau,
            "Sparsity": mask.sparsity,
            "Degenerate rows": len(mask.degenerate_rows),
        },
        "Output": {"Mask": path, "Heatmap": args.csv},
    }


def cmd_attend(args: argparse.Namespace, run_config: Dict[str, Any]) -> Dict[str, Dict[str, Any]]:
    cfg = attn_config(run_config, block_size=args.block, pool_n=args.pool_n)
    q, k, v = read_btf(args.q), read_btf(args.k), read_btf(args.v)
    mask = BlockMask(read_btf(args.mask) > 0.5)
    flops = FlopCounter()
    executor = sparse_attention_gt if cfg.pool_n > 0 else sparse_attention
    result = executor(q, k, v, mask, cfg, flops)
    path = output_path(args, "out.btf")
    write_btf(path, result.out)

    stats: Dict[str, Any] = {
        "sparsity": result.effective_sparsity,
        "flops": flops.to_dict(),
        "product_flops": result.product_flops,
        "pool_n": cfg.pool_n,
    }
    if args.ref:
        stats.update(reference_metrics(result.out, read_btf(args.ref)))
    if args.check_oracle:
        oracle = dense_augmented_oracle if cfg.pool_n > 0 else dense_masked_oracle
        stats["max_abs_diff_vs_oracle"] = float(np.abs(result.out - oracle(q, k, v, mask, cfg)).max())
    if args.stats:
        write_json(args.stats, stats)
    return {
        "Attention": {
            "Sparsity": result.effective_sparsity,
            "FLOPs": flops.total,
            "Relative error vs reference": stats.get("rel_error"),
            "PSNR vs reference": stats.get("psnr"),
            "Max |diff| vs oracle": stats.get("max_abs_diff_vs_oracle"),
        },
        "Output": {"Attention output": path, "Stats": args.stats},
    }


def reference_metrics(out: np.ndarray, ref: np.ndarray) -> Dict[str, float]:
    """PSNR, SSIM and relative error of ``out`` against a dense output.

    The (N, d_v) outputs are compared as single-channel images with the
    reference's value range as peak.

    Raises:
        ValidationError: If the shapes differ.
    """
    if ref.shape != out.shape:
        raise ValidationError(f"reference has shape {ref.shape}, attention output is {out.shape}")
    peak = float(ref.max() - ref.min()) or 1.0
    return {
        "psnr": psnr(out, ref, peak),
        "ssim": ssim(out, ref, peak),
        "rel_error": relative_error(out, ref),
    }


def cmd_verify_theory(args: argparse.Namespace, run_config: Dict[str, Any]) -> Dict[str, Dict[str, Any]]:
    report = verify_theory(args.n, args.k, args.trials, RngStream(args.seed), MAX_WORKERS)
    path = output_path(args, "theory.json")
    write_json(path, report)
    law = report["rank_law"]
    return {
        "Rank law": {
            "N, k": (args.n, args.k),
            "Empirical mean": law["empirical_mean_rank"],
            "Analytic mean": law["analytic_mean"],
            "Empirical variance": law["empirical_var_rank"],
            "Analytic variance": law["analytic_var"],
        },
        "Output": {"Report": path},
    }


def cmd_distill_toy(args: argparse.Namespace, run_config: Dict[str, Any]) -> Dict[str, Dict[str, Any]]:
    cfg = DistillConfig(
        n_stages=args.stages,
        iters=args.iters,
        student=args.student,
        dim=args.dim,
        lr=args.lr,
        schedule=args.schedule,
        dense_warmup_stages=args.dense_warmup_stages,
        grad_clip=args.grad_clip,
    )
    teacher = parse_teacher(args.teacher, cfg.dim, cfg.build_schedule())
    result = distill(teacher, cfg, RngStream(args.seed))
    trace_path = args.trace or output_path(args, "trace.csv")
    result.trace_frame().to_csv(trace_path, index=False)
    return {
        "Student": {
            "Variant": cfg.student,
            "Stages": cfg.n_stages,
            "Iterations": cfg.iters,
        },
        "Moments": {
            "Final mean": result.final_mean,
            "Teacher mean": result.teacher_mean,
            "Final std": result.final_std,
            "Teacher std": result.teacher_std,
        },
        "Output": {"Trace": trace_path},
    }


def cmd_bench(args: argparse.Namespace, run_config: Dict[str, Any]) -> Dict[str, Dict[str, Any]]:
    cfg = attn_config(run_config, target_sparsity=args.target_sparsity)
    spec = workload_spec(run_config, args.seed)
    report = bench(spec, cfg, args.variants, args.seeds, MAX_WORKERS)
    path = output_path(args, "bench.json")
    write_json(path, report)
    sections = {
        variant: {
            "Sparsity": stats["sparsity_mean"],
            "Relative error": stats["rel_error_mean"],
            "PSNR": stats["psnr_mean"],
            "SSIM": stats["ssim_mean"],
        }
        for variant, stats in report["summary"].items()
    }
    sections["Output"] = {"Report": path}
    return sections


def cmd_sweep(args: argparse.Namespace, run_config: Dict[str, Any]) -> Dict[str, Dict[str, Any]]:
    cfg = attn_config(run_config)
    spec = workload_spec(run_config, args.seed)
    path = output_path(args, "sweep.csv")
    frame = sweep(spec, cfg, args.taus, args.variants, out=path, workers=MAX_WORKERS)
    return {"Sweep": {"Points": len(args.taus), "Rows": len(frame)}, "Output": {"CSV": path}}


COMMANDS: Dict[str, Callable[[argparse.Namespace, Dict[str, Any]], Dict[str, Dict[str, Any]]]] = {
    "gilbert": cmd_gilbert,
    "probe": cmd_probe,
    "mask": cmd_mask,
    "attend": cmd_attend,
    "verify-theory": cmd_verify_theory,
    "distill-toy": cmd_distill_toy,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
}


class CliParser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with EXIT_VALIDATION."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    """Build the argument parser with one subparser per command.

    ``--seed`` is accepted before or after the subcommand; the later one wins.
    """
    parser = CliParser(
        prog="asablade",
        description="Adaptive block-sparse attention and trajectory distillation toolkit.",
    )
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED, help="Root seed")
    common = CliParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="Root seed")
    parser.add_argument("--config", help="Flat JSON file with AttnConfig and WorkloadSpec fields")
    parser.add_argument("--out-dir", default=OUTPUT_DIRECTORY, help="Directory for bare output names")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING, ERROR or CRITICAL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gilbert", parents=[common], help="Write the gilbert token order of a grid")
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--h", type=int, required=True)
    p.add_argument("--w", type=int, required=True)
    p.add_argument("--mode", choices=("3d", "2d", "off"))
    p.add_argument("--block", type=int, help="Block size for the locality summary")
    p.add_argument("--out")

    p = sub.add_parser("probe", parents=[common], help="Estimate block importance from sampled tokens")
    p.add_argument("--q", required=True)
    p.add_argument("--k", required=True)
    p.add_argument("--block", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--oracle", action="store_true", help="Use full attention instead of samples")
    p.add_argument("--out")

    p = sub.add_parser("mask", parents=[common], help="Threshold an importance map into a block mask")
    p.add_argument("--pimp", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--min-keep", type=float)
    p.add_argument("--max-keep", type=float)
    p.add_argument("--target-sparsity", type=float)
    p.add_argument("--csv", help="Also write the importance heatmap as CSV")
    p.add_argument("--out")

    p = sub.add_parser("attend", parents=[common], help="Run block-sparse attention with a mask")
    p.add_argument("--q", required=True)
    p.add_argument("--k", required=True)
    p.add_argument("--v", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--block", type=int)
    p.add_argument("--pool-n", type=int)
    p.add_argument("--stats", help="JSON file for sparsity and FLOP statistics")
    p.add_argument("--ref", help="Dense output (.btf) to score PSNR, SSIM and relative error against")
    p.add_argument("--check-oracle", action="store_true",
                   help="Also report the max deviation from the matching dense masked oracle")
    p.add_argument("--out")

    p = sub.add_parser("verify-theory", parents=[common], help="Rank law, confidence table and proportionality checks")
    p.add_argument("--n", type=int, default=RANK_LAW_N)
    p.add_argument("--k", type=int, default=RANK_LAW_K)
    p.add_argument("--trials", type=int, default=RANK_LAW_TRIALS)
    p.add_argument("--out")

    p = sub.add_parser("distill-toy", parents=[common], help="Trajectory distribution matching on a toy teacher")
    p.add_argument("--teacher", default="gauss:3,0.5", help="gauss:m,s or mix:m1,s1,m2,s2[,w1]")
    p.add_argument("--student", choices=("affine", "attn"), default="affine")
    p.add_argument("--stages", type=int, default=TDM_STAGES)
    p.add_argument("--iters", type=int, default=TDM_ITERS)
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--lr", type=float)
    p.add_argument("--schedule", choices=("rectified_flow", "vp_cosine"), default="rectified_flow")
    p.add_argument("--dense-warmup-stages", type=int, default=0)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--trace")
    p.add_argument("--out", help=argparse.SUPPRESS)

    p = sub.add_parser("bench", parents=[common], help="Multi-seed comparison of pipeline variants")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--variants", nargs="+", default=list(PIPELINE_VARIANTS))
    p.add_argument("--target-sparsity", type=float)
    p.add_argument("--out")

    p = sub.add_parser("sweep", parents=[common], help="Quality and sparsity over a range of tau")
    p.add_argument("--taus", type=float, nargs="+", required=True)
    p.add_argument("--variants", nargs="+", default=["asa", "static_window"])
    p.add_argument("--out")

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main application entry point.

    Returns:
        Process exit code: 0 on success, 1 on invalid input or I/O failure,
        2 on numerical divergence.
    """
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_VALIDATION
    if args.log_level:
        try:
            set_level(args.log_level)
        except ValueError as e:
            error(str(e))
            return EXIT_VALIDATION

    info("Application starting...")
    logger.add_custom_context({"command": args.command})
    start = time.time()
    try:
        run_config = load_run_config(args.config)
        sections = COMMANDS[args.command](args, run_config)
    except NumericalDivergenceError as e:
        logger.error(f"Numerical divergence: {e}", context={"command": args.command})
        return EXIT_DIVERGENCE
    except (ValidationError, OSError) as e:
        logger.error(f"{args.command} failed: {e}", context={"command": args.command})
        return EXIT_VALIDATION
    finally:
        logger.clear_custom_context()

    print_summary_report(f"asablade {args.command}", sections, time.time() - start)
    info("Application finished")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
