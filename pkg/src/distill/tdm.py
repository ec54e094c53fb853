"""
Trajectory distribution matching for the few-step student.

Each iteration runs the student's stage trajectory from pure noise, refits
the fake score on the stage predictions, and moves every stage along

    grad = mean_b  lambda_i alpha_j (s_fake(x_j) - s_real(x_j)) d x0_hat / d theta

where ``x_j = alpha_j x0_hat + sigma_j eps`` re-corrupts a stage prediction
at a timestep j inside the stage's interval. The score difference is held
fixed while differentiating.
"""

import time
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from tqdm import trange

from src.attention.config import AttnConfig
from src.attention.maskgen import BlockMask
from src.config.settings import (
    TDM_BATCH,
    TDM_DIVERGENCE_FACTOR,
    TDM_EVAL_SAMPLES,
    TDM_ITERS,
    TDM_LR_AFFINE,
    TDM_LR_ATTN,
    TDM_STAGES,
    TDM_TIMESTEPS_PER_STAGE,
)
from src.distill.schedule import Schedule
from src.distill.scores import ScoreModel, train_fake_score
from src.distill.student import AttnStudent, StudentGenerator, build_student
from src.tensor.core import RngStream, ensure_finite
from src.utils.errors import NumericalDivergenceError, ValidationError
from src.utils.logger import get_logger

logger = get_logger(__name__)

TRACE_COLUMNS = ["iter", "mean_err", "cov_err", "fake_residual", "grad_norm"]


@dataclass
class TdmStep:
    """One stage's gradient and the quantities that produced it."""

    grads: Dict[str, np.ndarray]
    x0_hat: np.ndarray
    timesteps: np.ndarray
    cotangent: np.ndarray
    cotangent_norm: float

    @property
    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((g ** 2).sum()) for g in self.grads.values())))


@dataclass
class DistillConfig:
    """Distillation run settings.

    ``lr`` defaults by student variant. ``dense_warmup_stages`` counts the
    noisiest stages, which run the attention student without a mask.
    """

    n_stages: int = TDM_STAGES
    iters: int = TDM_ITERS
    batch: int = TDM_BATCH
    lr: Optional[float] = None
    schedule: str = "rectified_flow"
    timesteps_per_stage: int = TDM_TIMESTEPS_PER_STAGE
    timesteps_per_update: int = 1
    student: str = "affine"
    dim: int = 1
    tokens: int = 8
    head_dim: int = 4
    attn_block: int = 2
    tau: float = 0.9
    min_keep: float = 0.25
    dense_warmup_stages: int = 0
    grad_clip: Optional[float] = None
    eval_samples: int = TDM_EVAL_SAMPLES
    divergence_factor: float = TDM_DIVERGENCE_FACTOR
    progress: bool = True

    def __post_init__(self):
        if self.iters < 0 or self.batch < 2 or self.timesteps_per_update < 1:
            raise ValidationError("need iters >= 0, batch >= 2 and timesteps_per_update >= 1")
        if self.lr is not None and self.lr <= 0:
            raise ValidationError(f"lr must be positive, got {self.lr}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValidationError(f"grad_clip must be positive, got {self.grad_clip}")
        if not 0 <= self.dense_warmup_stages <= self.n_stages:
            raise ValidationError("dense_warmup_stages must lie in [0, n_stages]")

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return TDM_LR_AFFINE if self.student == "affine" else TDM_LR_ATTN

    def build_schedule(self) -> Schedule:
        return Schedule.uniform(self.schedule, self.n_stages, self.timesteps_per_stage)

    def mask_config(self) -> AttnConfig:
        return AttnConfig(
            block_size=self.attn_block,
            samples=self.attn_block,
            tau=self.tau,
            min_keep=self.min_keep,
            max_keep=1.0,
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class DistillResult:
    student: StudentGenerator
    trace: List[Dict[str, float]] = field(default_factory=list)
    final_mean: float = 0.0
    final_std: float = 0.0
    teacher_mean: float = 0.0
    teacher_std: float = 0.0
    elapsed: float = 0.0

    @property
    def mean_rel_error(self) -> float:
        return abs(self.final_mean - self.teacher_mean) / max(abs(self.teacher_mean), 1e-12)

    @property
    def std_rel_error(self) -> float:
        return abs(self.final_std - self.teacher_std) / self.teacher_std

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.trace, columns=TRACE_COLUMNS)


def ddim_transfer(x0_hat: np.ndarray, x_in: np.ndarray, t_from: float, t_to: float, sched: Schedule) -> np.ndarray:
    """Deterministic move from ``t_from`` to ``t_to`` given a clean prediction."""
    sigma_from = sched.sigma(t_from)
    if sigma_from <= 0.0:
        raise ValidationError(f"cannot transfer from t={t_from} with sigma 0")
    eps_hat = (x_in - sched.alpha(t_from) * x0_hat) / sigma_from
    return sched.alpha(t_to) * x0_hat + sched.sigma(t_to) * eps_hat


def tdm_gradient(
    student: StudentGenerator,
    stage: int,
    x_in: np.ndarray,
    fake: ScoreModel,
    real: ScoreModel,
    sched: Schedule,
    rng: RngStream,
    mask: Optional[BlockMask] = None,
    timesteps: Optional[np.ndarray] = None,
    n_timesteps: int = 1,
) -> TdmStep:
    """Parameter gradient of one stage.

    Args:
        student: Generator whose ``stage`` parameters are differentiated.
        stage: Stage index.
        x_in: (B, D) stage input.
        fake: Score of the student's own distribution.
        real: Teacher score.
        sched: Schedule supplying alpha, sigma and lambda.
        rng: Timestep choice and corruption noise.
        mask: Block mask for the attention student.
        timesteps: Fixed timesteps to use instead of sampling.
        n_timesteps: Timesteps sampled uniformly from the stage's grid.

    Returns:
        TdmStep with batch-averaged gradients.
    """
    gen = rng.generator()
    x0_hat, cache = student.forward(x_in, stage, mask)
    if timesteps is None:
        timesteps = gen.choice(sched.stage_timesteps(stage), size=n_timesteps, replace=True)
    timesteps = np.atleast_1d(np.asarray(timesteps, dtype=np.float64))

    weight = sched.weights[stage]
    cotangent = np.zeros_like(x0_hat)
    for t in timesteps:
        eps = gen.standard_normal(x0_hat.shape)
        xj = sched.alpha(t) * x0_hat + sched.sigma(t) * eps
        diff = fake.score(xj, float(t)) - real.score(xj, float(t))
        cotangent += weight * sched.alpha(t) * diff
    cotangent /= timesteps.size
    ensure_finite(cotangent, f"stage {stage} score difference")

    return TdmStep(
        grads=student.vjp(stage, cache, cotangent),
        x0_hat=x0_hat,
        timesteps=timesteps,
        cotangent=cotangent,
        cotangent_norm=float(np.sqrt((cotangent ** 2).sum(axis=1)).mean()),
    )


def _stage_masks(student: StudentGenerator, inputs: Dict[int, np.ndarray], cfg: DistillConfig) -> Dict[int, Optional[BlockMask]]:
    if not isinstance(student, AttnStudent):
        return {}
    mask_cfg = cfg.mask_config()
    masks = {}
    for stage, x_in in inputs.items():
        dense = stage >= student.n_stages - cfg.dense_warmup_stages
        masks[stage] = None if dense else student.select_mask(x_in, stage, mask_cfg)
    return masks


def run_trajectory(
    student: StudentGenerator,
    z: np.ndarray,
    sched: Schedule,
    masks: Optional[Dict[int, Optional[BlockMask]]] = None,
    distill_cfg: Optional[DistillConfig] = None,
):
    """Run the stages from pure noise at t=1 down to the final prediction.

    Stage i reads ``x`` at the end of its interval and hands ``x`` at the
    end of stage i-1's interval to the next stage.

    Returns:
        (inputs, predictions, masks) keyed by stage; ``predictions[0]`` is the sample.
    """
    inputs, preds = {}, {}
    used_masks: Dict[int, Optional[BlockMask]] = {}
    x = np.asarray(z, dtype=np.float64)
    for stage in range(sched.n_stages - 1, -1, -1):
        inputs[stage] = x
        if masks is not None:
            mask = masks.get(stage)
        elif distill_cfg is not None:
            mask = _stage_masks(student, {stage: x}, distill_cfg).get(stage)
        else:
            mask = None
        used_masks[stage] = mask
        x0_hat, _ = student.forward(x, stage, mask)
        preds[stage] = x0_hat
        if stage > 0:
            x = ddim_transfer(x0_hat, x, sched.intervals[stage][1], sched.intervals[stage - 1][1], sched)
    return inputs, preds, used_masks


def moment_errors(samples: np.ndarray, mean: float, std: float):
    """Mean absolute per-dimension error of the mean and of the variance."""
    mean_err = float(np.abs(samples.mean(axis=0) - mean).mean())
    cov_err = float(np.abs(samples.var(axis=0) - std ** 2).mean())
    return mean_err, cov_err


def _clip(grads: Dict[str, np.ndarray], limit: Optional[float]) -> Dict[str, np.ndarray]:
    if limit is None:
        return grads
    norm = float(np.sqrt(sum(float((g ** 2).sum()) for g in grads.values())))
    if norm <= limit:
        return grads
    return {name: g * (limit / norm) for name, g in grads.items()}


def distill(
    teacher: ScoreModel,
    cfg: DistillConfig,
    rng: RngStream,
    student: Optional[StudentGenerator] = None,
) -> DistillResult:
    """Train a few-step student against ``teacher``.

    Iteration i draws everything from ``rng.split(i)``; the final evaluation
    uses ``rng.split(cfg.iters)``.

    Raises:
        NumericalDivergenceError: If the moment error exceeds
            ``divergence_factor * max(initial error, 1)`` or goes non-finite.
            The exception carries the trace so far.
    """
    sched = cfg.build_schedule()
    if student is None:
        student = build_student(
            cfg.student,
            cfg.n_stages,
            cfg.dim,
            rng.split(cfg.iters + 1),
            tokens=cfg.tokens,
            head_dim=cfg.head_dim,
            block_size=cfg.attn_block,
        )
    if student.n_stages != sched.n_stages:
        raise ValidationError(f"student has {student.n_stages} stages, schedule has {sched.n_stages}")
    t_mean, t_std = teacher.moments
    lr = cfg.learning_rate
    start = time.time()
    trace: List[Dict[str, float]] = []
    limit: Optional[float] = None

    logger.info(
        f"Distilling {cfg.student} student over {cfg.n_stages} stages",
        context={"iters": cfg.iters, "batch": cfg.batch, "lr": lr, "schedule": cfg.schedule},
    )

    for it in trange(cfg.iters, desc="Distilling", disable=not cfg.progress):
        stream = rng.split(it)
        z = stream.split(0).generator().standard_normal((cfg.batch, student.dim))
        masks = None
        if isinstance(student, AttnStudent):
            inputs, preds, masks = run_trajectory(student, z, sched, distill_cfg=cfg)
        else:
            inputs, preds, _ = run_trajectory(student, z, sched)

        fake = train_fake_score(preds, sched, stream.split(1))
        steps = {
            stage: tdm_gradient(
                student,
                stage,
                inputs[stage],
                fake,
                teacher,
                sched,
                stream.split(2).split(stage),
                mask=(masks or {}).get(stage),
                n_timesteps=cfg.timesteps_per_update,
            )
            for stage in range(sched.n_stages)
        }
        grad_norm = float(np.sqrt(sum(s.grad_norm ** 2 for s in steps.values())))
        for stage, step in steps.items():
            student.apply_update(stage, _clip(step.grads, cfg.grad_clip), lr)

        mean_err, cov_err = moment_errors(preds[0], t_mean, t_std)
        trace.append({
            "iter": it,
            "mean_err": mean_err,
            "cov_err": cov_err,
            "fake_residual": fake.residual,
            "grad_norm": grad_norm,
        })
        total = mean_err + cov_err
        if limit is None:
            limit = cfg.divergence_factor * max(total, 1.0)
        if not np.isfinite(total) or total > limit:
            logger.error(
                f"Distillation diverged at iteration {it}",
                context={"moment_error": total, "limit": limit},
            )
            raise NumericalDivergenceError(
                f"moment error {total:.4g} exceeded {limit:.4g} at iteration {it}", trace=trace
            )

    eval_z = rng.split(cfg.iters).generator().standard_normal((cfg.eval_samples, student.dim))
    eval_masks = cfg if isinstance(student, AttnStudent) else None
    _, eval_preds, _ = run_trajectory(student, eval_z, sched, distill_cfg=eval_masks)
    final = eval_preds[0]

    result = DistillResult(
        student=student,
        trace=trace,
        final_mean=float(final.mean(axis=0).mean()),
        final_std=float(final.std(axis=0).mean()),
        teacher_mean=t_mean,
        teacher_std=t_std,
        elapsed=time.time() - start,
    )
    logger.info(
        f"Distillation finished: mean {result.final_mean:.4f} (teacher {t_mean:.4f}), "
        f"std {result.final_std:.4f} (teacher {t_std:.4f})",
        context={"elapsed_s": round(result.elapsed, 2)},
    )
    return result
