"""
Score models for the distillation toy.

A score model is represented by its denoiser ``x0_hat(x_t, t)``; the score
follows from ``-(x_t - alpha(t) x0_hat) / sigma(t)^2``. Teachers have an
analytic denoiser, the fake score is refit every iteration by least squares.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from src.config.settings import RIDGE_DAMPING
from src.distill.schedule import Schedule
from src.tensor.core import RngStream
from src.utils.errors import ValidationError
from src.utils.logger import get_logger

logger = get_logger(__name__)

TEACHER_REAL = "teacher_real"
FAKE = "fake"
_T_KEY_DIGITS = 9


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValidationError(f"expected a (B, D) batch, got shape {x.shape}")
    return x


def forward_corrupt(x0, t: float, eps, sched: Schedule) -> np.ndarray:
    """``alpha(t) x0 + sigma(t) eps``."""
    if not 0.0 <= t <= 1.0:
        raise ValidationError(f"t must lie in [0, 1], got {t}")
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValidationError(f"x0 and eps shapes differ: {x0.shape} vs {eps.shape}")
    return sched.alpha(t) * x0 + sched.sigma(t) * eps


def denoiser_to_score(xt, t: float, x0_hat, sched: Schedule) -> np.ndarray:
    """Tweedie conversion from a denoiser output to a score."""
    sigma = sched.sigma(t)
    if sigma <= 0.0:
        raise ValidationError(f"score is undefined at sigma(t)=0 (t={t})")
    xt = np.asarray(xt, dtype=np.float64)
    return -(xt - sched.alpha(t) * np.asarray(x0_hat, dtype=np.float64)) / sigma ** 2


class ScoreModel:
    """Denoiser-parameterized score.

    Subclasses implement ``denoise``; ``score`` is derived from it.
    """

    role = TEACHER_REAL

    def __init__(self, sched: Schedule):
        self.sched = sched

    def denoise(self, x: np.ndarray, t: float) -> np.ndarray:
        raise NotImplementedError

    def score(self, x: np.ndarray, t: float) -> np.ndarray:
        x = _as_batch(x)
        return denoiser_to_score(x, t, self.denoise(x, t), self.sched)


class GaussianTeacher(ScoreModel):
    """Isotropic ``N(mean, std^2 I)`` data distribution in ``dim`` dimensions."""

    def __init__(self, mean: float, std: float, dim: int, sched: Schedule):
        super().__init__(sched)
        if std <= 0:
            raise ValidationError(f"std must be positive, got {std}")
        if dim < 1:
            raise ValidationError(f"dim must be >= 1, got {dim}")
        self.mean = float(mean)
        self.std = float(std)
        self.dim = int(dim)

    def denoise(self, x, t):
        x = _as_batch(x)
        a, s = self.sched.alpha(t), self.sched.sigma(t)
        gain = a * self.std ** 2 / (a ** 2 * self.std ** 2 + s ** 2)
        return self.mean + gain * (x - a * self.mean)

    def marginal_score(self, x, t) -> np.ndarray:
        """Score of the corrupted marginal, computed directly."""
        x = _as_batch(x)
        a, s = self.sched.alpha(t), self.sched.sigma(t)
        return -(x - a * self.mean) / (a ** 2 * self.std ** 2 + s ** 2)

    def sample(self, n: int, rng: RngStream) -> np.ndarray:
        return self.mean + self.std * rng.generator().standard_normal((n, self.dim))

    @property
    def moments(self) -> Tuple[float, float]:
        return self.mean, self.std


class MixtureTeacher(ScoreModel):
    """Mixture of isotropic Gaussians sharing ``dim``."""

    def __init__(
        self,
        means: Sequence[float],
        stds: Sequence[float],
        weights: Sequence[float],
        dim: int,
        sched: Schedule,
    ):
        super().__init__(sched)
        self.means = np.asarray(means, dtype=np.float64)
        self.stds = np.asarray(stds, dtype=np.float64)
        w = np.asarray(weights, dtype=np.float64)
        if not (self.means.shape == self.stds.shape == w.shape) or self.means.size < 1:
            raise ValidationError("means, stds and weights must have one entry per component")
        if np.any(self.stds <= 0) or np.any(w <= 0):
            raise ValidationError("mixture stds and weights must be positive")
        self.weights = w / w.sum()
        self.dim = int(dim)

    def responsibilities(self, x, t) -> np.ndarray:
        x = _as_batch(x)
        a, s = self.sched.alpha(t), self.sched.sigma(t)
        var = a ** 2 * self.stds ** 2 + s ** 2
        sq = ((x[:, None, :] - a * self.means[None, :, None]) ** 2).sum(axis=2)
        log_lik = np.log(self.weights) - 0.5 * sq / var - 0.5 * x.shape[1] * np.log(2 * np.pi * var)
        return np.exp(log_lik - logsumexp(log_lik, axis=1, keepdims=True))

    def denoise(self, x, t):
        x = _as_batch(x)
        a, s = self.sched.alpha(t), self.sched.sigma(t)
        var = a ** 2 * self.stds ** 2 + s ** 2
        gain = a * self.stds ** 2 / var
        per_component = self.means[None, :, None] + gain[None, :, None] * (
            x[:, None, :] - a * self.means[None, :, None]
        )
        r = self.responsibilities(x, t)
        return (r[:, :, None] * per_component).sum(axis=1)

    def sample(self, n: int, rng: RngStream) -> np.ndarray:
        gen = rng.generator()
        comp = gen.choice(self.means.size, size=n, p=self.weights)
        return self.means[comp, None] + self.stds[comp, None] * gen.standard_normal((n, self.dim))

    @property
    def moments(self) -> Tuple[float, float]:
        mean = float((self.weights * self.means).sum())
        second = float((self.weights * (self.stds ** 2 + self.means ** 2)).sum())
        return mean, float(np.sqrt(second - mean ** 2))


def parse_teacher(spec: str, dim: int, sched: Schedule) -> ScoreModel:
    """Build a teacher from ``gauss:m,s`` or ``mix:m1,s1,m2,s2[,w1]``."""
    try:
        kind, _, args = spec.partition(":")
        values = [float(v) for v in args.split(",") if v.strip()]
    except ValueError as e:
        raise ValidationError(f"cannot parse teacher {spec!r}: {e}") from e
    if kind == "gauss" and len(values) == 2:
        return GaussianTeacher(values[0], values[1], dim, sched)
    if kind == "mix" and len(values) in (4, 5):
        w1 = values[4] if len(values) == 5 else 0.5
        if not 0.0 < w1 < 1.0:
            raise ValidationError(f"mixture weight must lie in (0, 1), got {w1}")
        return MixtureTeacher(values[0:4:2], values[1:4:2], (w1, 1.0 - w1), dim, sched)
    raise ValidationError(f"teacher must be 'gauss:m,s' or 'mix:m1,s1,m2,s2[,w1]', got {spec!r}")


def _t_key(t: float) -> float:
    return round(float(t), _T_KEY_DIGITS)


@dataclass
class AffineFit:
    """``x0_hat = x_t @ A + c`` at one timestep."""

    A: np.ndarray
    c: np.ndarray
    residual: float
    ridge: bool = False


class AffineFakeScore(ScoreModel):
    """Per-timestep affine denoiser fitted to student samples."""

    role = FAKE

    def __init__(self, sched: Schedule, fits: Optional[Dict[float, AffineFit]] = None):
        super().__init__(sched)
        self.fits: Dict[float, AffineFit] = dict(fits or {})

    def fit_at(self, t: float) -> AffineFit:
        try:
            return self.fits[_t_key(t)]
        except KeyError:
            raise ValidationError(f"fake score was not fitted at t={t}") from None

    def denoise(self, x, t):
        fit = self.fit_at(t)
        return _as_batch(x) @ fit.A + fit.c

    @property
    def residual(self) -> float:
        if not self.fits:
            return 0.0
        return float(np.mean([f.residual for f in self.fits.values()]))

    @property
    def ridge_used(self) -> bool:
        return any(f.ridge for f in self.fits.values())


def fit_affine_denoiser(xt: np.ndarray, x0: np.ndarray, damping: float = RIDGE_DAMPING) -> AffineFit:
    """Least-squares regression of ``x0`` on ``[xt, 1]``.

    With fewer samples than unknowns the normal equations are damped by
    ``damping`` and the fit is flagged.
    """
    xt, x0 = _as_batch(xt), _as_batch(x0)
    n, d = xt.shape
    design = np.hstack([xt, np.ones((n, 1))])
    ridge = n < d + 1
    if ridge:
        gram = design.T @ design + damping * np.eye(d + 1)
        coef = np.linalg.solve(gram, design.T @ x0)
    else:
        coef, *_ = np.linalg.lstsq(design, x0, rcond=None)
    residual = float(np.mean((design @ coef - x0) ** 2))
    return AffineFit(A=coef[:d], c=coef[d], residual=residual, ridge=ridge)


def train_fake_score(
    samples: Dict[int, np.ndarray],
    sched: Schedule,
    rng: RngStream,
    timesteps: Optional[Dict[int, Sequence[float]]] = None,
    damping: float = RIDGE_DAMPING,
) -> AffineFakeScore:
    """Fit the fake denoiser on fresh corruptions of each stage's samples.

    Args:
        samples: Stage index to (B, D) clean student predictions.
        sched: Corruption schedule.
        rng: Stage s, timestep m uses ``rng.split(s).split(m)``.
        timesteps: Optional per-stage override of ``sched.stage_timesteps``.
        damping: Ridge term used when B < D + 1.

    Returns:
        AffineFakeScore covering every requested timestep.
    """
    fits: Dict[float, AffineFit] = {}
    for stage, x0 in samples.items():
        x0 = _as_batch(x0)
        ts = (timesteps or {}).get(stage)
        ts = sched.stage_timesteps(stage) if ts is None else ts
        for m, t in enumerate(ts):
            eps = rng.split(stage).split(m).generator().standard_normal(x0.shape)
            fits[_t_key(t)] = fit_affine_denoiser(forward_corrupt(x0, float(t), eps, sched), x0, damping)

    fake = AffineFakeScore(sched, fits)
    if fake.ridge_used:
        logger.warning(
            "Fake score fitted with ridge damping, batch smaller than dimension + 1",
            context={"damping": damping},
        )
    return fake


def optimal_affine_student(teacher: ScoreModel, sched: Schedule) -> Dict[int, Dict[str, np.ndarray]]:
    """Per-stage affine parameters that reproduce a Gaussian teacher exactly.

    The stage fed by ``x_{t_{i+1}} = (alpha s + sigma) z + alpha m`` outputs
    ``s z + m`` for every stage, so every stage's prediction has the teacher's
    distribution.
    """
    if not isinstance(teacher, GaussianTeacher):
        raise ValidationError("the closed-form student exists for Gaussian teachers only")
    m, s, d = teacher.mean, teacher.std, teacher.dim
    params = {}
    for i in range(sched.n_stages):
        t_in = sched.intervals[i][1]
        a, sig = sched.alpha(t_in), sched.sigma(t_in)
        w = s / (a * s + sig)
        params[i] = {"W": w * np.eye(d), "u": np.full(d, m - w * a * m)}
    return params
