"""Noise schedules and distillation stages."""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from src.config.settings import TDM_TIMESTEPS_PER_STAGE
from src.utils.errors import ValidationError

SCHEDULE_KINDS = ("rectified_flow", "vp_cosine")

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class Schedule:
    """Corruption schedule ``x_t = alpha(t) x_0 + sigma(t) eps`` split into stages.

    Attributes:
        kind: "rectified_flow" (alpha = 1 - t, sigma = t) or "vp_cosine"
            (alpha = cos(pi t / 2), sigma = sin(pi t / 2)).
        intervals: Stage i covers ``[intervals[i][0], intervals[i][1])``.
            Intervals are ascending and pairwise disjoint.
        weights: One lambda per stage.
        timesteps_per_stage: Discrete timesteps per stage, placed at the
            midpoints of equal sub-intervals.
    """

    kind: str
    intervals: Tuple[Tuple[float, float], ...]
    weights: Tuple[float, ...]
    timesteps_per_stage: int = TDM_TIMESTEPS_PER_STAGE

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValidationError(f"schedule kind must be one of {SCHEDULE_KINDS}, got {self.kind}")
        if not self.intervals:
            raise ValidationError("a schedule needs at least one stage")
        if len(self.weights) != len(self.intervals):
            raise ValidationError("one weight per stage is required")
        if self.timesteps_per_stage < 1:
            raise ValidationError("timesteps_per_stage must be >= 1")
        previous_end = -math.inf
        for start, end in self.intervals:
            if not 0.0 <= start < end <= 1.0:
                raise ValidationError(f"stage interval [{start}, {end}) must lie in [0, 1] and be non-empty")
            if start < previous_end:
                raise ValidationError(
                    f"stage intervals overlap: [{start}, {end}) starts before {previous_end}"
                )
            previous_end = end
        if any(w <= 0 for w in self.weights):
            raise ValidationError("stage weights must be positive")

    @classmethod
    def uniform(
        cls,
        kind: str = "rectified_flow",
        n_stages: int = 4,
        timesteps_per_stage: int = TDM_TIMESTEPS_PER_STAGE,
    ) -> "Schedule":
        """``n_stages`` equal stages covering [0, 1] with unit weights."""
        if n_stages < 1:
            raise ValidationError(f"n_stages must be >= 1, got {n_stages}")
        edges = np.linspace(0.0, 1.0, n_stages + 1)
        intervals = tuple((float(a), float(b)) for a, b in zip(edges[:-1], edges[1:]))
        return cls(kind, intervals, (1.0,) * n_stages, timesteps_per_stage)

    @classmethod
    def from_boundaries(
        cls,
        kind: str,
        boundaries: Sequence[float],
        weights: Optional[Sequence[float]] = None,
        timesteps_per_stage: int = TDM_TIMESTEPS_PER_STAGE,
    ) -> "Schedule":
        """Stages from ``t_0 < t_1 < ... < t_K``."""
        b = [float(x) for x in boundaries]
        if len(b) < 2 or any(x >= y for x, y in zip(b[:-1], b[1:])):
            raise ValidationError(f"boundaries must be strictly increasing, got {b}")
        intervals = tuple(zip(b[:-1], b[1:]))
        w = tuple(weights) if weights is not None else (1.0,) * len(intervals)
        return cls(kind, intervals, w, timesteps_per_stage)

    @classmethod
    def from_intervals(
        cls,
        kind: str,
        intervals: Sequence[Tuple[float, float]],
        weights: Optional[Sequence[float]] = None,
        timesteps_per_stage: int = TDM_TIMESTEPS_PER_STAGE,
    ) -> "Schedule":
        ivs = tuple((float(a), float(b)) for a, b in intervals)
        w = tuple(weights) if weights is not None else (1.0,) * len(ivs)
        return cls(kind, ivs, w, timesteps_per_stage)

    @property
    def n_stages(self) -> int:
        return len(self.intervals)

    @property
    def boundaries(self) -> Tuple[float, ...]:
        """``t_0 .. t_K``; stages are assumed contiguous."""
        return tuple(a for a, _ in self.intervals) + (self.intervals[-1][1],)

    def alpha(self, t: ArrayLike) -> ArrayLike:
        t = np.asarray(t, dtype=np.float64)
        out = 1.0 - t if self.kind == "rectified_flow" else np.cos(0.5 * np.pi * t)
        return float(out) if out.ndim == 0 else out

    def sigma(self, t: ArrayLike) -> ArrayLike:
        t = np.asarray(t, dtype=np.float64)
        out = t if self.kind == "rectified_flow" else np.sin(0.5 * np.pi * t)
        return float(out) if out.ndim == 0 else out

    def stage_timesteps(self, stage: int) -> np.ndarray:
        start, end = self.stage_interval(stage)
        step = (end - start) / self.timesteps_per_stage
        return start + (np.arange(self.timesteps_per_stage) + 0.5) * step

    def stage_interval(self, stage: int) -> Tuple[float, float]:
        if not 0 <= stage < self.n_stages:
            raise ValidationError(f"stage must lie in [0, {self.n_stages}), got {stage}")
        return self.intervals[stage]

    def stage_of(self, t: float) -> int:
        for i, (start, end) in enumerate(self.intervals):
            if start <= t < end:
                return i
        raise ValidationError(f"t={t} is not inside any stage")
