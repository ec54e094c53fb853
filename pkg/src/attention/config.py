"""Hyperparameters shared by the prober, mask generator and executors."""

import math
from dataclasses import dataclass, fields, replace
from typing import Any, Dict, Optional

from src.config.settings import (
    ASA_BLOCK_SIZE,
    ASA_MAX_KEEP,
    ASA_MIN_KEEP,
    ASA_POOL_N,
    ASA_SAMPLES,
    ASA_SAMPLING,
    ASA_TAU,
    GILBERT_MODE,
    GILBERT_MODES,
    SAMPLING_MODES,
)
from src.utils.errors import ValidationError

_ALIASES = {"b": "block_size", "k": "samples", "block": "block_size"}


@dataclass(frozen=True)
class AttnConfig:
    """Adaptive block-sparse attention settings.

    Attributes:
        block_size: Tokens per block (b).
        samples: Tokens sampled per block by the prober (k), 1 <= k <= b.
        tau: Cumulative-importance threshold in (0, 1].
        min_keep: Minimum fraction of key blocks kept per query block.
        max_keep: Maximum fraction of key blocks kept per query block.
        pool_n: Global-token pooling window; 0 disables global tokens.
        scale: Logit scale; None means 1/sqrt(d).
        sampling: "uniform" (random, without replacement) or "strided".
        gilbert_mode: Token ordering, one of "3d", "2d", "off".
        target_sparsity: If set, tau is searched to reach this sparsity.
        global_bias: Add the ln(n') logit bias to pooled global tokens.
    """

    block_size: int = ASA_BLOCK_SIZE
    samples: int = ASA_SAMPLES
    tau: float = ASA_TAU
    min_keep: float = ASA_MIN_KEEP
    max_keep: float = ASA_MAX_KEEP
    pool_n: int = ASA_POOL_N
    scale: Optional[float] = None
    sampling: str = ASA_SAMPLING
    gilbert_mode: str = GILBERT_MODE
    target_sparsity: Optional[float] = None
    global_bias: bool = True

    def __post_init__(self):
        if self.block_size < 1:
            raise ValidationError(f"block_size must be >= 1, got {self.block_size}")
        if not 1 <= self.samples <= self.block_size:
            raise ValidationError(
                f"samples must satisfy 1 <= k <= b, got k={self.samples}, b={self.block_size}"
            )
        if not 0.0 < self.tau <= 1.0:
            raise ValidationError(f"tau must lie in (0, 1], got {self.tau}")
        if not 0.0 <= self.min_keep <= self.max_keep <= 1.0:
            raise ValidationError(
                f"need 0 <= min_keep <= max_keep <= 1, got {self.min_keep}, {self.max_keep}"
            )
        if self.pool_n < 0:
            raise ValidationError(f"pool_n must be >= 0, got {self.pool_n}")
        if self.scale is not None and not (math.isfinite(self.scale) and self.scale > 0):
            raise ValidationError(f"scale must be a positive finite number, got {self.scale}")
        if self.sampling not in SAMPLING_MODES:
            raise ValidationError(f"sampling must be one of {SAMPLING_MODES}, got {self.sampling}")
        if self.gilbert_mode not in GILBERT_MODES:
            raise ValidationError(f"gilbert_mode must be one of {GILBERT_MODES}, got {self.gilbert_mode}")
        if self.target_sparsity is not None and not 0.0 <= self.target_sparsity < 1.0:
            raise ValidationError(f"target_sparsity must lie in [0, 1), got {self.target_sparsity}")
        if not isinstance(self.global_bias, bool):
            raise ValidationError(f"global_bias must be true or false, got {self.global_bias!r}")

    def resolve_scale(self, d: int) -> float:
        """Logit scale for head dimension ``d``."""
        if self.scale is not None:
            return float(self.scale)
        return 1.0 / math.sqrt(d)

    def with_overrides(self, **changes: Any) -> "AttnConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AttnConfig":
        """Build from a flat mapping, ignoring keys that are not AttnConfig fields."""
        names = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            key = _ALIASES.get(key, key)
            if key in names:
                kwargs[key] = value
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}
