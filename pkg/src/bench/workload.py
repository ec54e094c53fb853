"""Synthetic structured Q, K, V workloads over a video token grid."""

import math
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from src.attention.gilbert import TokenGrid
from src.tensor.core import RngStream, ensure_finite
from src.utils.errors import ValidationError
from src.utils.logger import get_logger

logger = get_logger(__name__)

STRUCTURES = ("smooth_field", "uniform", "block_motif", "adversarial_spike")
MOTIF_PALETTE = 4
TOKEN_NOISE = 0.1
SPIKE_GAIN = 8.0


@dataclass(frozen=True)
class WorkloadSpec:
    """Workload parameters, enough to replay a workload exactly.

    Attributes:
        t, h, w: Token grid extents.
        d: Head dimension of Q, K and V.
        structure: smooth_field, uniform, block_motif or adversarial_spike.
        corr_len: Spatial correlation length in tokens; ``inf`` gives a
            constant field.
        gain: Query scale; larger values make attention peakier.
        seed: Root seed of the workload stream.
    """

    t: int = 4
    h: int = 16
    w: int = 16
    d: int = 32
    structure: str = "smooth_field"
    corr_len: float = 2.0
    gain: float = 1.0
    seed: int = 0

    def __post_init__(self):
        TokenGrid(self.t, self.h, self.w)
        if self.d < 1:
            raise ValidationError(f"d must be >= 1, got {self.d}")
        if self.structure not in STRUCTURES:
            raise ValidationError(f"structure must be one of {STRUCTURES}, got {self.structure}")
        if not self.corr_len > 0:
            raise ValidationError(f"corr_len must be positive, got {self.corr_len}")
        if not (math.isfinite(self.gain) and self.gain > 0):
            raise ValidationError(f"gain must be a positive finite number, got {self.gain}")

    @property
    def grid(self) -> TokenGrid:
        return TokenGrid(self.t, self.h, self.w)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "WorkloadSpec":
        """Build from a flat mapping; a nested ``grid`` of [t, h, w] is accepted."""
        names = {f.name for f in fields(cls)}
        kwargs = {key: value for key, value in data.items() if key in names}
        grid = data.get("grid")
        if grid is not None:
            if len(grid) != 3:
                raise ValidationError(f"grid must be [t, h, w], got {grid}")
            kwargs.update(t=int(grid[0]), h=int(grid[1]), w=int(grid[2]))
        if "corr_len" in kwargs:
            kwargs["corr_len"] = float(kwargs["corr_len"])
        return cls(**kwargs)

    def with_seed(self, seed: int) -> "WorkloadSpec":
        data = asdict(self)
        data["seed"] = seed
        return WorkloadSpec(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _normalize_channels(field: np.ndarray) -> np.ndarray:
    flat = field.reshape(-1, field.shape[-1])
    flat = flat - flat.mean(axis=0)
    std = flat.std(axis=0)
    return flat / np.where(std > 0, std, 1.0)


def smooth_field(grid: TokenGrid, d: int, corr_len: float, gen: np.random.Generator) -> np.ndarray:
    """(N, d) low-pass Gaussian field in raster order, unit variance per channel.

    An infinite correlation length gives one random vector repeated at every token.
    """
    if math.isinf(corr_len):
        return np.broadcast_to(gen.standard_normal(d), (grid.n, d)).copy()
    noise = gen.standard_normal(grid.shape + (d,))
    sigma = tuple(corr_len if extent > 1 else 0.0 for extent in grid.shape) + (0.0,)
    return _normalize_channels(gaussian_filter(noise, sigma=sigma, mode="reflect"))


def _block_motif(grid: TokenGrid, d: int, corr_len: float, gen: np.random.Generator) -> np.ndarray:
    tile = max(1, int(round(corr_len)))
    palette = gen.standard_normal((MOTIF_PALETTE, d))
    coords = grid.coords()
    tiles = coords // np.array([tile, tile, tile])
    tile_ids = np.ravel_multi_index(tuple(tiles.T), tuple(tiles.max(axis=0) + 1))
    motif_of_tile = gen.integers(0, MOTIF_PALETTE, size=int(tile_ids.max()) + 1)
    return palette[motif_of_tile[tile_ids]] + TOKEN_NOISE * gen.standard_normal((grid.n, d))


def generate_workload(spec: WorkloadSpec, rng: Optional[RngStream] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Q, K, V of shape (N, d), float32, tokens in raster order.

    Draws come from ``rng`` (default ``RngStream(spec.seed)``): split 0 for
    the shared key field, 1 for token noise, 2 for values.
    """
    rng = RngStream(spec.seed) if rng is None else rng
    grid = spec.grid
    field_gen = rng.split(0).generator()
    noise_gen = rng.split(1).generator()
    value_gen = rng.split(2).generator()

    if spec.structure == "uniform":
        base = np.broadcast_to(field_gen.standard_normal(spec.d), (grid.n, spec.d))
        q, k = spec.gain * base, base.copy()
    elif spec.structure == "smooth_field":
        base = smooth_field(grid, spec.d, spec.corr_len, field_gen)
        if math.isinf(spec.corr_len):
            q, k = spec.gain * base, base.copy()
        else:
            q = spec.gain * (base + TOKEN_NOISE * noise_gen.standard_normal(base.shape))
            k = base + TOKEN_NOISE * noise_gen.standard_normal(base.shape)
    elif spec.structure == "block_motif":
        base = _block_motif(grid, spec.d, spec.corr_len, field_gen)
        q, k = spec.gain * base, base + TOKEN_NOISE * noise_gen.standard_normal(base.shape)
    else:
        q = spec.gain * noise_gen.standard_normal((grid.n, spec.d))
        k = noise_gen.standard_normal((grid.n, spec.d))
        spike = int(field_gen.integers(grid.n))
        direction = q.mean(axis=0)
        k[spike] = SPIKE_GAIN * np.sqrt(spec.d) * direction / max(np.linalg.norm(direction), 1e-12)

    corr = spec.corr_len if math.isfinite(spec.corr_len) else 4.0
    v = smooth_field(grid, spec.d, corr, value_gen)

    q, k, v = (ensure_finite(np.ascontiguousarray(a, dtype=np.float32), f"workload {name}")
               for name, a in (("q", q), ("k", k), ("v", v)))
    logger.debug(
        f"Generated {spec.structure} workload",
        context={"grid": grid.shape, "d": spec.d, "seed": spec.seed},
    )
    return q, k, v
