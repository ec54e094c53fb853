"""
Locality-preserving token order over a (T, H, W) token grid.

Tokens are indexed in raster order ``(t * H + y) * W + x``. A Permutation's
``forward[i]`` is the raster index of the i-th token along the curve, so
``x[forward]`` reorders a token matrix into curve order.

The curves are the generalized Hilbert ("gilbert") constructions for
arbitrary rectangles and cuboids.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, List, Sequence, Tuple

import numpy as np

from src.config.settings import GILBERT_MODE, GILBERT_MODES
from src.utils.errors import ValidationError
from src.utils.logger import get_logger

logger = get_logger(__name__)

Coord2 = Tuple[int, int]
Coord3 = Tuple[int, int, int]


@dataclass(frozen=True)
class TokenGrid:
    """Video token grid; ``n`` is the attention sequence length."""

    t: int
    h: int
    w: int

    def __post_init__(self):
        if min(self.t, self.h, self.w) < 1:
            raise ValidationError(f"grid extents must be >= 1, got {(self.t, self.h, self.w)}")

    @property
    def n(self) -> int:
        return self.t * self.h * self.w

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.t, self.h, self.w)

    def coords(self) -> np.ndarray:
        """(N, 3) array of (t, y, x) for every raster index."""
        t, y, x = np.unravel_index(np.arange(self.n), self.shape)
        return np.stack([t, y, x], axis=1)


@dataclass(frozen=True, eq=False)
class Permutation:
    forward: np.ndarray
    inverse: np.ndarray

    @classmethod
    def from_forward(cls, forward: Sequence[int]) -> "Permutation":
        """Validate ``forward`` as a bijection on [0, N) and build its inverse.

        Raises:
            ValidationError: If ``forward`` is not a permutation.
        """
        fwd = np.asarray(forward, dtype=np.int64).copy()
        n = fwd.size
        if fwd.ndim != 1 or n == 0:
            raise ValidationError("permutation must be a non-empty 1-D index array")
        if fwd.min() < 0 or fwd.max() >= n or np.unique(fwd).size != n:
            raise ValidationError("permutation is not a bijection on [0, N)")
        inv = np.empty_like(fwd)
        inv[fwd] = np.arange(n, dtype=np.int64)
        fwd.setflags(write=False)
        inv.setflags(write=False)
        return cls(forward=fwd, inverse=inv)

    @property
    def n(self) -> int:
        return int(self.forward.size)


def _sgn(v: int) -> int:
    return (v > 0) - (v < 0)


def _gilbert2d(x: int, y: int, ax: int, ay: int, bx: int, by: int) -> Iterator[Coord2]:
    w = abs(ax + ay)
    h = abs(bx + by)
    dax, day = _sgn(ax), _sgn(ay)
    dbx, dby = _sgn(bx), _sgn(by)

    if h == 1:
        for _ in range(w):
            yield (x, y)
            x, y = x + dax, y + day
        return
    if w == 1:
        for _ in range(h):
            yield (x, y)
            x, y = x + dbx, y + dby
        return

    ax2, ay2 = ax // 2, ay // 2
    bx2, by2 = bx // 2, by // 2
    w2 = abs(ax2 + ay2)
    h2 = abs(bx2 + by2)

    if 2 * w > 3 * h:
        if (w2 % 2) and (w > 2):
            ax2, ay2 = ax2 + dax, ay2 + day
        yield from _gilbert2d(x, y, ax2, ay2, bx, by)
        yield from _gilbert2d(x + ax2, y + ay2, ax - ax2, ay - ay2, bx, by)
    else:
        if (h2 % 2) and (h > 2):
            bx2, by2 = bx2 + dbx, by2 + dby
        yield from _gilbert2d(x, y, bx2, by2, ax2, ay2)
        yield from _gilbert2d(x + bx2, y + by2, ax, ay, bx - bx2, by - by2)
        yield from _gilbert2d(
            x + (ax - dax) + (bx2 - dbx), y + (ay - day) + (by2 - dby),
            -bx2, -by2, -(ax - ax2), -(ay - ay2),
        )


def _gilbert3d(
    x: int, y: int, z: int,
    ax: int, ay: int, az: int,
    bx: int, by: int, bz: int,
    cx: int, cy: int, cz: int,
) -> Iterator[Coord3]:
    w = abs(ax + ay + az)
    h = abs(bx + by + bz)
    d = abs(cx + cy + cz)
    dax, day, daz = _sgn(ax), _sgn(ay), _sgn(az)
    dbx, dby, dbz = _sgn(bx), _sgn(by), _sgn(bz)
    dcx, dcy, dcz = _sgn(cx), _sgn(cy), _sgn(cz)

    if h == 1 and d == 1:
        for _ in range(w):
            yield (x, y, z)
            x, y, z = x + dax, y + day, z + daz
        return
    if w == 1 and d == 1:
        for _ in range(h):
            yield (x, y, z)
            x, y, z = x + dbx, y + dby, z + dbz
        return
    if w == 1 and h == 1:
        for _ in range(d):
            yield (x, y, z)
            x, y, z = x + dcx, y + dcy, z + dcz
        return

    ax2, ay2, az2 = ax // 2, ay // 2, az // 2
    bx2, by2, bz2 = bx // 2, by // 2, bz // 2
    cx2, cy2, cz2 = cx // 2, cy // 2, cz // 2
    w2 = abs(ax2 + ay2 + az2)
    h2 = abs(bx2 + by2 + bz2)
    d2 = abs(cx2 + cy2 + cz2)

    if (w2 % 2) and (w > 2):
        ax2, ay2, az2 = ax2 + dax, ay2 + day, az2 + daz
    if (h2 % 2) and (h > 2):
        bx2, by2, bz2 = bx2 + dbx, by2 + dby, bz2 + dbz
    if (d2 % 2) and (d > 2):
        cx2, cy2, cz2 = cx2 + dcx, cy2 + dcy, cz2 + dcz

    if (2 * w > 3 * h) and (2 * w > 3 * d):
        yield from _gilbert3d(x, y, z, ax2, ay2, az2, bx, by, bz, cx, cy, cz)
        yield from _gilbert3d(
            x + ax2, y + ay2, z + az2,
            ax - ax2, ay - ay2, az - az2, bx, by, bz, cx, cy, cz,
        )
    elif 3 * h > 4 * d:
        yield from _gilbert3d(x, y, z, bx2, by2, bz2, cx, cy, cz, ax2, ay2, az2)
        yield from _gilbert3d(
            x + bx2, y + by2, z + bz2,
            ax, ay, az, bx - bx2, by - by2, bz - bz2, cx, cy, cz,
        )
        yield from _gilbert3d(
            x + (ax - dax) + (bx2 - dbx), y + (ay - day) + (by2 - dby), z + (az - daz) + (bz2 - dbz),
            -bx2, -by2, -bz2, cx, cy, cz, -(ax - ax2), -(ay - ay2), -(az - az2),
        )
    elif 3 * d > 4 * h:
        yield from _gilbert3d(x, y, z, cx2, cy2, cz2, ax2, ay2, az2, bx, by, bz)
        yield from _gilbert3d(
            x + cx2, y + cy2, z + cz2,
            ax, ay, az, bx, by, bz, cx - cx2, cy - cy2, cz - cz2,
        )
        yield from _gilbert3d(
            x + (ax - dax) + (cx2 - dcx), y + (ay - day) + (cy2 - dcy), z + (az - daz) + (cz2 - dcz),
            -cx2, -cy2, -cz2, -(ax - ax2), -(ay - ay2), -(az - az2), bx, by, bz,
        )
    else:
        yield from _gilbert3d(x, y, z, bx2, by2, bz2, cx2, cy2, cz2, ax2, ay2, az2)
        yield from _gilbert3d(
            x + bx2, y + by2, z + bz2,
            cx, cy, cz, ax2, ay2, az2, bx - bx2, by - by2, bz - bz2,
        )
        yield from _gilbert3d(
            x + (bx2 - dbx) + (cx - dcx), y + (by2 - dby) + (cy - dcy), z + (bz2 - dbz) + (cz - dcz),
            ax, ay, az, -bx2, -by2, -bz2, -(cx - cx2), -(cy - cy2), -(cz - cz2),
        )
        yield from _gilbert3d(
            x + (ax - dax) + bx2 + (cx - dcx), y + (ay - day) + by2 + (cy - dcy), z + (az - daz) + bz2 + (cz - dcz),
            -cx, -cy, -cz, -(ax - ax2), -(ay - ay2), -(az - az2), bx - bx2, by - by2, bz - bz2,
        )
        yield from _gilbert3d(
            x + (ax - dax) + (bx2 - dbx), y + (ay - day) + (by2 - dby), z + (az - daz) + (bz2 - dbz),
            -bx2, -by2, -bz2, cx2, cy2, cz2, -(ax - ax2), -(ay - ay2), -(az - az2),
        )


def _jumps(cells: np.ndarray) -> int:
    if len(cells) < 2:
        return 0
    steps = np.abs(np.diff(cells, axis=0)).sum(axis=1)
    return int(np.count_nonzero(steps != 1))


def _covers(cells: np.ndarray, extents: Sequence[int]) -> bool:
    n = int(np.prod(extents))
    if cells.shape[0] != n:
        return False
    if np.any(cells < 0) or np.any(cells >= np.asarray(extents)):
        return False
    flat = np.ravel_multi_index(tuple(cells.T), tuple(extents))
    return np.unique(flat).size == n


def _serpentine2d(rows: int, cols: int) -> np.ndarray:
    cells: List[Coord2] = []
    for r in range(rows):
        line = range(cols) if r % 2 == 0 else range(cols - 1, -1, -1)
        cells.extend((r, c) for c in line)
    return np.asarray(cells, dtype=np.int64)


def curve2d(rows: int, cols: int) -> np.ndarray:
    """Adjacent path over a rows x cols rectangle as (row, col) pairs.

    Both major-axis orientations of the generalized Hilbert curve are tried;
    if parity leaves a diagonal seam in both, a boustrophedon path is used.
    """
    wide = list(_gilbert2d(0, 0, cols, 0, 0, rows))
    tall = list(_gilbert2d(0, 0, 0, rows, cols, 0))
    candidates = [wide, tall] if cols >= rows else [tall, wide]

    for xy in candidates:
        # gilbert works in (x=col, y=row)
        cells = np.asarray([(y, x) for x, y in xy], dtype=np.int64).reshape(-1, 2)
        if _covers(cells, (rows, cols)) and _jumps(cells) == 0:
            return cells

    logger.debug(f"No adjacent gilbert path for {rows}x{cols}, using boustrophedon order")
    return _serpentine2d(rows, cols)


def _curve3d(t: int, h: int, w: int) -> Tuple[np.ndarray, int]:
    """Fewest-jump gilbert cuboid path as (t, y, x) triples, with its jump count."""
    orientations = [
        ((w, 0, 0), (0, h, 0), (0, 0, t)),
        ((0, h, 0), (w, 0, 0), (0, 0, t)),
        ((0, 0, t), (w, 0, 0), (0, h, 0)),
    ]
    best: Tuple[np.ndarray, int] = (np.empty((0, 3), dtype=np.int64), -1)
    for a, b, c in orientations:
        xyz = list(_gilbert3d(0, 0, 0, *a, *b, *c))
        cells = np.asarray([(z, y, x) for x, y, z in xyz], dtype=np.int64).reshape(-1, 3)
        if not _covers(cells, (t, h, w)):
            continue
        jumps = _jumps(cells)
        if best[1] < 0 or jumps < best[1]:
            best = (cells, jumps)
        if jumps == 0:
            break
    return best


def _frames2d(grid: TokenGrid) -> np.ndarray:
    frame = curve2d(grid.h, grid.w)
    parts = []
    for f in range(grid.t):
        cells = frame if f % 2 == 0 else frame[::-1]
        parts.append(np.column_stack([np.full(len(cells), f, dtype=np.int64), cells]))
    return np.concatenate(parts, axis=0)


def _reduced(grid: TokenGrid) -> np.ndarray:
    """Path for grids with at least one unit extent, via the 2D curve."""
    extents = grid.shape
    live = [axis for axis, e in enumerate(extents) if e > 1]
    cells = np.zeros((grid.n, 3), dtype=np.int64)
    if len(live) == 1:
        cells[:, live[0]] = np.arange(grid.n)
    elif len(live) == 2:
        plane = curve2d(extents[live[0]], extents[live[1]])
        cells[:, live[0]] = plane[:, 0]
        cells[:, live[1]] = plane[:, 1]
    return cells


@lru_cache(maxsize=128)
def _order_cells(t: int, h: int, w: int, mode: str) -> Tuple[np.ndarray, int]:
    grid = TokenGrid(t, h, w)
    if mode == "off":
        return grid.coords(), 0
    if min(t, h, w) == 1:
        cells = _reduced(grid)
    elif mode == "2d":
        cells = _frames2d(grid)
    else:
        cells, jumps = _curve3d(t, h, w)
        if jumps < 0:
            logger.warning(f"3D gilbert failed to cover {grid.shape}, using per-frame curves")
            cells = _frames2d(grid)
        elif jumps > 0:
            logger.debug(f"3D gilbert over {grid.shape} has {jumps} seam jump(s)")
    return cells, _jumps(cells)


def gilbert_order(grid: TokenGrid, mode: str = GILBERT_MODE) -> Permutation:
    """Curve order of the grid's tokens.

    Args:
        grid: Token grid.
        mode: "3d" cuboid curve, "2d" per-frame curves visited frame by
            frame (every other frame reversed), or "off" for raster order.

    Returns:
        Permutation from curve position to raster index.

    Raises:
        ValidationError: On an unknown mode.
    """
    if mode not in GILBERT_MODES:
        raise ValidationError(f"gilbert mode must be one of {GILBERT_MODES}, got {mode}")
    cells, _ = _order_cells(grid.t, grid.h, grid.w, mode)
    forward = np.ravel_multi_index(tuple(cells.T), grid.shape)
    return Permutation.from_forward(forward)


def raster_order(grid: TokenGrid) -> Permutation:
    return Permutation.from_forward(np.arange(grid.n))


def _check_rows(x: np.ndarray, p: Permutation) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim < 1 or x.shape[0] != p.n:
        raise ValidationError(f"expected {p.n} rows, got shape {x.shape}")
    return x


def apply_permutation(x: np.ndarray, p: Permutation) -> np.ndarray:
    """Reorder rows from raster order into curve order."""
    return _check_rows(x, p)[p.forward]


def undo_permutation(x: np.ndarray, p: Permutation) -> np.ndarray:
    """Inverse of ``apply_permutation``; exact, since it only moves rows."""
    return _check_rows(x, p)[p.inverse]


def curve_cells(p: Permutation, grid: TokenGrid) -> np.ndarray:
    """(N, 3) grid coordinates of the tokens in curve order."""
    if p.n != grid.n:
        raise ValidationError(f"permutation length {p.n} does not match grid size {grid.n}")
    return grid.coords()[p.forward]


def count_seam_jumps(p: Permutation, grid: TokenGrid) -> int:
    """Consecutive curve positions that are not grid neighbours."""
    return _jumps(curve_cells(p, grid))


def mean_intra_block_distance(p: Permutation, grid: TokenGrid, b: int) -> float:
    """Mean pairwise Manhattan distance inside each run of ``b`` curve positions,
    averaged over blocks holding at least two tokens."""
    if b < 1:
        raise ValidationError(f"block size must be >= 1, got {b}")
    cells = curve_cells(p, grid)
    means = []
    for start in range(0, len(cells), b):
        block = cells[start:start + b]
        m = len(block)
        if m < 2:
            continue
        dist = np.abs(block[:, None, :] - block[None, :, :]).sum(axis=2)
        means.append(dist.sum() / (m * (m - 1)))
    return float(np.mean(means)) if means else 0.0
