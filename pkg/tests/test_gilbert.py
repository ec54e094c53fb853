import numpy as np
import pytest

from src.attention.gilbert import (
    Permutation,
    TokenGrid,
    apply_permutation,
    count_seam_jumps,
    curve2d,
    curve_cells,
    gilbert_order,
    mean_intra_block_distance,
    raster_order,
    undo_permutation,
)
from src.utils.errors import ValidationError


def is_bijection(p: Permutation, n: int) -> bool:
    return p.n == n and np.array_equal(np.sort(p.forward), np.arange(n))


class TestCurve2d:
    def test_every_small_rectangle_is_an_adjacent_cover(self):
        for rows in range(1, 33):
            for cols in range(1, 33):
                cells = curve2d(rows, cols)
                assert cells.shape == (rows * cols, 2)
                flat = cells[:, 0] * cols + cells[:, 1]
                assert np.unique(flat).size == rows * cols, (rows, cols)
                if len(cells) > 1:
                    steps = np.abs(np.diff(cells, axis=0)).sum(axis=1)
                    assert np.all(steps == 1), (rows, cols)


class TestGilbertOrder:
    @pytest.mark.parametrize("mode", ["3d", "2d", "off"])
    def test_bijection_on_small_grids(self, mode):
        for t in range(1, 7):
            for h in range(1, 7):
                for w in range(1, 7):
                    grid = TokenGrid(t, h, w)
                    assert is_bijection(gilbert_order(grid, mode), grid.n), (t, h, w, mode)

    @pytest.mark.parametrize("mode", ["3d", "2d"])
    @pytest.mark.parametrize("shape", [(8, 16, 16), (7, 13, 15), (8, 16, 9), (1, 16, 16), (8, 1, 16), (5, 11, 16)])
    def test_bijection_up_to_full_grid(self, mode, shape):
        grid = TokenGrid(*shape)
        perm = gilbert_order(grid, mode)
        assert is_bijection(perm, grid.n), (shape, mode)
        np.testing.assert_array_equal(perm.inverse[perm.forward], np.arange(grid.n))

    def test_2d_mode_has_no_seam_jumps(self):
        for shape in [(3, 5, 7), (4, 8, 8), (2, 6, 9), (5, 1, 7)]:
            grid = TokenGrid(*shape)
            assert count_seam_jumps(gilbert_order(grid, "2d"), grid) == 0, shape

    def test_off_is_raster(self):
        grid = TokenGrid(2, 3, 4)
        np.testing.assert_array_equal(gilbert_order(grid, "off").forward, raster_order(grid).forward)

    def test_single_token(self):
        grid = TokenGrid(1, 1, 1)
        np.testing.assert_array_equal(gilbert_order(grid).forward, [0])

    def test_unknown_mode(self):
        with pytest.raises(ValidationError):
            gilbert_order(TokenGrid(2, 2, 2), "4d")

    def test_bad_grid(self):
        with pytest.raises(ValidationError):
            TokenGrid(0, 4, 4)


class TestLocality:
    @pytest.mark.parametrize("h,w,b", [(4, 4, 4), (8, 8, 4), (8, 16, 16), (16, 16, 16), (16, 8, 16)])
    def test_blocks_tighter_than_raster(self, h, w, b):
        grid = TokenGrid(1, h, w)
        curve = mean_intra_block_distance(gilbert_order(grid, "2d"), grid, b)
        raster = mean_intra_block_distance(raster_order(grid), grid, b)
        assert curve < raster

    def test_curve_cells_follow_forward(self):
        grid = TokenGrid(1, 2, 2)
        p = gilbert_order(grid, "2d")
        np.testing.assert_array_equal(curve_cells(p, grid), grid.coords()[p.forward])


class TestPermutationApply:
    def test_apply_then_undo(self, rng):
        grid = TokenGrid(3, 5, 6)
        p = gilbert_order(grid)
        x = rng.standard_normal((grid.n, 4)).astype(np.float32)
        np.testing.assert_array_equal(undo_permutation(apply_permutation(x, p), p), x)

    def test_row_count_checked(self):
        p = gilbert_order(TokenGrid(1, 2, 2))
        with pytest.raises(ValidationError):
            apply_permutation(np.zeros((5, 2)), p)

    def test_invalid_forward(self):
        with pytest.raises(ValidationError):
            Permutation.from_forward([0, 0, 1])

    def test_arrays_are_read_only(self):
        p = Permutation.from_forward([1, 0])
        with pytest.raises(ValueError):
            p.forward[0] = 1
