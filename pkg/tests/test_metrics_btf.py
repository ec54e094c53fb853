import math

import numpy as np
import pandas as pd
import pytest

from src.tensor.btf import (
    read_btf,
    read_permutation_csv,
    write_btf,
    write_matrix_csv,
    write_permutation_csv,
)
from src.tensor.metrics import psnr, relative_error, ssim
from src.utils.errors import ValidationError


class TestPsnr:
    def test_identical_is_infinite(self):
        x = np.ones((4, 4))
        assert psnr(x, x, 1.0) == math.inf

    def test_known_value(self):
        a = np.zeros((10, 10))
        b = np.full((10, 10), 0.1)
        assert psnr(a, b, 1.0) == pytest.approx(20.0)

    def test_bad_peak(self):
        with pytest.raises(ValidationError):
            psnr(np.ones(2), np.ones(2), 0.0)


class TestSsim:
    def test_identical_is_one(self, rng):
        x = rng.random((16, 16))
        assert ssim(x, x, 1.0) == pytest.approx(1.0)

    def test_small_image_single_window(self, rng):
        x = rng.random((4, 5))
        assert ssim(x, x, 1.0) == pytest.approx(1.0)

    def test_noise_lowers_score(self, rng):
        x = rng.random((16, 16))
        assert ssim(x, x + 0.3 * rng.standard_normal((16, 16)), 1.0) < 0.9

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            ssim(np.ones((4, 4)), np.ones((4, 5)))


class TestRelativeError:
    def test_zero_for_equal(self, rng):
        x = rng.standard_normal((3, 3))
        assert relative_error(x, x) == 0.0

    def test_known_value(self):
        assert relative_error(np.array([3.0, 4.0]) * 1.1, np.array([3.0, 4.0])) == pytest.approx(0.1)


class TestBtf:
    def test_write_read(self, tmp_path, rng):
        x = rng.standard_normal((3, 4, 5)).astype(np.float32)
        path = str(tmp_path / "x.btf")
        write_btf(path, x)
        np.testing.assert_array_equal(read_btf(path), x)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "m.btf"
        write_btf(str(path), np.zeros((2, 3), dtype=np.float32))
        raw = path.read_bytes()
        assert raw[:4] == b"BTF1"
        assert np.frombuffer(raw[4:16], dtype="<u4").tolist() == [2, 2, 3]
        assert len(raw) == 16 + 4 * 6

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.btf"
        path.write_bytes(b"NOPE" + b"\x00" * 12)
        with pytest.raises(ValidationError):
            read_btf(str(path))

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.btf"
        write_btf(str(path), np.ones((4, 4), dtype=np.float32))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ValidationError):
            read_btf(str(path))

    def test_missing(self, tmp_path):
        with pytest.raises(ValidationError):
            read_btf(str(tmp_path / "missing.btf"))


class TestCsvExports:
    def test_permutation(self, tmp_path):
        path = str(tmp_path / "perm.csv")
        write_permutation_csv(path, [2, 0, 1])
        np.testing.assert_array_equal(read_permutation_csv(path), [2, 0, 1])

    def test_heatmap(self, tmp_path):
        path = str(tmp_path / "heat.csv")
        m = np.array([[0.5, 0.25], [0.0, 1.0]])
        write_matrix_csv(path, m)
        np.testing.assert_allclose(pd.read_csv(path, header=None).to_numpy(), m)
