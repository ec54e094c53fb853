"""PSNR and SSIM on tensors and synthetic frames."""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.utils.errors import ValidationError

SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValidationError("metrics need non-empty inputs")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray, peak: float) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` when the inputs match."""
    if not peak > 0:
        raise ValidationError(f"peak must be positive, got {peak}")
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean structural similarity over all 8x8 windows (stride 1).

    Images smaller than the window use one window clipped to the image.
    Means, variances and covariance are unweighted population moments.

    Args:
        a: (H, W) image.
        b: (H, W) image.
        peak: Dynamic range; sets C1=(0.01*peak)^2 and C2=(0.03*peak)^2.

    Returns:
        SSIM in [-1, 1].
    """
    if not peak > 0:
        raise ValidationError(f"peak must be positive, got {peak}")
    a, b = _check_pair(a, b)
    if a.ndim != 2:
        raise ValidationError(f"ssim expects (H, W) images, got {a.shape}")

    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    win = (min(SSIM_WINDOW, a.shape[0]), min(SSIM_WINDOW, a.shape[1]))

    wa = sliding_window_view(a, win)
    wb = sliding_window_view(b, win)
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b

    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.clip(np.mean(num / den), -1.0, 1.0))


def relative_error(approx: np.ndarray, reference: np.ndarray) -> float:
    """``||approx - reference|| / ||reference||`` in Frobenius norm."""
    approx, reference = _check_pair(approx, reference)
    denom = float(np.linalg.norm(reference))
    diff = float(np.linalg.norm(approx - reference))
    if denom == 0.0:
        return 0.0 if diff == 0.0 else math.inf
    return diff / denom
