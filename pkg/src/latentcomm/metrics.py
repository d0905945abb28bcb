"""Image quality metrics: PSNR and SSIM on the 8-bit scale.

Both metrics expect arrays already mapped to [0, 255]; use
``to_uint8_scale`` to convert the pipeline's [-1, 1] images. PSNR of a
perfect reconstruction is capped at 100 dB so sweep aggregates stay
finite. SSIM follows the classic single-scale formulation: 11x11
Gaussian window (sigma 1.5), stabilizers C1=(0.01*255)^2 and
C2=(0.03*255)^2, computed on the luminance obtained as the unweighted
channel mean, averaged over all fully contained windows.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_C1 = (0.01 * 255.0) ** 2
_C2 = (0.03 * 255.0) ** 2


class MetricShapeError(ValueError):
    """Metric inputs have incompatible or unusable shapes."""


@dataclass(frozen=True)
class MetricResult:
    psnr: float
    ssim: float
    mse: float


def to_uint8_scale(x: np.ndarray) -> np.ndarray:
    """Map images from [-1, 1] to the continuous 8-bit scale [0, 255]."""
    return (np.asarray(x, dtype=np.float64) + 1.0) * 127.5


def mse(x: np.ndarray, y: np.ndarray) -> float:
    """Mean squared error between two same-shaped arrays."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricShapeError(f"shape mismatch: {x.shape} vs {y.shape}")
    return float(np.mean((x - y) ** 2))


def psnr(x: np.ndarray, y: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB on the 8-bit scale.

    10*log10(255^2 / MSE); a zero-MSE pair returns the 100 dB cap.
    """
    err = mse(x, y)
    if err == 0.0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(255.0**2 / err)))


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _ssim_single(x: np.ndarray, y: np.ndarray) -> float:
    """SSIM of one grayscale image pair over valid (fully contained) windows."""
    h, w = x.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise MetricShapeError(
            f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    kernel = _gaussian_kernel()
    xw = sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW))
    yw = sliding_window_view(y, (SSIM_WINDOW, SSIM_WINDOW))
    mu_x = np.einsum("ijkl,kl->ij", xw, kernel)
    mu_y = np.einsum("ijkl,kl->ij", yw, kernel)
    xx = np.einsum("ijkl,kl->ij", xw * xw, kernel)
    yy = np.einsum("ijkl,kl->ij", yw * yw, kernel)
    xy = np.einsum("ijkl,kl->ij", xw * yw, kernel)
    var_x = xx - mu_x**2
    var_y = yy - mu_y**2
    cov = xy - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + _C1) * (2.0 * cov + _C2)
    den = (mu_x**2 + mu_y**2 + _C1) * (var_x + var_y + _C2)
    return float(np.mean(num / den))


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Structural similarity on the 8-bit scale.

    Accepts (H, W), (H, W, C) or (N, H, W, C); color images are reduced
    to luminance by the unweighted channel mean, batches are averaged
    over per-image values.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricShapeError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 4:
        return float(np.mean([ssim(xi, yi) for xi, yi in zip(x, y)]))
    if x.ndim == 3:
        x = x.mean(axis=-1)
        y = y.mean(axis=-1)
    if x.ndim != 2:
        raise MetricShapeError(f"unsupported image rank {x.ndim}")
    return _ssim_single(x, y)


def compute_metrics(x_ref: np.ndarray, x_cmp: np.ndarray) -> MetricResult:
    """PSNR/SSIM/MSE of a reconstruction against its original.

    Inputs are images in [-1, 1]; the comparison happens on the 8-bit
    scale per the metric conventions above.
    """
    a = to_uint8_scale(x_ref)
    b = to_uint8_scale(x_cmp)
    return MetricResult(psnr=psnr(a, b), ssim=ssim(a, b), mse=mse(a, b))
