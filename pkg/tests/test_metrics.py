import numpy as np
import pytest

from latentcomm.metrics import (MetricShapeError, compute_metrics, mse, psnr, ssim,
                                to_uint8_scale, _gaussian_kernel, SSIM_WINDOW)


def checker_image(size=32, cell=4):
    yy, xx = np.mgrid[0:size, 0:size]
    return 255.0 * ((xx // cell + yy // cell) % 2)


def naive_ssim_oracle(x, y):
    """Independent SSIM route: explicit python loops over valid windows."""
    kernel = _gaussian_kernel()
    h, w = x.shape
    r = SSIM_WINDOW
    values = []
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    for i in range(h - r + 1):
        for j in range(w - r + 1):
            wx = x[i:i + r, j:j + r]
            wy = y[i:i + r, j:j + r]
            mx = (wx * kernel).sum()
            my = (wy * kernel).sum()
            vx = (wx * wx * kernel).sum() - mx**2
            vy = (wy * wy * kernel).sum() - my**2
            cxy = (wx * wy * kernel).sum() - mx * my
            values.append(((2 * mx * my + c1) * (2 * cxy + c2))
                          / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(values))


def test_psnr_cap_for_identical_images():
    x = np.random.default_rng(0).uniform(0, 255, (16, 16, 3))
    assert psnr(x, x) == 100.0


def test_psnr_zero_for_full_scale_error():
    black = np.zeros((16, 16, 3))
    white = np.full((16, 16, 3), 255.0)
    assert psnr(black, white) == pytest.approx(0.0, abs=1e-12)


def test_psnr_one_gray_level():
    x = np.full((16, 16, 3), 100.0)
    assert psnr(x, x + 1.0) == pytest.approx(48.1308, abs=1e-3)


def test_psnr_and_ssim_are_symmetric():
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 255, (24, 24, 3))
    y = rng.uniform(0, 255, (24, 24, 3))
    assert psnr(x, y) == psnr(y, x)
    assert ssim(x, y) == ssim(y, x)


def test_ssim_self_similarity_is_one():
    x = np.random.default_rng(2).uniform(0, 255, (32, 32, 3))
    assert abs(ssim(x, x) - 1.0) < 1e-9


def test_ssim_matches_independent_window_oracle():
    rng = np.random.default_rng(3)
    x = rng.uniform(0, 255, (20, 20))
    y = np.clip(x + rng.normal(0, 20, x.shape), 0, 255)
    assert ssim(x, y) == pytest.approx(naive_ssim_oracle(x, y), abs=1e-10)


def test_ssim_texture_vs_flat_regression():
    x = np.repeat(checker_image()[..., None], 3, axis=-1)
    y = np.full_like(x, 128.0)
    value = ssim(x, y)
    # frozen after first computation with the window oracle
    assert value == pytest.approx(0.0036841952, abs=1e-6)
    assert value < 0.5


def test_psnr_strictly_decreases_with_noise_variance():
    rng = np.random.default_rng(4)
    x = rng.uniform(0, 255, (32, 32, 3))
    means = []
    for var in (1.0, 4.0, 16.0):
        vals = []
        for seed in range(10):
            noise = np.random.default_rng(seed).normal(0, np.sqrt(var), x.shape)
            vals.append(psnr(x, x + noise))
        means.append(np.mean(vals))
    assert means[0] > means[1] > means[2]


def test_ssim_prefers_shift_over_shuffle():
    x = np.repeat(checker_image()[..., None], 3, axis=-1)
    shifted = np.clip(x + 5.0, 0, 255)
    rng = np.random.default_rng(5)
    flat = x.reshape(-1, 3).copy()
    rng.shuffle(flat, axis=0)
    shuffled = flat.reshape(x.shape)
    assert ssim(x, shifted) > ssim(x, shuffled)


def test_shape_mismatch_raises():
    with pytest.raises(MetricShapeError):
        psnr(np.zeros((8, 8)), np.zeros((9, 8)))
    with pytest.raises(MetricShapeError):
        ssim(np.zeros((16, 16)), np.zeros((16, 17)))


def test_ssim_rejects_images_smaller_than_window():
    small = np.zeros((8, 8))
    with pytest.raises(MetricShapeError):
        ssim(small, small)


def test_batch_inputs_average_per_image():
    rng = np.random.default_rng(6)
    x = rng.uniform(0, 255, (3, 16, 16, 3))
    y = np.clip(x + rng.normal(0, 10, x.shape), 0, 255)
    per_image = [ssim(x[i], y[i]) for i in range(3)]
    assert ssim(x, y) == pytest.approx(np.mean(per_image), abs=1e-12)


def test_compute_metrics_maps_to_8bit_scale():
    x = np.random.default_rng(7).uniform(-1, 1, (16, 16, 3)).astype(np.float32)
    result = compute_metrics(x, x)
    assert result.psnr == 100.0
    assert result.ssim == pytest.approx(1.0, abs=1e-9)
    assert result.mse == 0.0
    np.testing.assert_allclose(to_uint8_scale(np.array([-1.0, 1.0])), [0.0, 255.0])
    assert mse(np.zeros(4), np.full(4, 2.0)) == 4.0
