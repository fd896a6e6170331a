"""PSNR/SSIM tests against direct-formula references."""

import math

import numpy as np
import pytest

from ctmar.metrics import PSNR_CAP_DB, psnr, ssim


def gaussian_window_reference(size=11, sigma=1.5):
    win = np.empty((size, size))
    half = (size - 1) / 2.0
    for i in range(size):
        for j in range(size):
            win[i, j] = math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma ** 2))
    return win / win.sum()


def ssim_reference(a, b, data_range):
    """Independent direct-formula SSIM: explicit window loops."""
    win = gaussian_window_reference()
    k = win.shape[0]
    h, w = a.shape
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    values = []
    for i in range(h - k + 1):
        for j in range(w - k + 1):
            pa = a[i:i + k, j:j + k]
            pb = b[i:i + k, j:j + k]
            mu_a = (win * pa).sum()
            mu_b = (win * pb).sum()
            var_a = (win * pa * pa).sum() - mu_a ** 2
            var_b = (win * pb * pb).sum() - mu_b ** 2
            cov = (win * pa * pb).sum() - mu_a * mu_b
            values.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                          / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return float(np.mean(values))


class TestPSNR:
    def test_identical_images_capped(self):
        x = np.random.default_rng(0).random((8, 8))
        assert psnr(x, x, 1.0) == PSNR_CAP_DB

    def test_constant_offset_closed_form(self):
        a = np.full((16, 16), 100.0)
        b = np.full((16, 16), 100.0 + 380.0)     # data_range / 10
        assert psnr(a, b, 3800.0) == pytest.approx(20.0, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((12, 12)), rng.random((12, 12))
        assert psnr(a, b, 1.0) == psnr(b, a, 1.0)

    def test_monotone_in_noise(self):
        rng = np.random.default_rng(2)
        base = rng.random((32, 32))
        noise = rng.normal(size=(32, 32))
        values = [psnr(base, base + amp * noise, 1.0) for amp in (0.01, 0.05, 0.2)]
        assert values[0] > values[1] > values[2]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)), 1.0)


class TestSSIM:
    def test_self_similarity_is_one(self):
        x = np.random.default_rng(3).random((16, 16))
        assert ssim(x, x, 1.0) == pytest.approx(1.0, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert ssim(a, b, 1.0) == pytest.approx(ssim(b, a, 1.0), abs=1e-12)

    def test_matches_direct_formula_reference(self):
        rng = np.random.default_rng(5)
        for _ in range(3):
            a = rng.random((24, 24)) * 3800.0 - 1000.0
            b = a + rng.normal(size=(24, 24)) * 150.0
            got = ssim(a, b, 3800.0)
            ref = ssim_reference(a, b, 3800.0)
            assert got == pytest.approx(ref, abs=1e-6)

    def test_degrades_with_noise(self):
        rng = np.random.default_rng(6)
        base = rng.random((32, 32))
        noisy = base + rng.normal(size=(32, 32)) * 0.3
        assert ssim(base, noisy, 1.0) < ssim(base, base, 1.0)

    def test_small_image_rejected(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)), 1.0)
