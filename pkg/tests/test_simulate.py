"""Simulator tests: conversions, projection, reconstruction, MA pairs, datasets."""

import math

import numpy as np
import pytest

from ctmar.simulate import (
    HU_MAX,
    HU_MIN,
    PhantomImage,
    SimParams,
    Sinogram,
    fbp_reconstruct,
    hu_to_mu,
    jaw_phantom,
    load_manifest,
    load_pair,
    make_dataset,
    mu_to_hu,
    radon_forward,
    random_metal_mask,
    simulate_ma_pair,
    smooth_phantom,
)


def psnr(a, b, data_range):
    mse = float(((a - b) ** 2).mean())
    return 10.0 * math.log10(data_range ** 2 / mse)


class TestHuToMu:
    def test_air(self):
        img = PhantomImage(np.full((4, 4), -1000.0), spacing=1.0)
        np.testing.assert_allclose(hu_to_mu(img), 0.0)

    def test_water(self):
        img = PhantomImage(np.zeros((4, 4)), spacing=1.0)
        np.testing.assert_allclose(hu_to_mu(img), 0.0192)

    def test_window_top(self):
        img = PhantomImage(np.full((2, 2), 2800.0), spacing=1.0)
        np.testing.assert_allclose(hu_to_mu(img), 0.0192 * 3.8)

    def test_clipping_applies_before_conversion(self):
        img = PhantomImage(np.array([[30000.0, -5000.0]] * 2), spacing=1.0)
        mu = hu_to_mu(img)
        np.testing.assert_allclose(mu[:, 0], 0.0192 * 3.8)
        np.testing.assert_allclose(mu[:, 1], 0.0)
        assert (mu >= 0).all()


class TestRadonForward:
    def test_zero_image(self):
        sino = radon_forward(np.zeros((32, 32)), SimParams(n_angles=16))
        np.testing.assert_array_equal(sino.values, 0.0)

    def test_rotational_symmetry_of_centered_disk(self):
        size = 97
        ys, xs = np.mgrid[0:size, 0:size]
        c = (size - 1) / 2
        r = np.sqrt((ys - c) ** 2 + (xs - c) ** 2)
        disk = 0.02 / (1.0 + np.exp((r - 22.0) / 3.0))   # flat core, smooth edge
        sino = radon_forward(disk, SimParams(n_angles=24), 1.0)
        mean_prof = sino.values.mean(axis=0)
        dev = np.abs(sino.values - mean_prof).max() / mean_prof.max()
        assert dev < 1e-3

    def test_single_pixel_mass_conservation(self):
        size, mu_val, spacing = 65, 0.5, 2.5
        mu = np.zeros((size, size))
        mu[32, 32] = mu_val
        sino = radon_forward(mu, SimParams(n_angles=32), spacing)
        mass = sino.values.sum(axis=1)
        expected = mu_val * spacing ** 2 / spacing
        assert np.abs(mass / expected - 1.0).max() < 0.02

    def test_linearity(self):
        rng = np.random.default_rng(0)
        a = rng.random((48, 48))
        b = rng.random((48, 48))
        p = SimParams(n_angles=12)
        combo = radon_forward(2.0 * a + 3.0 * b, p).values
        parts = 2.0 * radon_forward(a, p).values + 3.0 * radon_forward(b, p).values
        np.testing.assert_allclose(combo, parts, rtol=1e-6, atol=1e-12)

    def test_non_square_rejected(self):
        with pytest.raises(ValueError):
            radon_forward(np.zeros((8, 16)), SimParams())

    def test_nonnegative_for_nonnegative_input(self):
        rng = np.random.default_rng(1)
        sino = radon_forward(rng.random((32, 32)), SimParams(n_angles=16))
        assert (sino.values >= 0).all()


class TestFBP:
    def test_zero_sinogram(self):
        sino = Sinogram(values=np.zeros((16, 40)), spacing=1.0)
        np.testing.assert_array_equal(fbp_reconstruct(sino, 24, 24), 0.0)

    def test_linearity(self):
        rng = np.random.default_rng(2)
        s1 = rng.random((16, 40))
        s2 = rng.random((16, 40))
        left = fbp_reconstruct(Sinogram(2.0 * s1 + 0.5 * s2, 1.0), 24, 24)
        right = (2.0 * fbp_reconstruct(Sinogram(s1, 1.0), 24, 24)
                 + 0.5 * fbp_reconstruct(Sinogram(s2, 1.0), 24, 24))
        np.testing.assert_allclose(left, right, atol=1e-10)

    def test_roundtrip_psnr_on_smooth_phantom(self):
        phantom = smooth_phantom(128, seed=3)
        mu = hu_to_mu(phantom)
        sino = radon_forward(mu, SimParams(n_angles=360), phantom.spacing)
        recon = fbp_reconstruct(sino, 128, 128)
        assert psnr(mu_to_hu(recon), phantom.pixels, HU_MAX - HU_MIN) >= 30.0

    def test_constant_disk_level_recovered(self):
        size = 64
        ys, xs = np.mgrid[0:size, 0:size]
        c = (size - 1) / 2
        disk = (((ys - c) ** 2 + (xs - c) ** 2) <= 20 ** 2) * 0.02
        sino = radon_forward(disk, SimParams(n_angles=180), 1.25)
        recon = fbp_reconstruct(sino, size, size)
        inner = ((ys - c) ** 2 + (xs - c) ** 2) <= 14 ** 2
        assert abs(recon[inner].mean() - 0.02) < 0.0005


class TestSimulateMAPair:
    def test_no_metal_no_hardening_is_roundtrip(self):
        phantom = smooth_phantom(64, seed=4)
        params = SimParams(beam_hardening=0.0)
        ma, clean = simulate_ma_pair(phantom, np.zeros((64, 64), bool), params)
        assert clean is phantom
        assert psnr(ma.pixels, clean.pixels, HU_MAX - HU_MIN) >= 30.0

    def test_metal_produces_streaks_outside_mask(self):
        rng = np.random.default_rng(5)
        phantom = jaw_phantom(64, rng)
        mask = random_metal_mask(phantom, rng)
        ma, clean = simulate_ma_pair(phantom, mask, SimParams())
        diff = ma.pixels - clean.pixels
        assert diff[~mask].std() > 0.0
        assert psnr(ma.pixels, clean.pixels, HU_MAX - HU_MIN) < 35.0

    def test_mask_pixels_saturate_window(self):
        rng = np.random.default_rng(6)
        phantom = jaw_phantom(64, rng)
        mask = random_metal_mask(phantom, rng)
        ma, _ = simulate_ma_pair(phantom, mask, SimParams())
        assert (ma.pixels[mask] >= 2800.0).all()
        assert ma.pixels.max() <= HU_MAX
        assert ma.pixels.min() >= HU_MIN

    def test_undersized_mask_rejected(self):
        phantom = smooth_phantom(64, seed=7)
        mask = np.zeros((64, 64), bool)
        mask[30:33, 30] = True          # 3 px: too small to count as an implant
        with pytest.raises(ValueError):
            simulate_ma_pair(phantom, mask, SimParams())

    def test_mask_shape_mismatch_rejected(self):
        phantom = smooth_phantom(64, seed=8)
        with pytest.raises(ValueError):
            simulate_ma_pair(phantom, np.zeros((32, 32), bool), SimParams())


class TestPhantoms:
    def test_jaw_phantom_window_and_teeth(self):
        rng = np.random.default_rng(9)
        ph = jaw_phantom(64, rng)
        assert ph.pixels.shape == (64, 64)
        assert ph.pixels.min() >= HU_MIN and ph.pixels.max() <= HU_MAX
        assert (ph.pixels > 1200.0).sum() > 20      # bright tooth structures exist

    def test_metal_mask_sizes(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            ph = jaw_phantom(64, rng)
            mask = random_metal_mask(ph, rng)
            assert 10 <= mask.sum() <= 400


class TestMakeDataset:
    def test_file_count_and_manifest(self, tmp_path):
        out = tmp_path / "ds"
        manifest = make_dataset(4, 32, seed=1, out_dir=out)
        tensors = sorted(p.name for p in out.glob("*.mtsr"))
        assert len(tensors) == 8
        assert len(manifest.pairs) == 4
        loaded = load_manifest(out)
        assert [vars(p) for p in loaded.pairs] == [vars(p) for p in manifest.pairs]
        splits = {p.split for p in loaded.pairs}
        assert splits <= {"train", "val", "test"}
        assert all(p.mask_pixel_count >= 10 for p in loaded.pairs)

    def test_determinism_byte_identical(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        make_dataset(3, 32, seed=9, out_dir=a)
        make_dataset(3, 32, seed=9, out_dir=b)
        for pa in sorted(a.iterdir()):
            pb = b / pa.name
            assert pa.read_bytes() == pb.read_bytes(), pa.name

    def test_ma_slices_meet_metal_criterion(self, tmp_path):
        out = tmp_path / "ds"
        manifest = make_dataset(3, 32, seed=2, out_dir=out)
        for record in manifest.pairs:
            ma, _clean = load_pair(out, record)[0], None
            assert (ma >= 2800.0).sum() >= 10

    def test_indivisible_size_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            make_dataset(2, 30, seed=0, out_dir=tmp_path / "x")

    def test_load_pair_returns_ma_then_clean(self, tmp_path):
        out = tmp_path / "ds"
        manifest = make_dataset(1, 32, seed=3, out_dir=out)
        ma, clean = load_pair(out, manifest.pairs[0])
        assert ma.shape == clean.shape == (32, 32)
        # the MA slice saturates at the implant, the clean slice need not
        assert (ma >= 2800.0).sum() >= 10
