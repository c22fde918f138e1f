import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import quad
from scipy.special import expit

from flickerlens.apm import (
    ApmRegressor, SoftMaskParams, apm_coordinate_gradient, apm_features, crop_array, crop_coordinate_grad,
    initial_layout, mask_crop, regress_parts, soft_mask, soft_mask_array, soft_mask_grad, theta_margin,
)
from flickerlens.errors import ConfigError, ShapeError
from flickerlens.ingest import Clip
from flickerlens.preprocess import residual_clip
from flickerlens.spectrum import SpectrumVolume, band_energy_array, extract_spectrum
from flickerlens.synthdata import Flicker, SynthSpec, generate
from flickerlens.tensor_core import FeatureTensor

seeds = st.integers(0, 2**31 - 1)


def volume(a):
    return SpectrumVolume(FeatureTensor(("bin", "height", "width"), a))


def flicker_volume(h, w, cy, cx, r=6, seed=0):
    spec = SynthSpec(height=h, width=w, motion="static", noise_sigma=0.0, seed=seed,
                     flicker=Flicker((cy, cx), radius=r))
    clip, _ = generate(spec)
    return extract_spectrum(residual_clip(clip))


class TestSoftMask:
    def test_centre_value(self):
        m = soft_mask_array(SoftMaskParams(100, 100), 224, 224)
        assert abs(m[100, 100] - (expit(440) - expit(-440)) ** 2) <= 1e-12
        assert abs(m[100, 100] - 1) <= 1e-12

    def test_far_outside(self):
        m = soft_mask_array(SoftMaskParams(60, 60), 224, 224)
        assert m[60 + 44 + 50, 60 + 44 + 50] <= 1e-20

    def test_mass(self):
        m = soft_mask_array(SoftMaskParams(111.3, 97.8), 224, 224)
        assert abs(m.sum() - 88**2) <= 0.01 * 88**2

    def test_one_axis_sum_matches_integral(self):
        # the ramp integrates to 2 theta over the real line; the integer-grid sum agrees closely
        ramp = lambda x: expit(10 * (x + 44)) - expit(10 * (x - 44))
        integral, _ = quad(ramp, -60, 60, points=[-44, 44], limit=200)
        row = soft_mask_array(SoftMaskParams(112.0, 112.0), 224, 224)[112]
        assert abs(integral - 88) < 1e-9
        assert abs(row.sum() - integral) < 1e-6

    def test_a_moves_columns(self):
        m = soft_mask_array(SoftMaskParams(a=20, b=50, theta=5), 64, 80)
        ys, xs = np.nonzero(m > 0.5)
        assert xs.min() == 16 and xs.max() == 24 and ys.min() == 46 and ys.max() == 54

    @given(st.floats(30, 150), st.floats(30, 150), st.integers(1, 20))
    def test_translation_equivariance(self, a, b, d):
        base = soft_mask_array(SoftMaskParams(a, b), 224, 224)
        moved = soft_mask_array(SoftMaskParams(a + d, b), 224, 224)
        assert np.max(np.abs(moved[:, d:] - base[:, :-d])) <= 1e-12

    @given(st.floats(60, 160), st.floats(60, 160))
    def test_analytic_grad_matches_fd(self, a, b):
        h = 1e-3
        da, db = soft_mask_grad(SoftMaskParams(a, b), 224, 224)
        fa = (soft_mask_array(SoftMaskParams(a + h, b), 224, 224) - soft_mask_array(SoftMaskParams(a - h, b), 224, 224)) / (2 * h)
        fb = (soft_mask_array(SoftMaskParams(a, b + h), 224, 224) - soft_mask_array(SoftMaskParams(a, b - h), 224, 224)) / (2 * h)
        assert np.max(np.abs(da - fa)) <= 1e-4 * np.max(np.abs(fa))
        assert np.max(np.abs(db - fb)) <= 1e-4 * np.max(np.abs(fb))

    @pytest.mark.parametrize("kw", [dict(theta=0), dict(scale=-1), dict(a=math.inf)])
    def test_invalid(self, kw):
        base = dict(a=1.0, b=1.0)
        base.update(kw)
        with pytest.raises(ConfigError):
            SoftMaskParams(**base)

    def test_tensor_wrapper(self):
        t = soft_mask(SoftMaskParams(10, 10, theta=4), 20, 20)
        assert t.dims == ("height", "width") and t.shape == (20, 20)


class TestMaskCrop:
    def test_constant_volume(self):
        patch = mask_crop(volume(np.full((2, 64, 64), 3.0)), SoftMaskParams(32, 32, theta=16)).data
        assert patch.shape == (2, 32, 32)
        assert np.allclose(patch[:, 2:-2, 2:-2], 3.0, rtol=1e-6)
        assert patch[0, 0, 0] < patch[0, 16, 16]

    def test_flicker_inside_window_keeps_energy(self):
        vol = flicker_volume(64, 64, 32, 32, r=8)
        patch = mask_crop(vol, SoftMaskParams(32, 32, theta=16)).data
        full = band_energy_array(vol.array, 1, 15).sum()
        part = band_energy_array(patch, 1, 15).sum()
        assert abs(part - full) <= 0.02 * full

    def test_far_window_sees_nothing(self):
        vol = flicker_volume(96, 96, 14, 14, r=6)
        patch = mask_crop(vol, SoftMaskParams(70, 70, theta=16)).data
        full = band_energy_array(vol.array, 1, 15).sum()
        assert band_energy_array(patch, 1, 15).sum() <= 1e-6 * full

    def test_energy_falls_as_window_moves_away(self):
        vol = flicker_volume(96, 96, 30, 30, r=6)
        energies = [band_energy_array(mask_crop(vol, SoftMaskParams(30 + d, 30, theta=16)).data, 1, 15).sum()
                    for d in range(0, 40, 2)]
        for e0, e1 in zip(energies, energies[1:]):
            assert e1 <= e0 * (1 + 1e-9)
        assert energies[-1] < 1e-6 * energies[0]

    def test_integer_centre_hits_lattice(self):
        a = np.random.default_rng(0).random((1, 20, 20))
        p = SoftMaskParams(10, 9, theta=4)
        patch, _ = crop_array(a, p, 8)
        assert np.array_equal(patch, (a * soft_mask_array(p, 20, 20))[:, 5:13, 6:14])

    @given(st.floats(12, 20), st.floats(12, 20), seeds)
    def test_coordinate_grad_matches_fd(self, a, b, seed):
        rng = np.random.default_rng(seed)
        vol = rng.random((2, 32, 32))
        g = rng.normal(size=(2, 8, 8))
        loss = lambda aa, bb: float(np.sum(g * crop_array(vol, SoftMaskParams(aa, bb, theta=4, scale=2), 8)[0]))
        da, db = crop_coordinate_grad(vol, SoftMaskParams(a, b, theta=4, scale=2), 8, g)
        h = 1e-6
        if abs(a - round(a)) > 1e-4 and abs(b - round(b)) > 1e-4:
            assert abs(da - (loss(a + h, b) - loss(a - h, b)) / (2 * h)) <= 1e-5 * max(1, abs(da))
            assert abs(db - (loss(a, b + h) - loss(a, b - h)) / (2 * h)) <= 1e-5 * max(1, abs(db))


class TestRegressor:
    def test_zero_init_at_frame_centre(self):
        reg = ApmRegressor.create(3, 10, 64, 48, theta=16, spread=False)
        parts = reg.parts(np.random.default_rng(0).random(10))
        assert all(p.a == 23.5 and p.b == 31.5 for p in parts)

    def test_single_part(self):
        reg = ApmRegressor.create(1, 4, 64, 64, theta=16)
        vol = volume(np.zeros((2, 64, 64)))
        assert len(regress_parts(reg, vol, [np.zeros(4)])) == 1

    def test_feature_mismatch(self):
        reg = ApmRegressor.create(2, 4, 64, 64)
        with pytest.raises(ShapeError):
            reg.parts(np.zeros(5))

    def test_frame_mismatch(self):
        reg = ApmRegressor.create(2, 4, 64, 64)
        with pytest.raises(ShapeError):
            regress_parts(reg, volume(np.zeros((2, 32, 32))), [np.zeros(4)])

    @given(seeds)
    def test_centres_stay_in_range(self, seed):
        rng = np.random.default_rng(seed)
        reg = ApmRegressor.create(4, 6, 64, 64, theta=16)
        reg.weight[:] = rng.normal(0, 50, size=reg.weight.shape)
        a, b, _ = reg.forward(rng.normal(size=6))
        m = theta_margin(16, 64, 64)
        assert np.all((a >= m) & (a <= 63 - m) & (b >= m) & (b <= 63 - m))

    def test_spread_layout(self):
        reg = ApmRegressor.create(5, 3, 64, 64, theta=16)
        a, b, _ = reg.forward(np.zeros(3))
        exp_x = 16 + 31 * initial_layout(5)[:, 1]
        assert np.allclose(a, exp_x) and a[0] == pytest.approx(31.5)

    def test_theta_margin(self):
        assert theta_margin(44, 224, 224) == 44 and theta_margin(44, 64, 64) == 31


class TestFeatures:
    def test_pooled_sums_to_one_per_map(self):
        rng = np.random.default_rng(1)
        f = apm_features(rng.random((16, 64, 64)), [rng.random((8, 32, 32)), rng.random((4, 4, 4))], grid=8)
        assert f.shape == (64 + 64 + 16,)
        assert np.allclose([f[:64].sum(), f[64:128].sum(), f[128:].sum()], 1.0)

    def test_zero_map_is_uniform(self):
        f = apm_features(np.zeros((4, 16, 16)), [], grid=4)
        assert np.allclose(f, 1 / 16)

    def test_locates_energy(self):
        mag = np.zeros((4, 64, 64))
        mag[2, 40:48, 8:16] = 1.0
        f = apm_features(mag, [], grid=8).reshape(8, 8)
        assert f[5, 1] == 1.0


class TestGradientRule:
    P = SoftMaskParams(8, 8, theta=8)

    @given(seeds)
    def test_symmetric_gives_zero(self, seed):
        half = np.random.default_rng(seed).normal(size=(3, 9, 9))
        g = np.zeros((3, 17, 17))
        g[:, :9, :9] = half
        g = np.maximum(g, g[:, ::-1, :])
        g = np.maximum(g, g[:, :, ::-1])
        assert apm_coordinate_gradient(g, self.P) == (0.0, 0.0)

    def test_left_mass_moves_left(self):
        g = np.zeros((17, 17))
        g[5:12, 2:7] = 1.0
        da, db = apm_coordinate_gradient(g, self.P)
        assert da < 0 and db == 0

    def test_impulse_above(self):
        g = np.zeros((17, 17))
        g[3, 8] = 2.0
        da, db = apm_coordinate_gradient(g, self.P)
        assert db < 0 and da == 0

    @given(seeds, st.booleans())
    def test_mirror_antisymmetry(self, seed, normalize):
        g = np.random.default_rng(seed).normal(size=(2, 17, 17))
        da, db = apm_coordinate_gradient(g, self.P, normalize)
        da_x, db_x = apm_coordinate_gradient(g[:, :, ::-1], self.P, normalize)
        da_y, db_y = apm_coordinate_gradient(g[:, ::-1, :], self.P, normalize)
        assert da_x == -da and db_x == db
        assert db_y == -db and da_y == da

    def test_normalised_is_bounded(self):
        g = np.zeros((17, 17))
        g[8, 0] = 5.0
        assert apm_coordinate_gradient(g, self.P, normalize=True) == (-1.0, 0.0)

    def test_only_window_counts(self):
        g = np.zeros((40, 40))
        g[8, 30] = 1.0
        assert apm_coordinate_gradient(g, self.P) == (0.0, 0.0)
