"""Degradation-stage exactness: identities, moments, kernel normalization,
JPEG artifact structure, and oracle-restorer statistics."""

import numpy as np
import pytest

from radrestore import degrade, metrics


def natural_test_image(h=96, w=96, seed=0):
    """Natural-statistics test image: detailed luminance, smooth chroma."""
    from scipy import ndimage
    rng = np.random.default_rng(seed)
    luma = ndimage.gaussian_filter(rng.uniform(size=(h, w)), 1.5)
    luma = (luma - luma.min()) / (luma.max() - luma.min())
    luma[:, w // 2:] = np.clip(luma[:, w // 2:] + 0.3, 0, 1)
    tint = ndimage.gaussian_filter(rng.uniform(size=(h, w, 3)), (12, 12, 0))
    tint = 0.85 + 0.3 * (tint - 0.5)
    return np.clip(luma[:, :, None] * tint, 0.0, 1.0)


class TestDownsample:
    def test_identity(self):
        img = natural_test_image()
        assert np.array_equal(degrade.downsample(img, 1), img)

    def test_block_average(self):
        img = np.zeros((4, 4, 3))
        img[:2, :2] = 1.0
        out = degrade.downsample(img, 2)
        assert out.shape == (2, 2, 3)
        assert np.array_equal(out[0, 0], np.ones(3))
        assert np.array_equal(out[1, 1], np.zeros(3))

    def test_sr_task_shape(self):
        img = np.zeros((256, 256, 3))
        assert degrade.downsample(img, 4).shape == (64, 64, 3)

    def test_bad_factor(self):
        with pytest.raises(ValueError):
            degrade.downsample(np.zeros((4, 4, 3)), 0)


class TestConvolveBlur:
    def test_delta_kernel_identity(self):
        img = natural_test_image()
        k = np.zeros((3, 3))
        k[1, 1] = 1.0
        assert np.array_equal(degrade.convolve_blur(img, k), img)

    def test_constant_image_unchanged(self):
        img = np.full((16, 16, 3), 0.4)
        out = degrade.convolve_blur(img, np.full((3, 3), 1 / 9))
        assert np.allclose(out, 0.4, atol=1e-14)

    def test_box_kernel_step_edge(self):
        img = np.zeros((5, 6, 3))
        img[:, 3:] = 0.9
        out = degrade.convolve_blur(img, np.full((3, 3), 1 / 9))
        # interior row: columns see 0, 0, 1/3, 2/3, 1, 1 of the step value
        expect = 0.9 * np.array([0.0, 0.0, 1 / 3, 2 / 3, 1.0, 1.0])
        assert np.allclose(out[2, :, 0], expect, atol=1e-12)

    def test_unnormalized_kernel_warns(self):
        img = natural_test_image(32, 32)
        with pytest.warns(UserWarning):
            out = degrade.convolve_blur(img, np.full((3, 3), 1.0))
        assert np.allclose(out, degrade.convolve_blur(img, np.full((3, 3), 1 / 9)))


class TestMotionKernel:
    def test_default_size(self):
        k = degrade.motion_kernel(13, seed=0)
        assert k.shape == (13, 13)

    def test_normalized_nonnegative(self):
        for seed in range(5):
            k = degrade.motion_kernel(13, seed=seed)
            assert (k >= 0).all()
            assert abs(k.sum() - 1.0) < 1e-12

    def test_seed_determinism(self):
        a = degrade.motion_kernel(9, seed=3)
        b = degrade.motion_kernel(9, seed=3)
        c = degrade.motion_kernel(9, seed=4)
        assert np.array_equal(a, b)
        assert (a != c).any()

    def test_even_size_rejected(self):
        with pytest.raises(ValueError):
            degrade.motion_kernel(8, seed=0)


class TestShotReadNoise:
    def test_zero_noise_identity(self):
        img = natural_test_image()
        assert np.array_equal(degrade.shot_read_noise(img, 0.0, 0.0, seed=0), img)

    def test_variance_model(self):
        img = np.full((600, 600, 3), 0.5)
        out = degrade.shot_read_noise(img, 0.1, 0.2, seed=1, clamp=False)
        var = (out - img).var()
        assert var == pytest.approx(0.1 ** 2 + (0.2 * 0.5) ** 2, rel=0.02)

    def test_gain8_preset(self):
        assert degrade.GAIN_PRESETS["gain8"] == (0.08, 0.04)

    def test_determinism(self):
        img = natural_test_image(32, 32)
        a = degrade.shot_read_noise(img, 0.05, 0.0, seed=9)
        b = degrade.shot_read_noise(img, 0.05, 0.0, seed=9)
        assert np.array_equal(a, b)


class TestJpeg:
    def test_quality_100_near_lossless(self):
        img = natural_test_image()
        out = degrade.jpeg_codec(img, 100)
        assert metrics.psnr(out, img) >= 40.0

    def test_constant_image_survives(self):
        img = np.full((32, 32, 3), 0.5)
        out = degrade.jpeg_codec(img, 50)
        assert np.allclose(out, img, atol=2.5 / 255)
        assert out.std() < 1e-12

    @staticmethod
    def block_energy(x):
        # discontinuities across 8x8 block boundaries
        v = np.abs(np.diff(x, axis=0))[7:-1:8].sum()
        h = np.abs(np.diff(x, axis=1))[:, 7:-1:8].sum()
        return v + h

    def test_blockiness_increases_at_low_quality_random(self):
        img = np.random.default_rng(0).uniform(size=(64, 64, 3))
        assert self.block_energy(degrade.jpeg_codec(img, 50)) > \
            self.block_energy(degrade.jpeg_codec(img, 100))

    def test_blockiness_increases_at_low_quality_smooth(self):
        # smooth ramps within blocks quantize to visible steps at boundaries
        img = natural_test_image(64, 64, seed=2)
        assert self.block_energy(degrade.jpeg_codec(img, 50)) > \
            self.block_energy(degrade.jpeg_codec(img, 100))

    def test_quality_50_strictly_lossier(self):
        img = natural_test_image()
        assert metrics.psnr(degrade.jpeg_codec(img, 50), img) < \
            metrics.psnr(degrade.jpeg_codec(img, 100), img)

    def test_quality_bounds(self):
        with pytest.raises(ValueError):
            degrade.jpeg_codec(np.zeros((8, 8, 3)), 0)


class TestMixedPipeline:
    def test_object_preset_stages(self):
        cfg = degrade.mixed_pipeline_config("object")
        kinds = [type(s).__name__ for s in cfg.stages]
        assert kinds == ["GaussianBlur", "ShotReadNoise", "Jpeg"]
        assert cfg.stages[0].radius == 7
        assert cfg.stages[1].read == pytest.approx(25.0 / 255.0)
        assert cfg.stages[1].shot == 0.0
        assert cfg.stages[2].quality == 50

    def test_forward_preset_radius(self):
        assert degrade.mixed_pipeline_config("forward").stages[0].radius == 3

    def test_empty_config_identity(self):
        img = natural_test_image(32, 32)
        out = degrade.DegradationConfig([]).apply(img)
        assert np.array_equal(out, img)

    def test_config_determinism_and_monotonicity(self):
        img = natural_test_image()
        cfg = degrade.mixed_pipeline_config("object")
        a = cfg.apply(img, view_index=3)
        b = cfg.apply(img, view_index=3)
        assert np.array_equal(a, b)
        assert metrics.psnr(a, img) < metrics.PSNR_CAP_DB - 40

    def test_stage_dict_round_trip(self):
        cfg = degrade.DegradationConfig.from_dicts([
            {"type": "gaussian_blur", "radius": 3},
            {"type": "jpeg", "quality": 70},
        ])
        assert cfg.stages[0].radius == 3 and cfg.stages[1].quality == 70


class TestOracleRestore:
    def test_zero_amplitude_exact(self):
        img = natural_test_image()
        out = degrade.oracle_restore(img, img, 0.0, seed=5)
        assert np.array_equal(out, img)

    def test_determinism(self):
        img = natural_test_image()
        a = degrade.oracle_restore(img, img, 1.0, seed=7)
        b = degrade.oracle_restore(img, img, 1.0, seed=7)
        assert np.array_equal(a, b)

    def test_extent_mismatch_rejected(self):
        with pytest.raises(ValueError):
            degrade.oracle_restore(np.zeros((8, 8, 3)), np.zeros((4, 4, 3)), 1.0, 0)

    def test_inconsistency_grows_with_amplitude(self):
        img = natural_test_image()
        scores = []
        for a in (0.25, 1.0, 3.0):
            views = [degrade.oracle_restore(img, img, a, seed=s) for s in range(4)]
            pair = [metrics.perceptual_proxy(views[i], views[j])
                    for i in range(4) for j in range(i + 1, 4)]
            scores.append(np.mean(pair))
        assert scores[0] < scores[1] < scores[2]
