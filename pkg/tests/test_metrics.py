"""
Tests for SSIM, the rendering error, PSNR calibration and solution scoring.
"""

import numpy as np
import pytest

from src.errors import DomainError
from src.instance import QualityConfig, ScenarioConfig, generate_instance
from src.metrics import (
    K1,
    K2,
    Image,
    evaluate_solution,
    fit_psnr_calibration,
    gaussian_window,
    psnr_from_loss,
    read_ppm,
    rendering_error,
    ssim,
    switching_gain_from_images,
    write_ppm,
)
from src.pmm import objective_p1, recover_power
from tests.conftest import make_instance

C1, C2 = K1**2, K2**2


def _random_image(rng, size=16):
    return Image(rng.uniform(0, 1, (size, size, 3)))


def _naive_ssim(a: Image, b: Image) -> float:
    """Per-window double loop over every channel."""
    window = gaussian_window()
    n = window.shape[0]
    values = []
    for c in range(3):
        x, y = a.pixels[:, :, c], b.pixels[:, :, c]
        for i in range(x.shape[0] - n + 1):
            for j in range(x.shape[1] - n + 1):
                px, py = x[i : i + n, j : j + n], y[i : i + n, j : j + n]
                mx, my = np.sum(window * px), np.sum(window * py)
                vx = np.sum(window * px * px) - mx * mx
                vy = np.sum(window * py * py) - my * my
                cov = np.sum(window * px * py) - mx * my
                values.append(
                    ((2 * mx * my + C1) * (2 * cov + C2)) / ((mx**2 + my**2 + C1) * (vx + vy + C2))
                )
    return float(np.mean(values))


class TestImage:
    """Image container checks."""

    def test_rejects_out_of_range(self):
        """Samples outside [0, 1] raise."""
        with pytest.raises(DomainError):
            Image(np.full((12, 12, 3), 1.5))

    def test_rejects_wrong_shape(self):
        """Images need three channels."""
        with pytest.raises(DomainError):
            Image(np.zeros((12, 12)))

    def test_from_samples_row_major(self):
        """Flat samples reshape row-major."""
        samples = np.linspace(0, 1, 3 * 4 * 5)
        image = Image.from_samples(samples, length=4, width=5)
        assert image.pixels.shape == (4, 5, 3)
        np.testing.assert_array_equal(image.samples, samples)

    def test_ppm_round_trip(self, tmp_path):
        """8-bit PPM keeps values that are multiples of 1/255."""
        rng = np.random.default_rng(0)
        image = Image(rng.integers(0, 256, (13, 17, 3)) / 255.0)
        path = tmp_path / "frame.ppm"
        write_ppm(image, path)
        loaded = read_ppm(path)
        np.testing.assert_allclose(loaded.pixels, image.pixels, atol=1e-12)

    def test_ppm_bad_magic(self, tmp_path):
        """Non-P6 files are refused."""
        path = tmp_path / "frame.ppm"
        path.write_bytes(b"P3\n2 2\n255\n0 0 0")
        with pytest.raises(DomainError):
            read_ppm(path)

    def test_ppm_truncated_raster(self, tmp_path):
        """A raster shorter than 3 * width * length bytes is a domain error."""
        path = tmp_path / "frame.ppm"
        path.write_bytes(b"P6\n4 4\n255\n" + bytes(47))
        with pytest.raises(DomainError, match="truncated raster"):
            read_ppm(path)

    def test_ppm_malformed_header(self, tmp_path):
        """Non-numeric dimensions are a domain error, not a ValueError."""
        path = tmp_path / "frame.ppm"
        path.write_bytes(b"P6\nwide 4\n255\n" + bytes(48))
        with pytest.raises(DomainError):
            read_ppm(path)


class TestSsim:
    """Windowed SSIM."""

    def test_self_similarity_is_one(self):
        """ssim(a, a) is exactly 1."""
        image = _random_image(np.random.default_rng(1), 20)
        assert ssim(image, image) == 1.0

    def test_constant_images_closed_form(self):
        """Black vs white matches C1 / (1 + C1)."""
        a = Image.constant(0.0, 16, 16)
        b = Image.constant(1.0, 16, 16)
        assert ssim(a, b) == pytest.approx(C1 / (1 + C1), abs=1e-12)

    def test_matches_naive_reference(self):
        """Vectorised SSIM equals a per-window loop on random pairs."""
        rng = np.random.default_rng(2)
        for _ in range(20):
            a, b = _random_image(rng), _random_image(rng)
            assert ssim(a, b) == pytest.approx(_naive_ssim(a, b), abs=1e-10)

    def test_symmetric(self):
        """ssim(a, b) = ssim(b, a)."""
        rng = np.random.default_rng(3)
        a, b = _random_image(rng), _random_image(rng)
        assert abs(ssim(a, b) - ssim(b, a)) <= 1e-12

    def test_shape_mismatch(self):
        """Different sizes raise."""
        with pytest.raises(DomainError):
            ssim(Image.constant(0.5, 16, 16), Image.constant(0.5, 16, 17))

    def test_too_small_for_window(self):
        """Images under 11x11 raise."""
        with pytest.raises(DomainError):
            ssim(Image.constant(0.5, 10, 10), Image.constant(0.5, 10, 10))


class TestRenderingError:
    """Weighted L1 + DSSIM loss."""

    def test_identical_images_zero(self):
        """L(a, a) = 0."""
        image = _random_image(np.random.default_rng(4))
        assert rendering_error(image, image, 0.2) == 0.0

    def test_weight_zero_is_l1(self):
        """lambda = 0 leaves the mean absolute error."""
        rng = np.random.default_rng(5)
        a, b = _random_image(rng), _random_image(rng)
        expected = np.mean(np.abs(a.pixels - b.pixels))
        assert rendering_error(a, b, 0.0) == pytest.approx(expected, rel=1e-14)

    def test_constant_images_analytic(self):
        """Constant 0 vs 0.1 at lambda 0.2."""
        a = Image.constant(0.0, 16, 16)
        b = Image.constant(0.1, 16, 16)
        ssim_const = C1 / (0.01 + C1)
        expected = 0.8 * 0.1 + 0.2 * (1 - ssim_const)
        assert rendering_error(a, b, 0.2) == pytest.approx(expected, abs=1e-9)

    def test_premetric_on_fuzzed_pairs(self):
        """Loss is positive for distinct images."""
        rng = np.random.default_rng(6)
        for _ in range(10):
            a, b = _random_image(rng), _random_image(rng)
            assert rendering_error(a, b, 0.2) > 0

    def test_weight_out_of_range(self):
        """lambda must lie in [0, 1)."""
        image = Image.constant(0.5, 12, 12)
        with pytest.raises(DomainError):
            rendering_error(image, image, 1.0)

    def test_switching_gain_constant_offset(self):
        """Renders differing by 0.05 everywhere give gain 0.05 at lambda 0."""
        edge = Image.constant(0.35, 12, 12)
        local = Image.constant(0.30, 12, 12)
        assert switching_gain_from_images(edge, local, 0.0) == pytest.approx(0.05, abs=1e-12)

    def test_switching_gain_is_rendering_error(self):
        """The switching gain is the rendering error of the render pair."""
        rng = np.random.default_rng(7)
        a, b = _random_image(rng), _random_image(rng)
        assert switching_gain_from_images(a, b, 0.2) == rendering_error(a, b, 0.2)


class TestPsnrCalibration:
    """Two-anchor PSNR fit."""

    def test_anchors_reproduced(self):
        """0.029 -> 27.49 dB and 0.041 -> 24.99 dB."""
        assert psnr_from_loss(0.029) == pytest.approx(27.49, abs=0.01)
        assert psnr_from_loss(0.041) == pytest.approx(24.99, abs=0.01)

    def test_midpoint_on_fitted_line(self):
        """Intermediate losses follow A + B log10(loss)."""
        a, b = fit_psnr_calibration()
        assert psnr_from_loss(0.0345) == pytest.approx(a + b * np.log10(0.0345), rel=1e-14)

    def test_strictly_decreasing(self):
        """Higher loss means lower PSNR."""
        values = psnr_from_loss(np.linspace(0.01, 0.5, 100))
        assert np.all(np.diff(values) < 0)

    def test_non_positive_loss(self):
        """loss <= 0 raises."""
        with pytest.raises(DomainError):
            psnr_from_loss(0.0)


class TestEvaluateSolution:
    """Scoring a decision against the latent quality profile."""

    def test_all_local_scores_local_losses(self, small_instance):
        """x = 0 gives the sum of local losses."""
        K = small_instance.num_users
        metrics = evaluate_solution(small_instance, np.zeros(K), np.zeros(K))
        assert metrics.total_loss == pytest.approx(sum(small_instance.quality.loss_local))
        assert metrics.max_latency == pytest.approx(small_instance.local_render_time)
        assert len(metrics.per_user) == K

    def test_anchor_profile_arithmetic(self, far_user):
        """m collaborators out of K give (K - m) 0.041 + m 0.029."""
        x = np.array([0, 1, 1, 1, 0, 0], dtype=float)
        metrics = evaluate_solution(far_user, x, recover_power(far_user, x))
        assert metrics.total_loss == pytest.approx(3 * 0.041 + 3 * 0.029, abs=1e-12)

    def test_matches_per_user_accumulation(self, small_instance):
        """Vectorised totals equal a plain loop."""
        rng = np.random.default_rng(8)
        q = small_instance.quality
        for _ in range(20):
            x = (rng.uniform(size=small_instance.num_users) < 0.5).astype(float)
            metrics = evaluate_solution(small_instance, x, recover_power(small_instance, x))
            expected = sum(q.loss_edge[k] if x[k] else q.loss_local[k] for k in range(len(x)))
            assert metrics.total_loss == pytest.approx(expected, abs=1e-12)

    def test_zero_slack_objective_identity(self):
        """With L = loss_local - loss_edge the P1 objective is the true loss minus a constant."""
        cfg = ScenarioConfig(
            num_users=10, max_collab=5, quality_config=QualityConfig(triangle_slack=0.0)
        )
        inst = generate_instance(cfg, 0)
        rng = np.random.default_rng(9)
        for _ in range(20):
            x = (rng.uniform(size=10) < 0.5).astype(float)
            metrics = evaluate_solution(inst, x, recover_power(inst, x))
            shifted = metrics.total_loss - sum(inst.quality.loss_edge)
            assert shifted == pytest.approx(objective_p1(inst, x), abs=1e-12)

    def test_positive_slack_upper_bounds(self, small_instance):
        """With slack the P1 objective bounds the shifted true loss from above."""
        rng = np.random.default_rng(10)
        for _ in range(20):
            x = (rng.uniform(size=small_instance.num_users) < 0.5).astype(float)
            metrics = evaluate_solution(small_instance, x, recover_power(small_instance, x))
            shifted = metrics.total_loss - sum(small_instance.quality.loss_edge)
            assert shifted <= objective_p1(small_instance, x) + 1e-12

    def test_missing_quality_profile(self):
        """Instances without a profile cannot be scored."""
        inst = make_instance([0.02], [1e-3])
        with pytest.raises(DomainError):
            evaluate_solution(inst, [0.0], [0.0])
