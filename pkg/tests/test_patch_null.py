import numpy as np
import pytest

from nsvit.errors import UsageError
from nsvit.linalg import nullspace, numerical_rank
from nsvit.patch_null import compute_patch_nullspace, render_patch_noise, sample_patch_noise, verify_model_invariance
from nsvit.tensor import Tensor
from nsvit.vit import ModelConfig, ViTParams, logits, patch_embed, patchify


@pytest.fixture
def basis(toy_params):
    return compute_patch_nullspace(toy_params)


@pytest.fixture
def images(rng):
    return rng.uniform(size=(16, 3, 32, 32))


def mean_image_norm(images):
    return float(np.mean(np.linalg.norm(images.reshape(len(images), -1), axis=1)))


class TestBasis:
    def test_toy_dimension(self, toy_params, basis):
        assert basis.dim == 128
        assert basis.dim == 192 - numerical_rank(toy_params["patch.weight"])

    def test_definition(self, toy_params, basis):
        assert np.max(np.abs(basis.vectors @ toy_params["patch.weight"])) < 1e-10

    def test_square_full_rank_is_trivial(self, caplog):
        cfg = ModelConfig(image_size=8, patch_size=4, channels=1, embed_dim=16, heads=2)
        arrays = dict(ViTParams.init(cfg, np.random.default_rng(0)).arrays)
        arrays["patch.weight"] = np.eye(16)
        with caplog.at_level("WARNING"):
            b = compute_patch_nullspace(ViTParams(cfg, arrays))
        assert b.is_trivial and "trivial" in caplog.text


class TestSampling:
    def test_zero_scale(self, basis, rng):
        noise = sample_patch_noise(basis, ModelConfig(), 0.0, rng)
        assert not noise.rendered.any() and noise.norm == 0.0

    def test_norm_matches_scale(self, basis, rng):
        for scale in (1.0, 37.5, 1e4):
            assert abs(sample_patch_noise(basis, ModelConfig(), scale, rng).norm - scale) <= 1e-9 * max(1.0, scale)

    def test_rendered_patches_follow_coefficients(self, basis, rng):
        noise = sample_patch_noise(basis, ModelConfig(), 5.0, rng)
        patches = patchify(Tensor(noise.rendered[None]), ModelConfig()).data[0]
        assert np.allclose(patches, noise.coeffs @ basis.vectors, atol=1e-12)
        assert np.allclose(render_patch_noise(noise.coeffs, basis, ModelConfig()), noise.rendered, atol=1e-14)

    def test_embeds_to_zero(self, toy_params, basis, rng):
        noise = sample_patch_noise(basis, ModelConfig(), 100.0, rng)
        bias = toy_params["patch.bias"]
        assert np.max(np.abs(patch_embed(toy_params, noise.rendered).data - bias)) < 1e-8

    def test_tiled_repeats_one_pattern(self, basis, rng):
        noise = sample_patch_noise(basis, ModelConfig(), 3.0, rng, tiled=True)
        assert np.allclose(noise.coeffs, noise.coeffs[:1])

    def test_rejects_trivial_basis(self, rng):
        with pytest.raises(UsageError):
            sample_patch_noise(nullspace(np.eye(4)), ModelConfig(), 1.0, rng)


class TestModelInvariance:
    def test_zero_noise(self, toy_params, images):
        report = verify_model_invariance(toy_params, images, np.zeros((3, 32, 32)))
        assert (report.max_logit_dev, report.match_rate, report.mse_prob) == (0.0, 1.0, 0.0)

    def test_large_nullspace_noise_float64(self, toy_params, basis, images, rng):
        noise = sample_patch_noise(basis, ModelConfig(), 10 * mean_image_norm(images), rng)
        report = verify_model_invariance(toy_params, images, noise)
        assert report.max_logit_dev < 1e-8 and report.match_rate == 1.0

    def test_large_nullspace_noise_float32(self, toy_params, basis, images, rng):
        noise = sample_patch_noise(basis, ModelConfig(), 10 * mean_image_norm(images), rng)
        report = verify_model_invariance(toy_params.astype(np.float32), images.astype(np.float32), noise)
        assert report.max_logit_dev < 1e-3 and report.match_rate == 1.0

    def test_random_noise_control(self, toy_params, basis, images, rng):
        scale = 10 * mean_image_norm(images)
        null = verify_model_invariance(toy_params, images, sample_patch_noise(basis, ModelConfig(), scale, rng))
        g = rng.standard_normal((3, 32, 32))
        rand = verify_model_invariance(toy_params, images, g * (scale / np.linalg.norm(g)))
        assert rand.mse_prob > null.mse_prob and rand.max_logit_dev > 1e-3

    def test_magnitude_independence(self, toy_params, basis, images, rng):
        noise = sample_patch_noise(basis, ModelConfig(), 1e4 * mean_image_norm(images), rng)
        assert verify_model_invariance(toy_params, images, noise).max_logit_dev < 1e-6

    def test_vector_space_axioms_through_model(self, toy_params, basis, images, rng):
        cfg = ModelConfig()
        clean = logits(toy_params, images)
        u = sample_patch_noise(basis, cfg, 50.0, rng).rendered
        v = sample_patch_noise(basis, cfg, 80.0, rng).rendered
        for noise in (u + v, -7.5 * u, 0.0 * u):
            assert verify_model_invariance(toy_params, images, noise, clean_logits=clean).max_logit_dev < 1e-8

    def test_clip_breaks_exactness(self, toy_params, basis, images, rng):
        noise = sample_patch_noise(basis, ModelConfig(), 10 * mean_image_norm(images), rng)
        assert verify_model_invariance(toy_params, images, noise, clip=True).max_logit_dev > 1e-6

    def test_per_image_rows(self, toy_params, basis, images, rng):
        report = verify_model_invariance(toy_params, images, sample_patch_noise(basis, ModelConfig(), 1.0, rng))
        rows = report.rows()
        assert len(rows) == len(images) and rows[0][0] == 0
