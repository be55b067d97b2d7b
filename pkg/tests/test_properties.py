import numpy as np
import pytest

from conftest import TINY, fd_grad
from nsvit import rng as rngs
from nsvit import tensor as T
from nsvit.data import Dataset
from nsvit.errors import UsageError
from nsvit.noise import NoiseEvaluator, NoiseVector, learn_eps_noise
from nsvit.properties import (
    DEFAULT_ALPHAS,
    convex_grid,
    corruption_accuracy,
    fgsm_accuracy,
    fgsm_attack,
    input_gradient,
    learn_noise_set,
    sample_pairs,
    scaling_sweep,
)
from nsvit.vit import accuracy, forward


@pytest.fixture
def tiny_data(rng):
    return Dataset(rng.uniform(size=(30, 2, 8, 8)), np.arange(30) % 3)


@pytest.fixture
def noises(rng):
    return [NoiseVector(rng.standard_normal((TINY.n_patches, TINY.embed_dim))) for _ in range(4)]


class TestScaling:
    def test_default_alphas(self):
        assert len(DEFAULT_ALPHAS) == 21 and DEFAULT_ALPHAS[0] == 0.0 and DEFAULT_ALPHAS[-1] == 2.0

    def test_zero_alpha_is_exact(self, tiny_params, tiny_data, noises):
        curve = scaling_sweep(tiny_params, tiny_data.images, noises, alphas=(0.0, 1.0))
        assert curve.mse_prob[0] == 0.0 and curve.per_noise.shape == (4, 2)

    def test_matches_direct_evaluation(self, tiny_params, tiny_data, noises):
        curve = scaling_sweep(tiny_params, tiny_data.images, noises, alphas=(0.5, 1.5))
        ev = NoiseEvaluator(tiny_params, tiny_data.images)
        expected = np.mean([ev(1.5 * v.values).mse_prob for v in noises])
        assert abs(curve.mse_prob[1] - expected) < 1e-15
        assert curve.rows()[0][0] == 0.5

    def test_accepts_plain_arrays(self, tiny_params, tiny_data, noises):
        a = scaling_sweep(tiny_params, tiny_data.images, noises, alphas=(1.0,))
        b = scaling_sweep(tiny_params, tiny_data.images, [v.values for v in noises], alphas=(1.0,))
        assert np.array_equal(a.per_noise, b.per_noise)


class TestGrid:
    def test_pairs(self, rng):
        pairs = sample_pairs(5, 6, rng)
        assert len(set(pairs)) == 6 and all(i < j for i, j in pairs)
        both = sample_pairs(5, 3, rng, both_orders=True)
        assert both[3:] == tuple((j, i) for i, j in both[:3])

    def test_too_many_pairs(self, rng):
        with pytest.raises(UsageError):
            sample_pairs(3, 4, rng)

    def test_axes_and_corners(self, tiny_params, tiny_data, noises):
        grid = convex_grid(tiny_params, tiny_data.images, noises, [(0, 1)], grid_step=0.25)
        ev = NoiseEvaluator(tiny_params, tiny_data.images)
        assert grid.values.shape == (5, 5) and grid.values[0, 0] == 0.0
        assert abs(grid.values[4, 0] - ev(noises[0].values).mse_prob) < 1e-15
        assert abs(grid.values[0, 2] - ev(0.5 * noises[1].values).mse_prob) < 1e-15
        assert len(grid.on_segment()) == 5 and grid.on_segment()[0] == grid.values[0, 4]
        assert len(grid.rows()) == 25

    def test_swapped_pairs_transpose(self, tiny_params, tiny_data, noises):
        ab = convex_grid(tiny_params, tiny_data.images, noises, [(0, 1), (2, 3)], grid_step=0.5)
        ba = convex_grid(tiny_params, tiny_data.images, noises, [(1, 0), (3, 2)], grid_step=0.5)
        assert np.allclose(ab.values, ba.values.T, atol=1e-14)

    def test_bad_step(self, tiny_params, tiny_data, noises):
        with pytest.raises(UsageError):
            convex_grid(tiny_params, tiny_data.images, noises, [(0, 1)], grid_step=0.3)


class TestNoiseSet:
    def test_members_use_indexed_streams(self, tiny_params, tiny_data):
        out = learn_noise_set(tiny_params, tiny_data, 2, seed=5, eps=1e-9, max_steps=2, batch_size=8)
        direct = learn_eps_noise(tiny_params, tiny_data, eps=1e-9, max_steps=2, batch_size=8,
                                 rng=rngs.stream(5, rngs.NOISE_INIT, 1))
        assert np.array_equal(out[1].noise.values, direct.noise.values)
        assert not np.array_equal(out[0].noise.values, out[1].noise.values)


class TestFgsm:
    def test_gradient_against_finite_differences(self, tiny_params, tiny_data):
        images, labels = tiny_data.images[:3], tiny_data.labels[:3]
        grad = input_gradient(tiny_params, images, labels)

        def f(x):
            with T.no_grad():
                return T.cross_entropy(forward(tiny_params, x), labels).item()

        pixels = [(0, 0, 1, 2), (1, 1, 7, 0), (2, 0, 4, 4)]
        flat = [np.ravel_multi_index(p, images.shape) for p in pixels]
        fd = fd_grad(f, images.copy(), h=1e-6, index=flat)
        analytic = np.array([grad[p] for p in pixels])
        assert np.all(np.abs(analytic - fd) < 1e-7 + 1e-4 * np.abs(analytic))
        assert np.array_equal(np.sign(analytic), np.sign(fd))

    def test_zero_eps_is_clean(self, tiny_params, tiny_data):
        clean = accuracy(tiny_params, tiny_data.images, tiny_data.labels)
        assert fgsm_accuracy(tiny_params, tiny_data, eps_pix=0.0) == clean

    def test_step_is_bounded_and_clipped(self, tiny_params, tiny_data):
        adv = fgsm_attack(tiny_params, tiny_data.images, tiny_data.labels, 0.05)
        assert np.max(np.abs(adv - tiny_data.images)) <= 0.05 + 1e-12
        assert adv.min() >= 0.0 and adv.max() <= 1.0

    def test_raises_loss(self, tiny_params, tiny_data):
        images, labels = tiny_data.images, tiny_data.labels
        adv = fgsm_attack(tiny_params, images, labels, 0.01)
        with T.no_grad():
            assert T.cross_entropy(forward(tiny_params, adv), labels).item() > T.cross_entropy(forward(tiny_params, images), labels).item()

    def test_negative_eps(self, tiny_params, tiny_data):
        with pytest.raises(UsageError):
            fgsm_attack(tiny_params, tiny_data.images, tiny_data.labels, -0.1)


class TestCorruption:
    def test_zero_sigma_and_determinism(self, tiny_params, tiny_data):
        assert corruption_accuracy(tiny_params, tiny_data, sigma=0.0) == accuracy(tiny_params, tiny_data.images, tiny_data.labels)
        assert corruption_accuracy(tiny_params, tiny_data, 0.3, seed=2) == corruption_accuracy(tiny_params, tiny_data, 0.3, seed=2)
