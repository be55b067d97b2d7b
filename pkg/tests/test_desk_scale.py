"""Measured behaviour of the pretrained toy model; shares the session ``desk`` fixture."""

import numpy as np
import pytest

from nsvit import rng as rngs
from nsvit.noise import NoiseEvaluator, NoiseVector, evaluate_noise, learn_noise_regularized
from nsvit.properties import fgsm_accuracy


class TestPretrained:
    def test_accuracy(self, desk):
        # measured: train 1.000, test 0.988 after 12 float32 epochs
        assert desk.train_acc >= 0.9 and desk.test_acc >= 0.9

    def test_fgsm_hurts(self, desk):
        assert fgsm_accuracy(desk.params, desk.test, 1.0 / 255.0) < desk.test_acc


class TestLearnedNoise:
    def test_below_eps_where_accepted(self, desk, desk_noise):
        result, _ = desk_noise
        assert result.converged and result.confirm_delta < 0.03
        confirm = desk.train.subset(slice(0, 512))
        assert evaluate_noise(desk.params, confirm.images, result.noise).mse_prob < 0.03

    def test_huge_random_noise_is_near_chance(self, desk, desk_noise, rng):
        result, _ = desk_noise
        g = rng.standard_normal(result.noise.shape)
        m = evaluate_noise(desk.params, desk.test.images, NoiseVector(g * 100 * result.noise.norm / np.linalg.norm(g), "random"))
        assert m.match_rate < 0.3


@pytest.fixture(scope="module")
def lambda_sweep(desk):
    return {lam: learn_noise_regularized(desk.params, desk.train, lam, 0.1, 300, rngs.stream(0, rngs.NOISE_INIT))
            for lam in (0.0, 0.01, 0.1, 1.0)}


class TestRegularizedSweep:
    def test_unregularized_norm_shrinks(self, lambda_sweep):
        norms = np.array([r["norm"] for r in lambda_sweep[0.0].trace])
        checkpoints = norms[10::25]
        assert np.all(np.diff(checkpoints) < 0)

    def test_final_norm_increases_with_lambda(self, lambda_sweep):
        finals = [lambda_sweep[lam].noise.norm for lam in (0.01, 0.1, 1.0)]
        assert finals[0] < finals[1] < finals[2]

    def test_benign_on_held_out(self, desk, lambda_sweep):
        ev = NoiseEvaluator(desk.params, desk.test.images)
        assert all(ev(r.noise).match_rate >= 0.95 for r in lambda_sweep.values())
