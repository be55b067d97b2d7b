import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import TINY, fd_grad, rel_err
from nsvit import tensor as T
from nsvit.data import Dataset
from nsvit.errors import NumericError, UsageError
from nsvit.noise import (
    NoiseEvaluator,
    NoiseVector,
    compare_outputs,
    evaluate_noise,
    learn_eps_noise,
    learn_noise_regularized,
    loss_regularized,
    permute_noise,
    squared_logit_loss,
)
from nsvit.tensor import Tensor
from nsvit.vit import patch_embed, token_logits


@pytest.fixture
def tiny_data(rng):
    return Dataset(rng.uniform(size=(40, 2, 8, 8)), np.arange(40) % 3)


def noise_shape():
    return (TINY.n_patches, TINY.embed_dim)


class TestNoiseVector:
    def test_norm(self):
        v = NoiseVector(np.full((2, 2), 0.5))
        assert v.norm == 1.0 and v.shape == (2, 2)

    def test_rejects_bad_provenance(self):
        with pytest.raises(UsageError):
            NoiseVector(np.zeros(3), "guessed")

    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            NoiseVector(np.array([0.0, np.inf]))

    def test_scaled(self):
        v = NoiseVector(np.ones((2, 3)), "random").scaled(-2.0)
        assert np.array_equal(v.values, -2.0 * np.ones((2, 3))) and v.provenance == "random"


class TestMetrics:
    def test_identical_outputs(self, rng):
        z = rng.standard_normal((6, 4))
        m = compare_outputs(z, z.copy())
        assert (m.match_rate, m.mse_prob, m.mse_logit) == (1.0, 0.0, 0.0)

    def test_hand_computed(self):
        m = compare_outputs(np.array([[0.0, 0.0]]), np.array([[0.0, np.log(3.0)]]))
        assert m.match_rate == 0.0
        assert abs(m.mse_prob - 2 * 0.25**2) < 1e-15
        assert abs(m.mse_logit - np.log(3.0) ** 2) < 1e-15

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (5, 4), elements=st.floats(-80, 80)), arrays(np.float64, (5, 4), elements=st.floats(-80, 80)))
    def test_bounds(self, a, b):
        m = compare_outputs(a, b)
        assert 0.0 <= m.match_rate <= 1.0 and 0.0 <= m.mse_prob <= 2.0

    def test_zero_noise(self, tiny_params, tiny_data):
        m = evaluate_noise(tiny_params, tiny_data.images, np.zeros(noise_shape()))
        assert (m.match_rate, m.mse_prob, m.mse_logit) == (1.0, 0.0, 0.0)

    def test_evaluator_matches_direct_path(self, tiny_params, tiny_data, rng):
        v = rng.standard_normal(noise_shape())
        ev = NoiseEvaluator(tiny_params, tiny_data.images, batch_size=7)
        tokens = patch_embed(tiny_params, tiny_data.images).data
        direct = compare_outputs(token_logits(tiny_params, tokens), token_logits(tiny_params, tokens, v))
        assert ev(v) == direct

    def test_does_not_mutate(self, tiny_params, tiny_data, rng):
        v = rng.standard_normal(noise_shape())
        before = (v.copy(), tiny_data.images.copy(), tiny_params.copy())
        evaluate_noise(tiny_params, tiny_data.images, v)
        assert np.array_equal(v, before[0]) and np.array_equal(tiny_data.images, before[1])
        assert all(np.array_equal(tiny_params[k], before[2][k]) for k in tiny_params)


class TestPermutation:
    def test_preserves_norm_and_multiset(self, rng):
        v = NoiseVector(rng.standard_normal((4, 6)))
        p = permute_noise(v, rng)
        assert p.provenance == "permuted"
        assert abs(p.norm - v.norm) < 1e-12
        assert np.array_equal(np.sort(p.values, axis=None), np.sort(v.values, axis=None))
        assert not np.array_equal(p.values, v.values)


class TestRegularizedLoss:
    def test_zero_noise_without_regularizer(self, tiny_params, tiny_data):
        loss = loss_regularized(tiny_params, tiny_data.images[:5], np.zeros(noise_shape()), 0.0)
        assert loss.item() == 0.0

    def test_tiny_noise_is_small_and_nonnegative(self, tiny_params, tiny_data, rng):
        loss = loss_regularized(tiny_params, tiny_data.images[:5], 1e-9 * rng.standard_normal(noise_shape()), 0.0)
        assert 0.0 <= loss.item() < 1e-6

    def test_regularizer_value(self, tiny_params, tiny_data, rng):
        v = rng.standard_normal(noise_shape())
        base = loss_regularized(tiny_params, tiny_data.images[:5], v, 0.0).item()
        assert abs(loss_regularized(tiny_params, tiny_data.images[:5], v, 0.3).item() - (base - 0.3 * np.log(np.linalg.norm(v)))) < 1e-12

    def test_gradient(self, tiny_params, tiny_data, rng):
        images = tiny_data.images[:5]
        v0 = rng.standard_normal(noise_shape())
        v = Tensor(v0.copy(), requires_grad=True)
        loss_regularized(tiny_params, images, v, 0.1).backward()

        def f(arr):
            with T.no_grad():
                return loss_regularized(tiny_params, images, arr, 0.1).item()

        assert rel_err(v.grad, fd_grad(f, v0.copy(), h=1e-6)) < 1e-3

    def test_squared_loss_gradient(self, tiny_params, tiny_data, rng):
        tokens = patch_embed(tiny_params, tiny_data.images[:4]).data
        clean = token_logits(tiny_params, tokens)
        v0 = rng.standard_normal(noise_shape())
        v = Tensor(v0.copy(), requires_grad=True)
        squared_logit_loss(tiny_params, tokens, clean, v).backward()

        def f(arr):
            with T.no_grad():
                return squared_logit_loss(tiny_params, tokens, clean, Tensor(arr)).item()

        assert rel_err(v.grad, fd_grad(f, v0.copy(), h=1e-6)) < 1e-3

    def test_zero_norm_with_regularizer(self, tiny_params, tiny_data):
        with pytest.raises(NumericError):
            loss_regularized(tiny_params, tiny_data.images[:2], np.zeros(noise_shape()), 0.5)

    def test_negative_lambda(self, tiny_params, tiny_data):
        with pytest.raises(UsageError):
            loss_regularized(tiny_params, tiny_data.images[:2], np.ones(noise_shape()), -1.0)


class TestLearnRegularized:
    def test_trace_and_determinism(self, tiny_params, tiny_data):
        a = learn_noise_regularized(tiny_params, tiny_data, 0.1, 0.05, 6, np.random.default_rng(3), batch_size=8)
        b = learn_noise_regularized(tiny_params, tiny_data, 0.1, 0.05, 6, np.random.default_rng(3), batch_size=8)
        assert [r["step"] for r in a.trace] == list(range(6))
        assert set(a.trace[0]) == {"step", "loss", "norm", "mse_prob", "match_rate"}
        assert np.array_equal(a.noise.values, b.noise.values)

    def test_sgd_step_is_literal(self, tiny_params, tiny_data):
        rng = np.random.default_rng(4)
        res = learn_noise_regularized(tiny_params, tiny_data, 0.2, 0.05, 1, rng, batch_size=8)
        rng = np.random.default_rng(4)
        v0 = rng.uniform(-1.0, 1.0, size=noise_shape())
        images, _ = tiny_data.sample_batch(rng, 8)
        v = Tensor(v0, requires_grad=True)
        loss_regularized(tiny_params, images, v, 0.2).backward()
        assert np.allclose(res.noise.values, v0 - 0.05 * v.grad, atol=1e-14)


class TestLearnEps:
    def test_threshold_above_maximum_stops_immediately(self, tiny_params, tiny_data):
        res = learn_eps_noise(tiny_params, tiny_data, eps=2.1, rng=np.random.default_rng(0), batch_size=8)
        assert res.converged and res.steps == 0 and res.delta < 2.1

    def test_deterministic(self, tiny_params, tiny_data):
        runs = [learn_eps_noise(tiny_params, tiny_data, eps=1e-4, max_steps=5, rng=np.random.default_rng(9), batch_size=8) for _ in range(2)]
        assert np.array_equal(runs[0].noise.values, runs[1].noise.values)
        assert runs[0].trace == runs[1].trace

    def test_non_convergence_returns_best(self, tiny_params, tiny_data):
        res = learn_eps_noise(tiny_params, tiny_data, eps=1e-12, max_steps=4, rng=np.random.default_rng(1), batch_size=8)
        assert not res.converged and res.steps == 4
        assert res.delta == min(r["delta"] for r in res.trace)

    def test_descent_reduces_influence(self, tiny_params, tiny_data):
        res = learn_eps_noise(tiny_params, tiny_data, eps=1e-12, max_steps=60, rng=np.random.default_rng(2), batch_size=40)
        assert res.trace[-1]["delta"] < res.trace[0]["delta"]

    def test_sgd_option(self, tiny_params, tiny_data):
        res = learn_eps_noise(tiny_params, tiny_data, eps=1e-12, max_steps=2, rng=np.random.default_rng(2), batch_size=8, optimizer="sgd")
        assert len(res.trace) == 3

    def test_confirmation_gate(self, tiny_params, tiny_data):
        # a huge confirm bar can never be failed, a tiny eps can never be passed
        res = learn_eps_noise(tiny_params, tiny_data, eps=2.1, rng=np.random.default_rng(0), batch_size=8,
                              confirm_set=tiny_data, confirm_gate=True)
        assert res.converged and res.confirm_delta is not None and res.confirm_delta < 2.1

    def test_init_override(self, tiny_params, tiny_data):
        init = np.zeros(noise_shape())
        res = learn_eps_noise(tiny_params, tiny_data, eps=0.5, rng=np.random.default_rng(0), init=init)
        assert res.converged and res.steps == 0 and res.noise.norm == 0.0

    def test_invalid_eps(self, tiny_params, tiny_data):
        with pytest.raises(UsageError):
            learn_eps_noise(tiny_params, tiny_data, eps=0.0)
