import math

import numpy as np
import pytest

from conftest import TINY
from nsvit import rng as rngs
from nsvit.data import Dataset
from nsvit.errors import TrainingError, UsageError
from nsvit.finetune import (
    FinetuneConfig,
    NoiseDraw,
    RoundLog,
    calibrate_gaussian_noise,
    finetune,
    random_noise_source,
    track_trend,
    trend_rows,
)
from nsvit.noise import NoiseEvaluator, NoiseVector

SMALL = FinetuneConfig(rounds=2, model_steps=3, batch_size=6, model_lr=1e-3, confirm_size=0)


@pytest.fixture
def tiny_data(rng):
    return Dataset(rng.uniform(size=(24, 2, 8, 8)), np.arange(24) % 3)


def fixed_source(converged=True, scale=0.5):
    def source(params, train, cfg, rng, confirm):
        values = scale * np.linspace(-1.0, 1.0, TINY.n_patches * TINY.embed_dim).reshape(TINY.n_patches, TINY.embed_dim)
        return NoiseDraw(NoiseVector(values), 0.001, converged, 7)
    return source


def same_params(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


class TestConfig:
    def test_round_trip(self):
        cfg = FinetuneConfig(rounds=3, mode="random")
        assert FinetuneConfig.from_dict({**cfg.to_dict(), "unknown": 1}) == cfg

    @pytest.mark.parametrize("kw", [{"mode": "adversarial"}, {"on_failure": "retry"}, {"rounds": -1}, {"eps": 0.0}, {"model_lr": -1e-5}])
    def test_rejects_invalid(self, kw):
        with pytest.raises(UsageError):
            FinetuneConfig(**kw)

    def test_csv_row_omits_wall_time(self):
        log = RoundLog(0, True, 0.01, 0.02, 3.0, 1.0, 0.9, 0.8, 12, wall_time=4.5)
        assert log.csv_row() == (0, True, 0.01, 0.02, 3.0, 1.0, 0.9, 0.8, 12)
        assert log == RoundLog(0, True, 0.01, 0.02, 3.0, 1.0, 0.9, 0.8, 12, wall_time=9.0)


class TestLoop:
    def test_zero_rounds_is_identity(self, tiny_params, tiny_data):
        res = finetune(tiny_params, tiny_data, tiny_data, FinetuneConfig(rounds=0), seed=0)
        assert res.logs == [] and same_params(res.params, tiny_params)

    def test_does_not_mutate_input(self, tiny_params, tiny_data):
        before = tiny_params.copy()
        res = finetune(tiny_params, tiny_data, tiny_data, SMALL, seed=0, noise_source=fixed_source())
        assert same_params(tiny_params, before) and not same_params(res.params, before)

    def test_modes_differ_only_in_noise_source(self, tiny_params, tiny_data):
        runs = [finetune(tiny_params, tiny_data, tiny_data, FinetuneConfig(**{**SMALL.to_dict(), "mode": mode}), seed=3,
                         noise_source=fixed_source()) for mode in ("nullspace", "random")]
        assert same_params(runs[0].params, runs[1].params)
        assert runs[0].logs == runs[1].logs

    def test_deterministic(self, tiny_params, tiny_data):
        a, b = (finetune(tiny_params, tiny_data, tiny_data, SMALL, seed=1, noise_source=fixed_source()) for _ in range(2))
        assert same_params(a.params, b.params) and [l.csv_row() for l in a.logs] == [l.csv_row() for l in b.logs]

    def test_round_streams(self, tiny_params, tiny_data):
        seen = []

        def source(params, train, cfg, rng, confirm):
            seen.append(rng.random())
            return fixed_source()(params, train, cfg, rng, confirm)

        finetune(tiny_params, tiny_data, tiny_data, SMALL, seed=9, noise_source=source)
        assert seen == [rngs.stream(9, rngs.NOISE_INIT, k).random() for k in range(2)]

    def test_skip_unconverged_round(self, tiny_params, tiny_data):
        res = finetune(tiny_params, tiny_data, tiny_data, SMALL, seed=0, noise_source=fixed_source(converged=False))
        assert same_params(res.params, tiny_params)
        assert [l.accepted for l in res.logs] == [False, False]

    def test_abort_unconverged_round(self, tiny_params, tiny_data):
        cfg = FinetuneConfig(**{**SMALL.to_dict(), "on_failure": "abort"})
        with pytest.raises(TrainingError):
            finetune(tiny_params, tiny_data, tiny_data, cfg, seed=0, noise_source=fixed_source(converged=False))

    def test_log_fields(self, tiny_params, tiny_data):
        cfg = FinetuneConfig(**{**SMALL.to_dict(), "eval_fgsm": False})
        res = finetune(tiny_params, tiny_data, tiny_data, cfg, seed=0, noise_source=fixed_source(scale=2.0))
        log = res.logs[1]
        assert log.round == 1 and log.noise_steps == 7 and log.delta == 0.001
        assert abs(log.norm - np.linalg.norm(res.noises[1].values)) < 1e-12 and log.eval_delta > 0
        assert math.isnan(log.fgsm_acc) and 0.0 <= log.clean_acc <= 1.0
        assert log.eval_delta == NoiseEvaluator(res.params, tiny_data.images)(res.noises[1]).mse_prob


class TestRandomBaseline:
    def test_calibration_hits_target(self, tiny_params, tiny_data, rng):
        noise, value = calibrate_gaussian_noise(tiny_params, tiny_data.images, 0.01, rng)
        assert abs(value - 0.01) <= 0.001 and noise.provenance == "random"
        assert NoiseEvaluator(tiny_params, tiny_data.images)(noise).mse_prob == value

    def test_source(self, tiny_params, tiny_data, rng):
        draw = random_noise_source(tiny_params, tiny_data, FinetuneConfig(eps=0.02, batch_size=12), rng, None)
        assert draw.converged and draw.steps == 0 and abs(draw.delta - 0.02) <= 0.002


class TestTrend:
    def test_constant(self):
        logs = [{"norm": 3.0, "accepted": True} for _ in range(4)]
        (trend,) = track_trend(logs, metrics=("norm",))
        assert trend.normalized and np.array_equal(trend.values, np.ones(4))

    def test_doubling(self):
        (trend,) = track_trend([{"norm": 2.0}, {"norm": 4.0}], metrics=("norm",))
        assert np.array_equal(trend.values, [1.0, 2.0])

    def test_zero_first_is_flagged(self):
        (trend,) = track_trend([{"delta": 0.0}, {"delta": 0.5}], metrics=("delta",))
        assert not trend.normalized and np.array_equal(trend.values, [0.0, 0.5])

    def test_rejected_rounds_are_dropped(self):
        logs = [RoundLog(0, True, 0.1, 0.1, 2.0, 1, 1, 1, 1), RoundLog(1, False, 0.1, 0.1, 9.0, 1, 1, 1, 1),
                {"norm": 3.0, "accepted": False}, {"norm": 4.0, "accepted": True}]
        (trend,) = track_trend(logs, metrics=("norm",))
        assert np.array_equal(trend.values, [1.0, 2.0])

    def test_rows(self):
        header, rows = trend_rows(track_trend([{"norm": 1.0, "delta": 2.0}, {"norm": 3.0, "delta": 1.0}], metrics=("norm", "delta")))
        assert header == ["index", "norm", "delta", "norm_normalized", "delta_normalized"]
        assert rows[1] == [1, 3.0, 0.5, True, True]
