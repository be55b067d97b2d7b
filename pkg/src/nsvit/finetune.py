"""Nullspace-noise augmented fine-tuning, and its random-noise baseline.

Each round first obtains a noise ``v`` in token-embedding space, then takes
``model_steps`` optimizer steps on ``CE(z, y) + CE(z', y)``, where ``z'`` is
computed with ``v`` added to the patch tokens. The noise is frozen during
those steps. The two modes share one loop and differ only in where ``v``
comes from:

* ``nullspace``: ``v`` is learned afresh each round with
  :func:`~nsvit.noise.learn_eps_noise`, so it is an eps-approximate
  nullspace noise of the current model.
* ``random``: ``v`` is a Gaussian draw whose scale is bisected until its
  MSE probability on a calibration batch is close to ``eps``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import rng as rngs
from . import tensor as T
from .data import Dataset
from .errors import NumericError, TrainingError, UsageError
from .noise import NoiseEvaluator, NoiseVector, learn_eps_noise
from .optim import AdamW, cosine_lr
from .properties import fgsm_accuracy
from .train import no_decay
from .vit import accuracy, forward_tokens, patch_embed

logger = logging.getLogger(__name__)

MODES = ("nullspace", "random")
# at 1e-5 four hundred steps barely move the toy model, so the admitted noise never grows
TOY_MODEL_LR = 5e-4
FAILURE_POLICIES = ("skip", "abort")


@dataclass(frozen=True)
class FinetuneConfig:
    """Hyperparameters of one fine-tuning run.

    ``noise_steps`` and ``batch_size`` are reduced for the toy model
    (1000 and 64); the remaining defaults are the full-scale values.
    :data:`TOY_MODEL_LR` is the fine-tuning rate used on the toy model.
    ``confirm_size`` training images re-score every candidate noise and
    the candidate is only accepted if that score is also below ``eps``.
    """

    rounds: int = 20
    noise_steps: int = 1000
    model_steps: int = 40
    batch_size: int = 64
    eps: float = 0.03
    noise_lr: float = 0.1
    model_lr: float = 1e-5
    limit: float = 3.0
    weight_decay: float = 0.05
    mode: str = "nullspace"
    noise_optimizer: str = "adamw"
    confirm_size: int = 512
    on_failure: str = "skip"
    fgsm_eps: float = 1.0 / 255.0
    eval_fgsm: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise UsageError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.on_failure not in FAILURE_POLICIES:
            raise UsageError(f"unknown failure policy {self.on_failure!r}")
        if self.rounds < 0:
            raise UsageError("rounds must be non-negative")
        for name in ("noise_steps", "model_steps", "batch_size", "eps", "noise_lr", "model_lr", "limit"):
            if not getattr(self, name) > 0:
                raise UsageError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "FinetuneConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


@dataclass
class RoundLog:
    round: int
    accepted: bool
    delta: float  # minibatch (or calibration batch) MSE probability at acceptance
    eval_delta: float  # MSE probability over the whole eval split
    norm: float
    match_rate: float  # over the eval split
    clean_acc: float
    fgsm_acc: float
    noise_steps: int
    wall_time: float = field(default=0.0, compare=False)

    CSV_FIELDS = ("round", "accepted", "delta", "eval_delta", "norm", "match_rate", "clean_acc", "fgsm_acc", "noise_steps")

    def csv_row(self) -> tuple:
        """Every field but ``wall_time``, which would make reruns differ."""
        return tuple(getattr(self, name) for name in self.CSV_FIELDS)


@dataclass
class FinetuneResult:
    params: object
    logs: list
    noises: list


@dataclass(frozen=True)
class NoiseDraw:
    noise: NoiseVector
    delta: float
    converged: bool
    steps: int


def learned_noise_source(params, train: Dataset, cfg: FinetuneConfig, rng: np.random.Generator, confirm: Dataset | None) -> NoiseDraw:
    result = learn_eps_noise(
        params,
        train,
        eps=cfg.eps,
        lr=cfg.noise_lr,
        max_steps=cfg.noise_steps,
        limit=cfg.limit,
        rng=rng,
        batch_size=cfg.batch_size,
        optimizer=cfg.noise_optimizer,
        confirm_set=confirm,
        confirm_gate=confirm is not None,
    )
    return NoiseDraw(result.noise, result.delta, result.converged, result.steps)


def calibrate_gaussian_noise(
    params,
    images: np.ndarray,
    eps: float,
    rng: np.random.Generator,
    rel_tol: float = 0.1,
    max_iter: int = 60,
) -> tuple[NoiseVector, float]:
    """Gaussian token noise rescaled by bisection so its MSE probability on ``images`` is ``eps``.

    The direction is a standard normal draw; only its norm is searched, on a
    log scale, until the measured value is within ``rel_tol * eps`` of
    ``eps``. Returns the noise and the value it achieves.
    """
    cfg = params.config
    direction = rng.standard_normal((cfg.n_patches, cfg.embed_dim))
    direction /= np.linalg.norm(direction)
    ev = NoiseEvaluator(params, images)

    def influence(scale):
        return ev(scale * direction).mse_prob

    lo, hi = 0.0, 1.0
    while influence(hi) < eps:
        lo, hi = hi, hi * 4.0
        if hi > 1e8:
            raise NumericError("no noise scale reaches eps; the model ignores this direction")
    scale, value = hi, influence(hi)
    for _ in range(max_iter):
        if abs(value - eps) <= rel_tol * eps:
            break
        scale = np.sqrt(lo * hi) if lo > 0 else hi / 2.0
        value = influence(scale)
        if value < eps:
            lo = scale
        else:
            hi = scale
    else:
        raise NumericError(f"bisection did not reach eps within {max_iter} iterations (last {value:.4g})")
    return NoiseVector(scale * direction, "random"), value


def random_noise_source(params, train: Dataset, cfg: FinetuneConfig, rng: np.random.Generator, confirm: Dataset | None) -> NoiseDraw:
    images, _ = train.sample_batch(rng, cfg.batch_size)
    noise, value = calibrate_gaussian_noise(params, images, cfg.eps, rng)
    return NoiseDraw(noise, value, True, 0)


NOISE_SOURCES = {"nullspace": learned_noise_source, "random": random_noise_source}


def finetune(params, train: Dataset, eval_set: Dataset, cfg: FinetuneConfig, seed: int, noise_source=None) -> FinetuneResult:
    """Run ``cfg.rounds`` rounds of noise synthesis followed by augmented training.

    The noise comes from ``NOISE_SOURCES[cfg.mode]`` unless ``noise_source``
    overrides it. Round ``k`` draws its noise from noise-init substream
    ``k`` and its minibatches from data-shuffle substream ``k``, so a round's
    randomness does not depend on what earlier rounds consumed.
    """
    source = noise_source or NOISE_SOURCES[cfg.mode]
    params = params.copy()
    confirm = train.subset(slice(0, cfg.confirm_size)) if cfg.confirm_size else None
    total = cfg.rounds * cfg.model_steps
    opt = AdamW(params.arrays, lr=cfg.model_lr, weight_decay=cfg.weight_decay, no_decay=no_decay)
    logs, noises = [], []
    step = 0
    for k in range(cfg.rounds):
        start = time.perf_counter()
        draw = source(params, train, cfg, rngs.stream(seed, rngs.NOISE_INIT, k), confirm)
        if not draw.converged:
            if cfg.on_failure == "abort":
                raise TrainingError(f"round {k}: noise did not reach eps={cfg.eps} (best {draw.delta:.4g})", step=step)
            logger.warning("round %d: noise did not converge, skipping its model steps", k)
        else:
            data_rng = rngs.stream(seed, rngs.DATA_SHUFFLE, k)
            v = draw.noise.values.astype(params.dtype)
            for _ in range(cfg.model_steps):
                images, labels = train.sample_batch(data_rng, cfg.batch_size)
                _augmented_step(params, opt, images, labels, v, cosine_lr(step, total, cfg.model_lr))
                step += 1
        logs.append(_round_log(k, params, eval_set, cfg, draw, time.perf_counter() - start))
        noises.append(draw.noise)
        logger.info("round %d %s", k, logs[-1])
    return FinetuneResult(params, logs, noises)


def nullspace_finetune(params, train: Dataset, eval_set: Dataset, cfg: FinetuneConfig, seed: int) -> FinetuneResult:
    return finetune(params, train, eval_set, replace(cfg, mode="nullspace"), seed)


def random_noise_finetune(params, train: Dataset, eval_set: Dataset, cfg: FinetuneConfig, seed: int) -> FinetuneResult:
    return finetune(params, train, eval_set, replace(cfg, mode="random"), seed)


def _augmented_step(params, opt: AdamW, images, labels, v: np.ndarray, lr: float) -> None:
    bound = params.bind()
    tokens = patch_embed(bound, images.astype(params.dtype, copy=False))
    loss = T.cross_entropy(forward_tokens(bound, tokens), labels) + T.cross_entropy(forward_tokens(bound, tokens, v), labels)
    if not np.isfinite(loss.data):
        raise TrainingError("augmented loss became non-finite")
    loss.backward()
    opt.step(bound.grads(), lr)


def _round_log(k: int, params, eval_set: Dataset, cfg: FinetuneConfig, draw: NoiseDraw, seconds: float) -> RoundLog:
    metrics = NoiseEvaluator(params, eval_set.images)(draw.noise)
    return RoundLog(
        round=k,
        accepted=draw.converged,
        delta=draw.delta,
        eval_delta=metrics.mse_prob,
        norm=draw.noise.norm,
        match_rate=metrics.match_rate,
        clean_acc=accuracy(params, eval_set.images, eval_set.labels),
        fgsm_acc=fgsm_accuracy(params, eval_set, cfg.fgsm_eps) if cfg.eval_fgsm else float("nan"),
        noise_steps=draw.steps,
        wall_time=seconds,
    )


@dataclass(frozen=True)
class Trend:
    name: str
    values: np.ndarray
    normalized: bool  # False when the first value was zero and the series is left as is


def track_trend(logs, metrics=("norm", "delta", "eval_delta", "clean_acc", "fgsm_acc")) -> list[Trend]:
    """Each metric's series over accepted rounds, divided by its first value."""
    kept = [log for log in logs if _get(log, "accepted", True) not in (False, "false")]
    out = []
    for name in metrics:
        series = np.array([float(_get(log, name)) for log in kept])
        if series.size and series[0] != 0 and np.isfinite(series[0]):
            out.append(Trend(name, series / series[0], True))
        else:
            out.append(Trend(name, series, False))
    return out


def trend_rows(trends: list[Trend]) -> tuple[list, list]:
    """Header and rows (one per accepted round) for a trend CSV."""
    header = ["index"] + [t.name for t in trends] + [f"{t.name}_normalized" for t in trends]
    n = max((len(t.values) for t in trends), default=0)
    rows = [[i] + [t.values[i] for t in trends] + [t.normalized for t in trends] for i in range(n)]
    return header, rows


def _get(log, name, default=None):
    if isinstance(log, dict):
        return log.get(name, default) if default is not None else log[name]
    return getattr(log, name, default) if default is not None else getattr(log, name)
