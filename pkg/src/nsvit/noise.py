"""Learning approximate encoder-level nullspace noise.

Noise lives in token-embedding space, shape ``(n_patches, d)``. It is added
to the patch tokens ``U = f_e(X)`` of every sample in a batch before the cls
token is prepended, and its influence is measured at the classifier output.

Two objectives are provided:

* :func:`loss_regularized`: mean unsquared logit distance minus
  ``lam * log ||v||``, an exploratory objective whose log term keeps ``v``
  away from the trivial zero solution.
* :func:`learn_eps_noise`: the thresholded inner loop of nullspace
  augmentation. It descends the mean squared logit distance and stops as soon
  as the minibatch MSE probability drops below ``eps``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import NumericError, TrainingError, UsageError
from .optim import AdamW, cosine_lr
from .tensor import Tensor
from .vit import embed_images, forward_tokens, patch_embed, token_logits

logger = logging.getLogger(__name__)

PROVENANCES = ("learned", "random", "permuted", "constructed")


@dataclass
class NoiseVector:
    values: np.ndarray
    provenance: str = "learned"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise UsageError(f"unknown provenance {self.provenance!r}")
        if not np.all(np.isfinite(self.values)):
            raise NumericError("noise has non-finite entries")

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def scaled(self, alpha: float) -> "NoiseVector":
        return NoiseVector(alpha * self.values, self.provenance)


@dataclass(frozen=True)
class NoiseMetrics:
    match_rate: float
    mse_prob: float
    mse_logit: float


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def compare_outputs(z_clean: np.ndarray, z_noisy: np.ndarray) -> NoiseMetrics:
    """Match rate, MSE probability and MSE logit between two logit batches."""
    z_clean = np.asarray(z_clean, dtype=np.float64)
    z_noisy = np.asarray(z_noisy, dtype=np.float64)
    match = float(np.mean(z_clean.argmax(axis=1) == z_noisy.argmax(axis=1)))
    dp = softmax(z_noisy) - softmax(z_clean)
    dz = z_noisy - z_clean
    return NoiseMetrics(match, float(np.mean((dp * dp).sum(axis=1))), float(np.mean((dz * dz).sum(axis=1))))


def mse_probability(z_clean, z_noisy) -> float:
    return compare_outputs(z_clean, z_noisy).mse_prob


class NoiseEvaluator:
    """Caches patch tokens and clean logits of a fixed image set so many noises can be scored cheaply."""

    def __init__(self, params, images: np.ndarray, batch_size: int = 256):
        self.params = params
        self.batch_size = batch_size
        self.tokens = embed_images(params, np.asarray(images, dtype=params.dtype), batch_size)
        self.clean = token_logits(params, self.tokens, None, batch_size)

    def logits(self, v) -> np.ndarray:
        values = v.values if isinstance(v, NoiseVector) else np.asarray(v)
        return token_logits(self.params, self.tokens, values.astype(self.params.dtype), self.batch_size)

    def __call__(self, v) -> NoiseMetrics:
        return compare_outputs(self.clean, self.logits(v))


def evaluate_noise(params, images: np.ndarray, v, batch_size: int = 256) -> NoiseMetrics:
    """Influence of noise ``v`` on the model's outputs over ``images``."""
    return NoiseEvaluator(params, images, batch_size)(v)


def permute_noise(v: NoiseVector, rng: np.random.Generator) -> NoiseVector:
    """Uniformly shuffle all scalar entries of ``v``; the norm is unchanged."""
    flat = v.values.reshape(-1)
    return NoiseVector(flat[rng.permutation(flat.size)].reshape(v.shape), "permuted")


def uniform_noise(shape, limit: float, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-limit, limit, size=shape)


def _batch_terms(params, images):
    with T.no_grad():
        tokens = patch_embed(params, np.asarray(images, dtype=params.dtype)).data
        clean = forward_tokens(params, tokens).data
    return tokens, clean


def _regularized_terms(params, tokens, clean, v: Tensor, lam: float):
    vnorm = T.norm(v, axis=None)
    if lam > 0 and not vnorm.data > 0:
        raise NumericError("log of zero noise norm; initialize the noise away from 0")
    noisy = forward_tokens(params, tokens, v)
    invariance = T.norm(noisy - clean, axis=-1).mean()
    loss = invariance if lam == 0 else invariance - T.scale(T.log(vnorm), lam)
    return loss, noisy.data


def loss_regularized(params, images: np.ndarray, v, lam: float) -> Tensor:
    """Mean over the batch of ``||z(u+v) - z(u)||_2`` minus ``lam * log ||v||_2``."""
    if lam < 0:
        raise UsageError("lam must be non-negative")
    v = v if isinstance(v, Tensor) else Tensor(v)
    tokens, clean = _batch_terms(params, images)
    return _regularized_terms(params, tokens, clean, v, lam)[0]


def squared_logit_loss(params, tokens: np.ndarray, clean: np.ndarray, v: Tensor) -> Tensor:
    """Mean over the batch of ``||z(u+v) - z(u)||_2^2``."""
    diff = forward_tokens(params, tokens, v) - clean
    return (diff * diff).sum(axis=-1).mean()


class _NoiseStepper:
    """Gradient descent or AdamW (with cosine decay) on a single noise array."""

    def __init__(self, values: np.ndarray, lr: float, steps: int, optimizer: str, weight_decay: float = 0.01):
        if optimizer not in ("sgd", "adamw"):
            raise UsageError(f"unknown optimizer {optimizer!r}")
        self.values = values
        self.lr, self.steps, self.optimizer = lr, steps, optimizer
        self.t = 0
        if optimizer == "adamw":
            self.adam = AdamW({"v": self.values}, lr=lr, weight_decay=weight_decay)

    def __call__(self, grad: np.ndarray) -> None:
        if self.optimizer == "sgd":
            self.values -= self.lr * grad
        else:
            self.adam.step({"v": grad}, cosine_lr(self.t, self.steps, self.lr))
        self.t += 1


@dataclass
class RegularizedResult:
    noise: NoiseVector
    trace: list = field(default_factory=list)


def learn_noise_regularized(
    params,
    dataset: Dataset,
    lam: float,
    lr: float,
    steps: int,
    rng: np.random.Generator,
    batch_size: int = 64,
    init_limit: float = 1.0,
    optimizer: str = "sgd",
) -> RegularizedResult:
    """Minimize :func:`loss_regularized` from a uniform initialization.

    Every step draws a fresh minibatch. The trace records the loss, noise
    norm, MSE probability and match rate of each step's minibatch, measured
    before that step's update.
    """
    if lam < 0:
        raise UsageError("lam must be non-negative")
    cfg = params.config
    values = uniform_noise((cfg.n_patches, cfg.embed_dim), init_limit, rng).astype(params.dtype)
    step_fn = _NoiseStepper(values, lr, steps, optimizer)
    trace = []
    for step in range(steps):
        images, _ = dataset.sample_batch(rng, batch_size)
        tokens, clean = _batch_terms(params, images)
        v = Tensor(values, requires_grad=True)
        loss, noisy = _regularized_terms(params, tokens, clean, v, lam)
        if not np.isfinite(loss.data):
            raise TrainingError("noise loss became non-finite", step=step)
        m = compare_outputs(clean, noisy)
        trace.append({
            "step": step,
            "loss": loss.item(),
            "norm": float(np.linalg.norm(values)),
            "mse_prob": m.mse_prob,
            "match_rate": m.match_rate,
        })
        loss.backward()
        step_fn(v.grad)
    return RegularizedResult(NoiseVector(values.copy(), "learned"), trace)


@dataclass
class EpsNoiseResult:
    """Outcome of :func:`learn_eps_noise`.

    ``noise`` is the accepted noise when ``converged``; otherwise it is the
    iterate with the lowest minibatch MSE probability seen (``delta``).
    """

    noise: NoiseVector
    delta: float
    converged: bool
    steps: int
    confirm_delta: float | None = None
    trace: list = field(default_factory=list)


def learn_eps_noise(
    params,
    dataset: Dataset,
    eps: float = 0.03,
    lr: float = 0.1,
    max_steps: int = 3000,
    limit: float = 3.0,
    rng: np.random.Generator | None = None,
    batch_size: int = 64,
    optimizer: str = "adamw",
    confirm_set: Dataset | None = None,
    confirm_gate: bool = False,
    init: np.ndarray | None = None,
) -> EpsNoiseResult:
    """Find noise whose minibatch MSE probability falls below ``eps``.

    ``v`` starts as ``U(-limit, limit)`` elementwise. Each step draws a fresh
    minibatch, computes ``delta`` (mean squared distance between softmax
    outputs with and without ``v``) and stops if ``delta < eps``; otherwise it
    takes one step on the mean squared logit distance. ``optimizer="sgd"``
    is the literal update ``v <- v - lr * grad``; the default ``"adamw"``
    uses AdamW with cosine decay over ``max_steps``.

    With ``confirm_set`` every candidate that passes the minibatch check is
    re-scored on that whole set (``confirm_delta``). If ``confirm_gate`` is
    set, the candidate is only accepted when the confirmed value is also
    below ``eps``; otherwise descent continues. Without the gate a confirmed
    value above ``2 * eps`` is logged as a warning.
    """
    if eps <= 0:
        raise UsageError("eps must be positive")
    rng = rng if rng is not None else np.random.default_rng()
    cfg = params.config
    if init is None:
        values = uniform_noise((cfg.n_patches, cfg.embed_dim), limit, rng).astype(params.dtype)
    else:
        values = np.array(init, dtype=params.dtype)
    confirm = NoiseEvaluator(params, confirm_set.images) if confirm_set is not None else None
    step_fn = _NoiseStepper(values, lr, max(max_steps, 1), optimizer)
    best_values, best_delta = values.copy(), np.inf
    trace = []
    converged = False
    confirm_delta = None
    step = 0
    for step in range(max_steps + 1):
        images, _ = dataset.sample_batch(rng, batch_size)
        tokens, clean = _batch_terms(params, images)
        v = Tensor(values, requires_grad=True)
        noisy = forward_tokens(params, tokens, v)
        delta = mse_probability(clean, noisy.data)
        record = {"step": step, "delta": delta, "norm": float(np.linalg.norm(values))}
        trace.append(record)
        if delta < best_delta:
            best_delta, best_values = delta, values.copy()
        if delta < eps:
            if confirm is None:
                converged = True
                break
            confirm_delta = confirm(values).mse_prob
            record["confirm_delta"] = confirm_delta
            if not confirm_gate or confirm_delta < eps:
                converged = True
                break
        if step == max_steps:
            break
        diff = noisy - clean
        loss = (diff * diff).sum(axis=-1).mean()
        if not np.isfinite(loss.data):
            raise TrainingError("noise loss became non-finite", step=step)
        loss.backward()
        step_fn(v.grad)

    if converged:
        result = EpsNoiseResult(NoiseVector(values.copy(), "learned"), float(delta), True, step, confirm_delta, trace)
        if confirm_delta is not None and confirm_delta > 2 * eps:
            logger.warning("accepted noise has full-set delta %.4g > 2*eps", confirm_delta)
    else:
        logger.warning("noise did not reach eps=%g in %d steps (best delta %.4g)", eps, max_steps, best_delta)
        result = EpsNoiseResult(NoiseVector(best_values, "learned"), float(best_delta), False, step, None, trace)
    return result
