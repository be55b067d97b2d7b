"""Empirical properties of the approximate nullspace, and robustness probes.

The approximate nullspace is the set of noises whose output influence
(MSE probability) stays below ``eps``. It is not a vector space. The sweeps
here measure how far it behaves like one: how the influence grows under
scalar scaling, and whether convex combinations of two members stay inside.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngs
from . import tensor as T
from .data import Dataset
from .errors import UsageError
from .noise import EpsNoiseResult, NoiseEvaluator, NoiseVector, learn_eps_noise
from .vit import accuracy, forward

DEFAULT_ALPHAS = tuple(np.round(np.arange(0.0, 2.0001, 0.1), 10))
CHECK_ALPHAS = (0.25, 0.5, 0.75, 1.0)


def learn_noise_set(
    params,
    dataset: Dataset,
    m: int,
    seed: int,
    eps: float = 0.03,
    confirm_set: Dataset | None = None,
    **kwargs,
) -> list[EpsNoiseResult]:
    """Learn ``m`` independent eps-noises, member ``j`` from noise-init substream ``j``.

    Extra keyword arguments go to :func:`learn_eps_noise`. When ``confirm_set``
    is given every member is gated on it.
    """
    out = []
    for j in range(m):
        rng = rngs.stream(seed, rngs.NOISE_INIT, j)
        out.append(learn_eps_noise(params, dataset, eps=eps, rng=rng, confirm_set=confirm_set,
                                   confirm_gate=confirm_set is not None, **kwargs))
    return out


@dataclass(frozen=True)
class SweepCurve:
    alphas: np.ndarray
    mse_prob: np.ndarray  # (len(alphas),) mean over noises
    per_noise: np.ndarray  # (n_noises, len(alphas))

    def rows(self):
        return [(float(a), float(v)) for a, v in zip(self.alphas, self.mse_prob)]


def scaling_sweep(params, images: np.ndarray, noises, alphas=DEFAULT_ALPHAS, evaluator: NoiseEvaluator | None = None) -> SweepCurve:
    """Mean MSE probability of ``alpha * v`` over the noise set, per ``alpha``."""
    ev = evaluator or NoiseEvaluator(params, images)
    alphas = np.asarray(alphas, dtype=np.float64)
    per = np.empty((len(noises), len(alphas)))
    for i, v in enumerate(noises):
        values = _values(v)
        for j, a in enumerate(alphas):
            per[i, j] = 0.0 if a == 0 else ev(a * values).mse_prob
    return SweepCurve(alphas, per.mean(axis=0), per)


@dataclass(frozen=True)
class PropertyGrid:
    alphas: np.ndarray  # grid axis, shared by alpha_1 and alpha_2
    values: np.ndarray  # (len(alphas), len(alphas)); [i, j] is the mean at (alphas[i], alphas[j])
    pairs: tuple

    def rows(self):
        return [
            (float(a1), float(a2), float(self.values[i, j]))
            for i, a1 in enumerate(self.alphas)
            for j, a2 in enumerate(self.alphas)
        ]

    def on_segment(self) -> np.ndarray:
        """Cells with ``alpha_1 + alpha_2 = 1``, ordered by ``alpha_1``."""
        k = len(self.alphas) - 1
        return np.array([self.values[i, k - i] for i in range(k + 1)])


def sample_pairs(m: int, n: int, rng: np.random.Generator, both_orders: bool = False) -> tuple:
    """``n`` distinct unordered index pairs from ``range(m)``; optionally each pair in both orders."""
    all_pairs = [(i, j) for i in range(m) for j in range(i + 1, m)]
    if n > len(all_pairs):
        raise UsageError(f"only {len(all_pairs)} distinct pairs exist among {m} noises")
    chosen = [all_pairs[k] for k in np.sort(rng.choice(len(all_pairs), size=n, replace=False))]
    if both_orders:
        chosen = chosen + [(j, i) for i, j in chosen]
    return tuple(chosen)


def convex_grid(params, images: np.ndarray, noises, pairs, grid_step: float = 0.1, evaluator: NoiseEvaluator | None = None) -> PropertyGrid:
    """Mean MSE probability of ``a1 * v_i + a2 * v_j`` over ``pairs`` on a grid over [0, 1]^2."""
    if not pairs:
        raise UsageError("need at least one pair")
    steps = int(round(1.0 / grid_step))
    if not np.isclose(steps * grid_step, 1.0):
        raise UsageError("grid_step must divide 1")
    alphas = np.round(np.linspace(0.0, 1.0, steps + 1), 10)
    ev = evaluator or NoiseEvaluator(params, images)
    total = np.zeros((len(alphas), len(alphas)))
    for i, j in pairs:
        vi, vj = _values(noises[i]), _values(noises[j])
        for a, a1 in enumerate(alphas):
            for b, a2 in enumerate(alphas):
                if a1 == 0 and a2 == 0:
                    continue
                total[a, b] += ev(a1 * vi + a2 * vj).mse_prob
    return PropertyGrid(alphas, total / len(pairs), tuple(pairs))


def input_gradient(params, images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of the mean cross-entropy with respect to the input pixels."""
    x = T.Tensor(np.asarray(images, dtype=params.dtype), requires_grad=True)
    loss = T.cross_entropy(forward(params, x), np.asarray(labels))
    loss.backward()
    return x.grad


def fgsm_attack(params, images: np.ndarray, labels: np.ndarray, eps_pix: float) -> np.ndarray:
    """One signed-gradient step of size ``eps_pix`` on pixels in [0, 1], clipped back to [0, 1]."""
    if eps_pix < 0:
        raise UsageError("eps_pix must be non-negative")
    images = np.asarray(images, dtype=params.dtype)
    if eps_pix == 0:
        return images.copy()
    step = np.sign(input_gradient(params, images, labels))
    return np.clip(images + eps_pix * step, 0.0, 1.0).astype(params.dtype)


def fgsm_accuracy(params, dataset: Dataset, eps_pix: float = 1.0 / 255.0, batch_size: int = 200) -> float:
    """Accuracy on FGSM-perturbed copies of ``dataset``."""
    correct = 0
    for start in range(0, len(dataset), batch_size):
        images = dataset.images[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        adv = fgsm_attack(params, images, labels, eps_pix)
        correct += int(round(accuracy(params, adv, labels) * len(labels)))
    return correct / len(dataset)


def corruption_accuracy(params, dataset: Dataset, sigma: float = 0.1, seed: int = 0) -> float:
    """Accuracy under additive Gaussian pixel noise of std ``sigma``, clipped to [0, 1]."""
    rng = rngs.stream(seed, "corruption")
    noisy = np.clip(dataset.images + sigma * rng.standard_normal(dataset.images.shape), 0.0, 1.0)
    return accuracy(params, noisy.astype(params.dtype), dataset.labels)


def _values(v) -> np.ndarray:
    if isinstance(v, EpsNoiseResult):
        v = v.noise
    return v.values if isinstance(v, NoiseVector) else np.asarray(v)
