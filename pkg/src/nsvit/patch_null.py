"""Exact input-level nullspace of the patch embedding.

The patch embedding maps each flattened patch ``u`` (length ``p*p*c``) to
``u @ W_e + b``. Any ``v`` with ``v @ W_e = 0`` leaves every token, and hence
the whole model, unchanged. When ``p*p*c > d`` such vectors always exist.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .linalg import DEFAULT_TOL, NullspaceBasis, nullspace
from .noise import compare_outputs
from .vit import logits, unpatchify

logger = logging.getLogger(__name__)


@dataclass
class PatchNoise:
    coeffs: np.ndarray  # (n_patches, nullspace_dim)
    rendered: np.ndarray  # (c, H, W)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.rendered))


def compute_patch_nullspace(params, tol: float = DEFAULT_TOL) -> NullspaceBasis:
    """Left nullspace of the patch weight ``W_e``; its dimension is ``p*p*c - rank(W_e)``."""
    W = np.asarray(params["patch.weight"], dtype=np.float64)
    basis = nullspace(W, tol)
    if basis.is_trivial:
        logger.warning(
            "patch embedding %s has full row rank; its nullspace is trivial (needs p*p*c > d)",
            W.shape,
        )
    return basis


def render_patch_noise(coeffs: np.ndarray, basis: NullspaceBasis, config) -> np.ndarray:
    """Image-shaped noise whose patch ``j`` is ``coeffs[j] @ basis.vectors``."""
    return unpatchify(coeffs @ basis.vectors, config)


def sample_patch_noise(
    basis: NullspaceBasis,
    config,
    scale: float,
    rng: np.random.Generator,
    tiled: bool = False,
) -> PatchNoise:
    """Random image-space noise drawn from the patch nullspace, rescaled to ``||noise|| = scale``.

    Coefficients are i.i.d. standard normal, one row per patch. ``tiled=True``
    reuses a single row for every patch so the same pattern repeats across
    the image.
    """
    if basis.is_trivial:
        raise UsageError("cannot sample from a trivial nullspace")
    if scale < 0:
        raise UsageError("scale must be non-negative")
    n = config.n_patches
    if tiled:
        coeffs = np.repeat(rng.standard_normal((1, basis.dim)), n, axis=0)
    else:
        coeffs = rng.standard_normal((n, basis.dim))
    rendered = render_patch_noise(coeffs, basis, config)
    current = np.linalg.norm(rendered)
    factor = scale / current if current > 0 else 0.0
    return PatchNoise(coeffs * factor, rendered * factor)


@dataclass(frozen=True)
class InvarianceReport:
    max_logit_dev: float
    match_rate: float
    mse_prob: float
    per_image_dev: np.ndarray

    def rows(self):
        return [(i, float(d)) for i, d in enumerate(self.per_image_dev)]


def verify_model_invariance(params, images: np.ndarray, noise, clip: bool = False, clean_logits=None) -> InvarianceReport:
    """Compare model outputs on ``images`` and ``images + noise``.

    ``clip=True`` clips the noised images back to [0, 1]; this breaks exact
    invariance and exists only to show the effect of a valid-pixel constraint.
    """
    images = np.asarray(images, dtype=params.dtype)
    rendered = noise.rendered if isinstance(noise, PatchNoise) else np.asarray(noise)
    noised = images + rendered.astype(params.dtype)
    if clip:
        noised = np.clip(noised, 0.0, 1.0)
    z = logits(params, images) if clean_logits is None else clean_logits
    z_noisy = logits(params, noised)
    dev = np.abs(z_noisy.astype(np.float64) - z).max(axis=1)
    m = compare_outputs(z, z_noisy)
    return InvarianceReport(float(dev.max()) if dev.size else 0.0, m.match_rate, m.mse_prob, dev)
