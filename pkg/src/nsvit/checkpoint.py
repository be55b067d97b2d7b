"""Saving and loading model parameters and noise tensors in the tensor container."""

from __future__ import annotations

import numpy as np

from . import formats
from .errors import ParseError
from .noise import NoiseVector
from .vit import ModelConfig, ViTParams


def save_params(path, params: ViTParams, extra: dict | None = None) -> None:
    meta = {"kind": "vit", "config": params.config.to_dict()}
    if extra:
        meta["extra"] = extra
    formats.save_container(path, dict(params.items()), meta)


def load_params(path, dtype=np.float32) -> ViTParams:
    meta, tensors = formats.load_container(path)
    if meta.get("kind") != "vit":
        raise ParseError(f"{path} holds {meta.get('kind')!r}, not model parameters")
    config = ModelConfig.from_dict(meta["config"])
    return ViTParams(config, {k: v.astype(dtype) for k, v in tensors.items()})


def save_noise(path, noises, extra: dict | None = None) -> None:
    """Store one or more noise vectors as ``noise.0``, ``noise.1``, ..."""
    noises = [noises] if isinstance(noises, NoiseVector) else list(noises)
    meta = {"kind": "noise", "provenance": [n.provenance for n in noises]}
    if extra:
        meta["extra"] = extra
    formats.save_container(path, {f"noise.{i}": n.values for i, n in enumerate(noises)}, meta)


def load_noise(path) -> list[NoiseVector]:
    meta, tensors = formats.load_container(path)
    if meta.get("kind") != "noise":
        raise ParseError(f"{path} holds {meta.get('kind')!r}, not noise")
    provenance = meta.get("provenance", [])
    return [NoiseVector(tensors[f"noise.{i}"], provenance[i]) for i in range(len(tensors))]
