"""The standard toy setup: desk data plus a pretrained model, both derived from one seed."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngs
from .data import Dataset, make_desk_dataset
from .train import TrainConfig, train_supervised
from .vit import ModelConfig, ViTParams, accuracy

PRETRAIN = TrainConfig(epochs=12)


@dataclass
class Pretrained:
    params: ViTParams
    train: Dataset
    test: Dataset
    curve: list
    train_acc: float
    test_acc: float


def desk_data(seed: int, n_train: int = 2000, n_test: int = 600) -> tuple[Dataset, Dataset]:
    return make_desk_dataset(n_train, n_test, rngs.stream(seed, rngs.DATA_SYNTH))


def pretrain(
    seed: int,
    train: Dataset,
    test: Dataset | None = None,
    config: ModelConfig | None = None,
    cfg: TrainConfig = PRETRAIN,
    dtype=np.float32,
) -> Pretrained:
    """Initialize from the model-init substream and train on ``train``."""
    config = config or ModelConfig()
    params = ViTParams.init(config, rngs.stream(seed, rngs.MODEL_INIT), dtype)
    params, curve = train_supervised(params, train.astype(dtype), cfg, rngs.stream(seed, rngs.DATA_SHUFFLE))
    train_acc = accuracy(params, train.images, train.labels)
    test_acc = accuracy(params, test.images, test.labels) if test is not None else float("nan")
    return Pretrained(params, train, test, curve, train_acc, test_acc)


def desk_pretrained(seed: int = 0, **kwargs) -> Pretrained:
    train, test = desk_data(seed)
    return pretrain(seed, train, test, **kwargs)
