"""Plain supervised training, producing the pretrained model the nullspace procedures start from."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import TrainingError
from .optim import AdamW, cosine_lr
from .vit import ViTParams, accuracy, forward

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 2e-3
    min_lr: float = 1e-5
    weight_decay: float = 0.05
    warmup_epochs: int = 1


def no_decay(name: str) -> bool:
    """Biases, norm gains and embeddings are exempt from weight decay."""
    return name.endswith(("bias", "gain")) or name in ("cls_token", "pos_embed")


def train_supervised(params: ViTParams, dataset: Dataset, cfg: TrainConfig, rng: np.random.Generator, eval_set: Dataset | None = None):
    """Minimize cross-entropy with AdamW and a cosine schedule.

    Returns ``(trained_params, curve)``; ``params`` itself is left untouched.
    ``curve`` holds one dict per epoch with the mean loss, the running
    training accuracy over that epoch's minibatches and, if ``eval_set`` is
    given, its accuracy.
    """
    params = params.copy()
    steps_per_epoch = -(-len(dataset) // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    opt = AdamW(params.arrays, lr=cfg.lr, weight_decay=cfg.weight_decay, no_decay=no_decay)
    curve = []
    step = 0
    dtype = params.dtype
    for epoch in range(cfg.epochs):
        losses, correct = [], 0
        for images, labels in dataset.epoch(rng, cfg.batch_size):
            bound = params.bind()
            z = forward(bound, images.astype(dtype, copy=False))
            loss = T.cross_entropy(z, labels)
            if not np.isfinite(loss.data):
                raise TrainingError("loss became non-finite", step=step)
            loss.backward()
            opt.step(bound.grads(), cosine_lr(step, total, cfg.lr, cfg.min_lr, cfg.warmup_epochs * steps_per_epoch))
            losses.append(loss.item())
            correct += int((z.data.argmax(axis=1) == labels).sum())
            step += 1
        record = {"epoch": epoch + 1, "loss": float(np.mean(losses)), "train_acc": correct / len(dataset)}
        if eval_set is not None:
            record["eval_acc"] = accuracy(params, eval_set.images, eval_set.labels)
        logger.info("epoch %d %s", epoch + 1, record)
        curve.append(record)
    return params, curve
