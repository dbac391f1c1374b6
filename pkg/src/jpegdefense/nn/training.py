"""Mini-batch training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .adam import AdamState, adam_step
from .layers import Dropout
from .network import Model, backward, to_input

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    dropout_rate: float = 0.5
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")


def _with_dropout(model: Model, rate: float) -> Model:
    layers = tuple(Dropout(rate) if isinstance(l, Dropout) else l for l in model.spec.layers)
    return Model(replace(model.spec, layers=layers), model.params, model.rng_seed)


def train(model: Model, dataset, cfg: TrainConfig) -> Model:
    """Train a copy of ``model`` on ``dataset`` (``.images`` uint8, ``.labels``).

    Shuffling and dropout masks come from one generator seeded with
    ``cfg.seed``, so identical inputs give bit-identical parameters.
    """
    images = np.asarray(dataset.images)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if labels.min() < 0 or labels.max() >= model.spec.classes:
        raise ValueError(f"labels must lie in [0, {model.spec.classes})")

    work = _with_dropout(model.copy(), cfg.dropout_rate)
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    x_all = to_input(images)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            grads, _, loss = backward(work, x_all[idx], labels[idx], train_mode=True, rng=rng)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            work.params, state = adam_step(work.params, grads, state)
            total += loss * len(idx)
        log.debug("epoch %d loss %.4f", epoch + 1, total / len(order))
    return Model(model.spec, work.params, model.rng_seed)
