"""SGD training and masked fine-tuning."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .data import BatchIterator, Dataset
from .errors import ContractError, NonFiniteError, TrainingDivergedError
from .model import Model, Parameter
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "split", "loss", "accuracy", "lr")


@dataclass
class TrainConfig:
    """Hyperparameters for a training or fine-tuning run.

    ``lr_drop_points`` are fractions of ``epochs``; at epoch index
    ``ceil(fraction * epochs)`` the learning rate is divided by 10. In
    ``finetune`` mode the rate stays constant.
    """

    epochs: int = 30
    base_lr: float = 0.1
    lr_drop_points: Tuple[float, ...] = (0.25, 0.5)
    weight_decay: float = 1e-4
    batch_size: int = 256
    seed: int = 0
    mode: str = "train"

    def __post_init__(self):
        self.lr_drop_points = tuple(self.lr_drop_points)
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if self.base_lr < 0:
            raise ContractError("base_lr must be >= 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.mode not in ("train", "finetune"):
            raise ContractError(f"mode must be 'train' or 'finetune', got {self.mode!r}")
        pts = self.lr_drop_points
        if any(not 0 < p < 1 for p in pts) or any(a >= b for a, b in zip(pts, pts[1:])):
            raise ContractError(f"lr_drop_points must be strictly increasing in (0, 1), got {pts}")

    @classmethod
    def finetune_defaults(cls, **overrides) -> "TrainConfig":
        params = dict(epochs=5, base_lr=0.001, lr_drop_points=(), mode="finetune")
        params.update(overrides)
        return cls(**params)

    def lr_at(self, epoch: int) -> float:
        if self.mode == "finetune":
            return self.base_lr
        drops = sum(1 for frac in self.lr_drop_points if epoch >= math.ceil(frac * self.epochs))
        return self.base_lr * 0.1**drops

    def schedule(self) -> List[float]:
        return [self.lr_at(e) for e in range(self.epochs)]


@dataclass
class EpochLog:
    epoch: int
    split: str
    loss: float
    accuracy: float
    lr: float


def sgd_step(params: Sequence[Parameter], lr: float, weight_decay: float, masks=None) -> None:
    """One in-place update ``w <- w - lr * (grad + weight_decay * w)``.

    When ``masks`` is given the update of every masked entry is zeroed, so
    pruned weights stay exactly where they are.
    """
    if lr == 0:
        return
    for p in params:
        grad = p.tensor.grad
        if grad is None:
            continue
        w = p.tensor.data
        step = grad + weight_decay * w if weight_decay else grad
        if masks is not None and p.name in masks.masks:
            step = step * masks[p.name]
        p.tensor.data = (w - (lr * step).astype(w.dtype)).astype(w.dtype)


def _check_masks(model: Model) -> None:
    if model.masks is None:
        return
    for name, mask in model.masks.items():
        if np.any(model.params[name].data[~mask] != 0):
            raise ContractError(f"pruned entries of {name} became nonzero")


def evaluate(model: Model, dataset: Dataset, batch_size: int = 1024) -> Tuple[float, float]:
    """Mean cross-entropy loss and accuracy over ``dataset``."""
    if len(dataset) == 0:
        return 0.0, 0.0
    logits = model.logits(dataset.images, batch_size)
    with no_grad():
        loss = F.cross_entropy(Tensor(logits), dataset.labels).item()
    acc = float(np.mean(logits.argmax(axis=1) == dataset.labels))
    return loss, acc


def _run(model: Model, dataset: Dataset, config: TrainConfig, eval_set: Optional[Dataset]) -> List[EpochLog]:
    it = BatchIterator(dataset, config.batch_size, config.seed)
    params = list(model.params)
    log: List[EpochLog] = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        total_loss, correct, seen = 0.0, 0, 0
        for b, (images, labels) in enumerate(it):
            model.zero_grad()
            try:
                logits = model.forward(images)
                loss = F.cross_entropy(logits, labels)
                if not math.isfinite(loss.item()):
                    raise NonFiniteError("loss")
                loss.backward()
                sgd_step(params, lr, config.weight_decay, model.masks)
            except NonFiniteError as exc:
                raise TrainingDivergedError(epoch, b, lr, str(exc)) from exc
            total_loss += loss.item() * len(labels)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            seen += len(labels)
        model.zero_grad()
        _check_masks(model)
        log.append(EpochLog(epoch, "train", total_loss / max(seen, 1), correct / max(seen, 1), lr))
        if eval_set is not None:
            loss, acc = evaluate(model, eval_set)
            log.append(EpochLog(epoch, eval_set.split, loss, acc, lr))
        logger.debug("epoch %d lr %.4g loss %.4f acc %.4f", epoch, lr, log[-1].loss, log[-1].accuracy)
    return log


def train(
    model: Model, dataset: Dataset, config: TrainConfig, eval_set: Optional[Dataset] = None
) -> Tuple[Model, List[EpochLog]]:
    """Train ``model`` in place with the step-decay schedule of ``config``.

    Returns the model and one log row per epoch (plus one per epoch for
    ``eval_set`` when given).

    Raises:
        TrainingDivergedError: if a loss or update becomes non-finite.
    """
    if config.mode == "finetune" and model.masks is None:
        raise ContractError("finetune mode requires an active mask set")
    return model, _run(model, dataset, config, eval_set)


def finetune(
    model: Model, dataset: Dataset, config: TrainConfig, eval_set: Optional[Dataset] = None
) -> Tuple[Model, List[EpochLog]]:
    """Constant-rate masked retraining of a pruned model."""
    if model.masks is None:
        raise ContractError("finetune requires masks applied to the model")
    if config.mode != "finetune":
        config = TrainConfig(
            epochs=config.epochs,
            base_lr=config.base_lr,
            lr_drop_points=(),
            weight_decay=config.weight_decay,
            batch_size=config.batch_size,
            seed=config.seed,
            mode="finetune",
        )
    _check_masks(model)
    return model, _run(model, dataset, config, eval_set)


def write_log(rows: Iterable[EpochLog], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
        for r in rows:
            writer.writerow([r.epoch, r.split, f"{r.loss:.6f}", f"{r.accuracy:.6f}", f"{r.lr:g}"])
    return path
