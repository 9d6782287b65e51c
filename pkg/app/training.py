import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from app import tensor as T
from app.config import TrainConfig, ViTConfig
from app.datasets import Dataset
from app.errors import DataError, NumericError, TrainingDiverged
from app.storage import write_csv
from app.vit import ViTWeights, init_weights, predict_logits, run_model

logger = logging.getLogger(__name__)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class TrainingResult:
    weights: ViTWeights
    history: List[EpochLog] = field(default_factory=list)
    reached_target: bool = False


def accuracy(weights: ViTWeights, images: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predict_logits(weights, images).argmax(axis=1) == labels))


def sgd_step(weights: ViTWeights, params: dict, loss: T.Tensor, velocity: dict, hyper: TrainConfig):
    """Heavy-ball SGD: v = mu * v + g; w = w - lr * v."""
    names = sorted(params)
    for name, grad in zip(names, T.gradients(loss, [params[name] for name in names])):
        velocity[name] = hyper.momentum * velocity[name] + grad
        weights.params[name] = weights.params[name] - hyper.learning_rate * velocity[name]


def train_toy(dataset: Dataset, cfg: ViTConfig, hyper: TrainConfig, seed: int,
              initial: Optional[ViTWeights] = None, log_path: Optional[Path] = None) -> TrainingResult:
    if len(dataset) == 0:
        raise DataError("Cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    weights = initial.copy() if initial is not None else init_weights(cfg, rng)
    velocity = {name: np.zeros_like(value) for name, value in weights.params.items()}
    result = TrainingResult(weights=weights)
    last_good = weights.copy()

    try:
        for epoch in range(1, hyper.epochs + 1):
            order = rng.permutation(len(dataset))
            running = 0.0
            for start in range(0, len(order), hyper.batch_size):
                batch = order[start:start + hyper.batch_size]
                params = weights.tensors(requires_grad=True)
                try:
                    logits = run_model(params, dataset.images[batch], cfg)[0]
                except NumericError as exc:
                    raise TrainingDiverged(f"epoch {epoch}: {exc}", checkpoint=last_good) from exc
                loss = T.cross_entropy(logits, dataset.labels[batch], reduction="mean")
                if not np.isfinite(loss.item()):
                    raise TrainingDiverged(f"epoch {epoch}: non-finite loss", checkpoint=last_good)
                sgd_step(weights, params, loss, velocity, hyper)
                running += loss.item() * len(batch)
                if not all(np.all(np.isfinite(value)) for value in weights.params.values()):
                    raise TrainingDiverged(f"epoch {epoch}: non-finite weights after update", checkpoint=last_good)

            try:
                score = accuracy(weights, dataset.images, dataset.labels)
            except NumericError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", checkpoint=last_good) from exc
            result.history.append(EpochLog(epoch, running / len(dataset), score))
            logger.info("epoch %d: loss %.4f, train accuracy %.3f", epoch, running / len(dataset), score)
            last_good = weights.copy()
            if score >= hyper.target_accuracy:
                result.reached_target = True
                break
    finally:
        if log_path is not None:
            write_csv(log_path, ["epoch", "loss", "accuracy"],
                      ((log.epoch, log.loss, log.accuracy) for log in result.history))

    if not result.reached_target:
        logger.warning("Train accuracy target %.2f not reached after %d epochs", hyper.target_accuracy, hyper.epochs)
    return result
