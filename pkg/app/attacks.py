"""
Untargeted white-box attacks: FGSM, PGD (l-inf) and C&W (l2, tanh box).

All functions take a batch of clean images o (B, C, S, S) in [0, 1] with
labels y and return an AttackResult for the whole batch. The loss for
FGSM/PGD is the per-sample cross-entropy summed over the batch, so every
sample receives exactly its own gradient.
"""
import logging
from dataclasses import dataclass
from typing import List

import numpy as np

from app import tensor as T
from app.config import AttackSpec
from app.errors import DataError, NumericError
from app.models import AttackFamily
from app.tensor import Tensor
from app.vit import ViTWeights, input_gradient, predict_logits, run_model

logger = logging.getLogger(__name__)

TANH_SQUEEZE = 1e-6
BUDGET_SLACK = 1e-9


@dataclass
class AttackResult:
    images: np.ndarray
    success: np.ndarray
    linf: np.ndarray
    l2: np.ndarray
    predictions: np.ndarray
    iterations: int

    def __len__(self):
        return len(self.images)


def _check_inputs(weights: ViTWeights, o: np.ndarray, y: np.ndarray):
    cfg = weights.config
    if o.ndim != 4 or o.shape[1:] != (cfg.channels, cfg.image_side, cfg.image_side):
        raise DataError(f"Expected clean images of shape (B, {cfg.channels}, {cfg.image_side}, {cfg.image_side}), got {o.shape}")
    if len(y) != len(o):
        raise DataError(f"{len(o)} images but {len(y)} labels")
    if np.any(o < 0) or np.any(o > 1):
        raise DataError("Clean images must lie in [0, 1]")
    if np.any(y < 0) or np.any(y >= cfg.num_classes):
        raise DataError(f"Labels must lie in [0, {cfg.num_classes})")


def _gradient(weights: ViTWeights, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    _, grad = input_gradient(weights, x, y)
    if not np.all(np.isfinite(grad)):
        bad = np.unique(np.nonzero(~np.isfinite(grad))[0]).tolist()
        raise NumericError(f"Non-finite input gradient for batch rows {bad}")
    return grad


def _result(weights: ViTWeights, o: np.ndarray, x: np.ndarray, iterations: int) -> AttackResult:
    diff = (x - o).reshape(len(o), -1)
    clean = predict_logits(weights, o).argmax(axis=1)
    attacked = predict_logits(weights, x).argmax(axis=1)
    return AttackResult(
        images=x,
        success=attacked != clean,
        linf=np.abs(diff).max(axis=1, initial=0.0),
        l2=np.sqrt((diff ** 2).sum(axis=1)),
        predictions=attacked,
        iterations=iterations,
    )


def _check_budget(result: AttackResult, epsilon: float):
    if np.any(result.linf > epsilon + BUDGET_SLACK):
        raise NumericError(f"l-inf budget {epsilon} exceeded: {result.linf.max()}")
    if np.any(result.images < 0) or np.any(result.images > 1):
        raise NumericError("attacked pixels left [0, 1]")


def fgsm(weights: ViTWeights, o: np.ndarray, y: np.ndarray, epsilon: float) -> AttackResult:
    """x = clip01(o + eps * sign(grad_o L(o, y))); zero gradients leave pixels unchanged."""
    o, y = np.asarray(o, dtype=float), np.asarray(y, dtype=int)
    _check_inputs(weights, o, y)
    x = np.clip(o + epsilon * np.sign(_gradient(weights, o, y)), 0.0, 1.0)
    result = _result(weights, o, x, iterations=1)
    _check_budget(result, epsilon)
    return result


def pgd(weights: ViTWeights, o: np.ndarray, y: np.ndarray, epsilon: float, alpha: float, iterations: int) -> AttackResult:
    """Iterated signed steps of size alpha, projected onto the eps-ball around o and then onto [0, 1]."""
    o, y = np.asarray(o, dtype=float), np.asarray(y, dtype=int)
    _check_inputs(weights, o, y)
    lower, upper = o - epsilon, o + epsilon
    x = o.copy()
    for _ in range(iterations):
        x = x + alpha * np.sign(_gradient(weights, x, y))
        x = np.clip(np.clip(x, lower, upper), 0.0, 1.0)
    result = _result(weights, o, x, iterations=iterations)
    _check_budget(result, epsilon)
    return result


def margin(logits: Tensor, y: np.ndarray, kappa: float) -> Tensor:
    """Q = max(z_y - max_{y' != y} z_y', -kappa) on pre-softmax logits."""
    return T.clip(T.take_last(logits, y) - T.max_excluding(logits, y), lo=-kappa)


def cw(weights: ViTWeights, o: np.ndarray, y: np.ndarray, c: float, kappa: float = 0.0,
       steps: int = 100, lr: float = 1e-2) -> AttackResult:
    """
    Gradient descent on w for ||x(w) - o||^2 + c * Q(x(w)), x(w) = (tanh(w) + 1) / 2.
    Keeps the best iterate per sample; stops early on a non-finite objective.
    """
    o, y = np.asarray(o, dtype=float), np.asarray(y, dtype=int)
    _check_inputs(weights, o, y)
    params = weights.tensors()
    clean = Tensor(o)
    w = np.arctanh(2.0 * np.clip(o, TANH_SQUEEZE, 1.0 - TANH_SQUEEZE) - 1.0)
    best_objective = np.full(len(o), np.inf)
    best = o.copy()
    completed = 0

    for step in range(steps + 1):
        wt = Tensor(w, requires_grad=True)
        x = T.scale(T.tanh(wt) + 1.0, 0.5)
        try:
            logits = run_model(params, x, weights.config)[0]
        except NumericError as exc:
            logger.warning("C&W stopped at step %d: %s; keeping best finite iterate", step, exc)
            break
        distortion = T.sum_(T.square(x - clean), axis=(1, 2, 3))
        objective = distortion + T.scale(margin(logits, y, kappa), c)
        values = objective.data
        if not np.all(np.isfinite(values)):
            logger.warning("C&W objective became non-finite at step %d; keeping best finite iterate", step)
            break
        improved = values < best_objective
        best_objective[improved] = values[improved]
        best[improved] = x.data[improved]
        completed = step
        if step == steps:
            break
        w = w - lr * T.grad_input(T.sum_(objective), wt)

    return _result(weights, o, best, iterations=completed)


def run_attack(weights: ViTWeights, spec: AttackSpec, o: np.ndarray, y: np.ndarray) -> AttackResult:
    if spec.family == AttackFamily.FGSM:
        return fgsm(weights, o, y, spec.epsilon)
    if spec.family == AttackFamily.PGD:
        return pgd(weights, o, y, spec.epsilon, spec.alpha, spec.iterations)
    return cw(weights, o, y, spec.c, spec.kappa, spec.cw_steps, spec.cw_lr)


def merge_results(parts: List[AttackResult]) -> AttackResult:
    return AttackResult(
        images=np.concatenate([p.images for p in parts]),
        success=np.concatenate([p.success for p in parts]),
        linf=np.concatenate([p.linf for p in parts]),
        l2=np.concatenate([p.l2 for p in parts]),
        predictions=np.concatenate([p.predictions for p in parts]),
        iterations=max((p.iterations for p in parts), default=0),
    )
