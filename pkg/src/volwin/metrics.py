"""Dice metric and the Dice + cross-entropy training objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, softmax

DICE_EPS = 1e-5


@dataclass
class Metrics:
    """Per-class Dice scores; the mean skips the background class."""

    per_class: np.ndarray

    @property
    def mean_foreground(self) -> float:
        return float(self.per_class[1:].mean())


def dice_score(pred_labels: np.ndarray, true_labels: np.ndarray, num_classes: int) -> Metrics:
    """Hard Dice per class: 2|P & T| / (|P| + |T|); 1.0 when a class is
    absent from both volumes."""
    pred_labels = np.asarray(pred_labels)
    true_labels = np.asarray(true_labels)
    if pred_labels.shape != true_labels.shape:
        raise ShapeError(f"prediction {pred_labels.shape} does not match truth {true_labels.shape}")
    scores = np.zeros(num_classes)
    for c in range(num_classes):
        p = pred_labels == c
        t = true_labels == c
        denom = p.sum() + t.sum()
        scores[c] = 1.0 if denom == 0 else 2.0 * np.logical_and(p, t).sum() / denom
    return Metrics(per_class=scores)


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    """[N, D, H, W] int -> [N, K, D, H, W] one-hot float."""
    n, d, h, w = labels.shape
    flat = labels.reshape(-1)
    if flat.min() < 0 or flat.max() >= num_classes:
        raise ShapeError(f"labels outside [0, {num_classes})")
    hot = np.zeros((flat.size, num_classes), dtype=dtype)
    hot[np.arange(flat.size), flat] = 1.0
    return hot.reshape(n, d, h, w, num_classes).transpose(0, 4, 1, 2, 3)


def log_softmax(logits: Tensor, axis: int = 1) -> Tensor:
    shifted = logits - Tensor(logits.data.max(axis=axis, keepdims=True))
    return shifted - shifted.exp().sum(axis=axis, keepdims=True).log()


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over all voxels. Logits [N, K, D, H, W]."""
    target = Tensor(one_hot(labels, logits.shape[1], dtype=logits.dtype))
    voxels = logits.size // logits.shape[1]
    return -(log_softmax(logits, 1) * target).sum() / voxels


def soft_dice_loss(logits: Tensor, labels: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """1 - mean soft Dice over classes, computed on softmax probabilities."""
    target = Tensor(one_hot(labels, logits.shape[1], dtype=logits.dtype))
    probs = softmax(logits, axis=1)
    axes = (0, 2, 3, 4)
    inter = (probs * target).sum(axis=axes)
    denom = probs.sum(axis=axes) + Tensor(target.data.sum(axis=axes))
    dice = (2.0 * inter + eps) / (denom + eps)
    return 1.0 - dice.mean()


def dice_ce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Equal-weight sum of soft Dice and cross-entropy terms."""
    return soft_dice_loss(logits, labels) + cross_entropy_loss(logits, labels)
