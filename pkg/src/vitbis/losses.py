"""Segmentation losses.

Conventions, with the alternative forms reachable through ``verbatim=True``:

* binary cross entropy is returned negated and mean-reduced (the verbatim
  form is the summed log-likelihood, which would have to be maximized);
* the soft Dice numerator carries a factor 2 (without it a perfect
  prediction scores about 0.5).

The voxel-wise combined loss keeps a squared-term Dice denominator and a
positive-sign cross-entropy term, so ``trainable=True`` flips the latter for
optimization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import DomainError, ShapeMismatch
from .tensor import Tensor, as_tensor, clip, log, reduce_mean, reduce_sum, square

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    beta: float = 0.5
    epsilon: float = 1e-4

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.epsilon <= 0:
            raise DomainError("alpha, beta must be >= 0 and epsilon > 0")


def _check_binary(y: Tensor) -> None:
    if not np.all((y.data == 0.0) | (y.data == 1.0)):
        raise DomainError("targets must be binary (0 or 1)")


def _check_pair(p: Tensor, y: Tensor) -> None:
    if p.shape != y.shape:
        raise ShapeMismatch(f"prediction {p.shape} and target {y.shape} differ")


def bce_loss(p, y, verbatim: bool = False) -> Tensor:
    """Mean binary cross entropy of probabilities ``p`` against binary ``y``."""
    p, y = as_tensor(p), as_tensor(y)
    _check_pair(p, y)
    _check_binary(y)
    pc = clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = y * log(pc) + (1.0 - y) * log(1.0 - pc)
    if verbatim:
        return reduce_sum(ll)
    return -reduce_mean(ll)


def dice_loss(p, y, eps: float = 1e-4, verbatim: bool = False) -> Tensor:
    p, y = as_tensor(p), as_tensor(y)
    _check_pair(p, y)
    _check_binary(y)
    if p.data.min() < 0.0 or p.data.max() > 1.0:
        raise DomainError("probabilities must lie in [0, 1]")
    overlap = reduce_sum(y * p)
    if not verbatim:
        overlap = overlap * 2.0
    return 1.0 - (overlap + eps) / (reduce_sum(y) + reduce_sum(p) + eps)


def combined_loss(p, y, eps: float = 1e-4) -> Tensor:
    return bce_loss(p, y) + dice_loss(p, y, eps)


def voxelwise_combined_loss(Y, G, cfg: LossConfig = LossConfig(), trainable: bool = False) -> Tensor:
    """Dice plus cross-entropy over flattened voxels.

    ``Y`` holds ``[I, J]`` class probabilities (rows sum to one) and ``G`` the
    matching one-hot targets::

        1 - alpha * 2/J * sum_j (sum_i G Y) / (sum_i G^2 + sum_i Y^2)
          + beta / I * sum_i sum_j G log Y

    ``trainable=True`` negates the cross-entropy term.
    """
    Y, G = as_tensor(Y), as_tensor(G)
    _check_pair(Y, G)
    if Y.ndim != 2:
        raise ShapeMismatch("expected [voxels, classes] arrays")
    if not np.allclose(Y.data.sum(axis=1), 1.0, rtol=0.0, atol=1e-6):
        raise DomainError("probability rows must sum to 1")
    _check_binary(G)
    if not np.all(G.data.sum(axis=1) == 1.0):
        raise DomainError("targets must be one-hot")
    n_vox, n_cls = Y.shape
    overlap = reduce_sum(G * Y, axis=0)
    denom = reduce_sum(square(G), axis=0) + reduce_sum(square(Y), axis=0)
    dice = reduce_sum(overlap / denom) * (cfg.alpha * 2.0 / n_cls)
    ce = reduce_sum(G * log(clip(Y, PROB_CLAMP, 1.0))) * (cfg.beta / n_vox)
    if trainable:
        ce = -ce
    return 1.0 - dice + ce


def flatten_classes(x: Tensor) -> Tensor:
    """``[B, J, H, W] -> [B*H*W, J]``."""
    b, j, h, w = x.shape
    return x.permute(0, 2, 3, 1).reshape(b * h * w, j)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """``[B, H, W]`` integer labels to ``[B, J, H, W]`` float one-hot."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DomainError(f"labels outside [0, {num_classes})")
    return np.moveaxis(np.eye(num_classes)[labels], -1, 1)


def segmentation_loss(logits: Tensor, labels: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    """Training objective: softmax over classes, trainable voxel-wise loss."""
    probs = F.softmax(logits, axis=1)
    target = Tensor(one_hot(labels, logits.shape[1]))
    return voxelwise_combined_loss(flatten_classes(probs), flatten_classes(target), cfg, trainable=True)
