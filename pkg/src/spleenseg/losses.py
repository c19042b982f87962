"""Batch-level Dice loss, least-squares adversarial losses and the gated combination.

Functions accept NumPy arrays or torch tensors; tensors keep the autograd graph.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1e-7
    lam: float = 0.01
    k: int = 100
    # LSGAN targets: fake a, real b, generator c
    a: float = 0.0
    b: float = 1.0
    c: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if int(self.k) != self.k or self.k < 1:
            raise ValueError("gate period k must be a positive integer")

    def to_dict(self) -> dict:
        return asdict(self)


def _sum(x):
    return x.sum() if isinstance(x, torch.Tensor) else np.sum(x, dtype=np.float64)


def _mean(x):
    return x.mean() if isinstance(x, torch.Tensor) else np.mean(x, dtype=np.float64)


def _all(cond) -> bool:
    return bool(cond.all()) if isinstance(cond, torch.Tensor) else bool(np.all(cond))


def batch_dice_loss(P, T, epsilon: float = 1e-7):
    """Negative soft Dice over every voxel of every slice in the batch jointly.

    -(2 sum T*P + eps) / (sum T^2 + sum P^2 + eps), in [-1, 0).
    """
    if tuple(P.shape) != tuple(T.shape):
        raise ValueError(f"shape mismatch: P {tuple(P.shape)} vs T {tuple(T.shape)}")
    if not _all((P >= 0) & (P <= 1)):
        raise ValueError("P must lie in [0, 1]")
    if isinstance(P, torch.Tensor) and not isinstance(T, torch.Tensor):
        T = torch.as_tensor(T, dtype=P.dtype)
    elif isinstance(P, torch.Tensor):
        T = T.to(P.dtype)
    num = 2 * _sum(T * P) + epsilon
    den = _sum(T * T) + _sum(P * P) + epsilon
    return -num / den


def _check_scores(scores, name):
    size = scores.numel() if isinstance(scores, torch.Tensor) else np.size(scores)
    if size == 0:
        raise ValueError(f"empty score map: {name}")


def lsgan_discriminator_loss(scores_real, scores_fake, a: float = 0.0, b: float = 1.0):
    """1/2 E[(D(real) - b)^2] + 1/2 E[(D(fake) - a)^2], means over patches and batch."""
    _check_scores(scores_real, "scores_real")
    _check_scores(scores_fake, "scores_fake")
    return 0.5 * _mean((scores_real - b) ** 2) + 0.5 * _mean((scores_fake - a) ** 2)


def lsgan_generator_loss(scores_fake, c: float = 1.0):
    _check_scores(scores_fake, "scores_fake")
    return 0.5 * _mean((scores_fake - c) ** 2)


def gan_gate(batch_index: int, k: int) -> int:
    """1 on every k-th batch (1-based indexing), else 0."""
    if batch_index < 1:
        raise ValueError("batch_index is 1-based")
    return int(batch_index % k == 0)


def combined_generator_loss(dice, gan_g, cfg: LossConfig, batch_index: int):
    gate = gan_gate(batch_index, cfg.k)
    if not gate:
        return dice
    return dice + cfg.lam * gan_g * gate
