"""Training losses and the hide-and-seek augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

EPS = 1e-7
DICE_SMOOTH = 1.0


@dataclass
class LossValue:
    total: torch.Tensor
    bce: torch.Tensor
    dice: torch.Tensor

    def item(self) -> float:
        return float(self.total.detach())


def _check(prob, target):
    if prob.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(prob.shape)} vs {tuple(target.shape)}")


def bce_loss(prob: torch.Tensor, target: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Mean binary cross-entropy with probabilities clamped to [eps, 1-eps]."""
    _check(prob, target)
    p = prob.clamp(eps, 1 - eps)
    t = target.to(p.dtype)
    return -(t * p.log() + (1 - t) * (1 - p).log()).mean()


def dice_loss(prob: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """``1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s)``.

    A 2-D input is one sample; with a leading batch dim the loss is
    computed per sample and averaged.
    """
    _check(prob, target)
    t = target.to(prob.dtype)
    if prob.ndim <= 2:
        prob, t = prob[None], t[None]
    p = prob.flatten(1)
    t = t.flatten(1)
    coeff = (2 * (p * t).sum(1) + smooth) / (p.sum(1) + t.sum(1) + smooth)
    return (1 - coeff).mean()


def segmentation_loss(prob, target, w_bce: float = 1.0, w_dice: float = 1.0) -> LossValue:
    bce = bce_loss(prob, target)
    dice = dice_loss(prob, target)
    return LossValue(total=w_bce * bce + w_dice * dice, bce=bce, dice=dice)


def hide_and_seek(image: np.ndarray, grid: int, p_hide: float, rng: np.random.Generator,
                  fill: np.ndarray | None = None) -> np.ndarray:
    """Replace each cell of a ``grid`` x ``grid`` partition with ``fill``
    (per-channel mean, of the image unless given) with probability
    ``p_hide``. Returns a new array; the input is untouched."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    if grid < 1 or h % grid or w % grid:
        raise ValueError(f"image {h}x{w} is not divisible into a {grid}x{grid} grid")
    if not 0.0 <= p_hide <= 1.0:
        raise ValueError("p_hide must lie in [0, 1]")
    if fill is None:
        fill = image.reshape(-1, image.shape[-1]).mean(0)
    hidden = rng.random((grid, grid)) < p_hide
    ph, pw = h // grid, w // grid
    cell_mask = np.repeat(np.repeat(hidden, ph, axis=0), pw, axis=1)
    out = image.copy()
    out[cell_mask] = fill
    return out
