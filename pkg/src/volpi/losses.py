"""Differentiable training objectives for the segmentation and regression nets.

All functions consume soft probabilities (no argmax inside) and torch
tensors, so gradients flow; the background class (index 0) is excluded
from overlap aggregation.
"""

from __future__ import annotations

import torch

TVERSKY_EPS = 1e-5


def _check_mask_pair(p: torch.Tensor, g: torch.Tensor) -> None:
    if p.shape != g.shape:
        raise ValueError(f"soft mask shape {tuple(p.shape)} != ground truth shape {tuple(g.shape)}")
    if p.dim() < 2:
        raise ValueError("masks must be [N, *spatial] with a leading class axis")


def tversky_loss(
    p: torch.Tensor,
    g: torch.Tensor,
    alpha: float,
    beta: float,
    eps: float = TVERSKY_EPS,
) -> torch.Tensor:
    """Soft Tversky loss over foreground classes.

    ``p`` and ``g`` are [N, D, H, W] (class axis first); ``g`` is one-hot.
    ``alpha`` weights false positives, ``beta`` false negatives. With
    alpha = beta = 0.5 this is the soft Dice loss. Returns a scalar tensor
    in [0, 1]: the mean over classes 1..N-1 of (1 - Tversky index).
    """
    _check_mask_pair(p, g)
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be nonnegative")
    if eps <= 0:
        raise ValueError("eps must be positive")
    dims = tuple(range(1, p.dim()))
    tp = (p * g).sum(dim=dims)
    fp = (p * (1.0 - g)).sum(dim=dims)
    fn = ((1.0 - p) * g).sum(dim=dims)
    index = (tp + eps) / (tp + alpha * fp + beta * fn + eps)
    return (1.0 - index[1:]).mean()


def dice_loss(p: torch.Tensor, g: torch.Tensor, eps: float = TVERSKY_EPS) -> torch.Tensor:
    """Soft Dice loss: the Tversky loss at alpha = beta = 0.5."""
    return tversky_loss(p, g, 0.5, 0.5, eps=eps)


def triad_loss(
    p_lower: torch.Tensor,
    p_mean: torch.Tensor,
    p_upper: torch.Tensor,
    g: torch.Tensor,
    gamma: float,
    eps: float = TVERSKY_EPS,
) -> torch.Tensor:
    """Three-head objective: asymmetric Tversky terms for the bound heads.

    The lower head pays (1 - gamma) per false positive and gamma per false
    negative, so it learns restrictive masks; the upper head mirrors the
    weights and learns permissive masks; the mean head gets plain Dice.
    ``gamma`` must lie strictly inside (0, 0.5).
    """
    if not 0.0 < gamma < 0.5:
        raise ValueError(f"gamma must be in the open interval (0, 0.5), got {gamma}")
    return (
        tversky_loss(p_lower, g, 1.0 - gamma, gamma, eps=eps)
        + tversky_loss(p_mean, g, 0.5, 0.5, eps=eps)
        + tversky_loss(p_upper, g, gamma, 1.0 - gamma, eps=eps)
    )


def pinball_loss(pred, target, t: float) -> torch.Tensor:
    """Quantile (pinball) loss P_t = max(t*(y - yhat), (t-1)*(y - yhat))."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"quantile level t must be in (0, 1), got {t}")
    pred = torch.as_tensor(pred, dtype=torch.float64 if not torch.is_tensor(pred) else None)
    target = torch.as_tensor(target, dtype=pred.dtype)
    diff = target - pred
    return torch.maximum(t * diff, (t - 1.0) * diff)


def pinball_compound_loss(preds: torch.Tensor, targets: torch.Tensor, alpha: float) -> torch.Tensor:
    """Sum over classes of the three-quantile pinball objective.

    ``preds`` holds 3*(N-1) values grouped per class as (lower, median,
    upper) predictions for the alpha/2, 0.5 and 1-alpha/2 quantiles;
    ``targets`` holds the N-1 true values.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    preds = torch.as_tensor(preds)
    targets = torch.as_tensor(targets, dtype=preds.dtype)
    if preds.numel() != 3 * targets.numel():
        raise ValueError(
            f"preds length {preds.numel()} must be 3x targets length {targets.numel()}"
        )
    tri = preds.reshape(-1, 3)
    y = targets.reshape(-1)
    total = (
        pinball_loss(tri[:, 0], y, alpha / 2.0)
        + pinball_loss(tri[:, 1], y, 0.5)
        + pinball_loss(tri[:, 2], y, 1.0 - alpha / 2.0)
    )
    return total.sum()
