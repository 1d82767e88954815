"""Training objectives for imbalanced classes and soft labels, plus mixup.

All losses take sigmoid probabilities, treat dim 0 as batch and dim 1 as
channel (one-vs-all per channel), and reduce to a scalar mean. Targets may
be soft (values in [0, 1]).
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import VoxsegError

_CLAMP = 1e-7


def _check_pair(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise VoxsegError(f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")


def _flat(t: torch.Tensor) -> torch.Tensor:
    """(B, C, V) view; low-rank inputs become a single batch/channel."""
    if t.ndim >= 3:
        return t.reshape(t.shape[0], t.shape[1], -1)
    return t.reshape(1, 1, -1)


def dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps), mean over (B, C)."""
    _check_pair(pred, target)
    if eps <= 0:
        raise VoxsegError(f"dice smoothing eps must be > 0, got {eps}")
    for name, t in (("pred", pred), ("target", target)):
        if t.min() < 0 or t.max() > 1:
            raise VoxsegError(f"{name} values outside [0, 1]")
    p, t = _flat(pred), _flat(target)
    inter = (p * t).sum(dim=2)
    denom = p.sum(dim=2) + t.sum(dim=2)
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


def cross_entropy_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_pair(pred, target)
    p = pred.clamp(_CLAMP, 1.0 - _CLAMP)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def focal_loss(pred: torch.Tensor, target: torch.Tensor, gamma: float = 2.0,
               alpha: float = 0.5) -> torch.Tensor:
    """Focusing-weighted cross entropy; gamma = 0, alpha = 0.5 halves CE."""
    _check_pair(pred, target)
    if gamma < 0:
        raise VoxsegError(f"gamma must be >= 0, got {gamma}")
    p = pred.clamp(_CLAMP, 1.0 - _CLAMP)
    pos = -alpha * target * (1.0 - p) ** gamma * torch.log(p)
    neg = -(1.0 - alpha) * (1.0 - target) * p**gamma * torch.log(1.0 - p)
    return (pos + neg).mean()


def focal_dice_loss(pred: torch.Tensor, target: torch.Tensor, gamma: float = 2.0,
                    alpha: float = 0.5, lambda_mix: float = 0.5,
                    eps: float = 1.0) -> torch.Tensor:
    """Convex combination lambda*focal + (1-lambda)*dice."""
    if not 0.0 <= lambda_mix <= 1.0:
        raise VoxsegError(f"lambda_mix must lie in [0, 1], got {lambda_mix}")
    return lambda_mix * focal_loss(pred, target, gamma, alpha) + (
        1.0 - lambda_mix
    ) * dice_loss(pred, target, eps)


def adaptive_wing_loss(pred: torch.Tensor, target: torch.Tensor, omega: float = 14.0,
                       theta: float = 0.5, epsilon: float = 1.0,
                       alpha: float = 2.1) -> torch.Tensor:
    """Wing loss adapted to soft targets.

    With d = |target - pred|: omega*ln(1 + (d/epsilon)^(alpha - target)) for
    d < theta, else A*d - C where the per-voxel A, C make the two branches
    meet with continuous value and slope at d = theta.
    """
    _check_pair(pred, target)
    if theta <= 0 or epsilon <= 0:
        raise VoxsegError(f"theta and epsilon must be > 0, got {(theta, epsilon)}")
    d = (target - pred).abs()
    power = alpha - target
    ratio = (theta / epsilon) ** power
    a = omega * (1.0 / (1.0 + ratio)) * power * (theta / epsilon) ** (power - 1.0) / epsilon
    c = theta * a - omega * torch.log1p(ratio)
    near = omega * torch.log1p((d / epsilon) ** power)
    far = a * d - c
    return torch.where(d < theta, near, far).mean()


def l2_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_pair(pred, target)
    return ((pred - target) ** 2).mean()


_LOSSES = {
    "dice": dice_loss,
    "cross_entropy": cross_entropy_loss,
    "focal": focal_loss,
    "focal_dice": focal_dice_loss,
    "adaptive_wing": adaptive_wing_loss,
    "l2": l2_loss,
}


def build_loss(name: str, params: dict | None = None):
    """Loss callable with config params bound; unknown names rejected."""
    if name not in _LOSSES:
        raise VoxsegError(f"unknown loss {name!r}; choose from {sorted(_LOSSES)}")
    params = dict(params or {})
    fn = _LOSSES[name]

    def loss(pred, target):
        return fn(pred, target, **params)

    loss.__name__ = name
    return loss


def mixup_batch(images: torch.Tensor, labels: torch.Tensor, beta: float,
                rng_seed: int):
    """Pair samples by random permutation and blend with lambda ~ Beta(beta, beta).

    The same per-pair lambda mixes image and label voxel-wise, so targets
    become soft. Returns (mixed images, mixed labels, lambda values).
    """
    if images.shape[0] < 2:
        raise VoxsegError(f"mixup needs batch size >= 2, got {images.shape[0]}")
    if images.shape[0] != labels.shape[0]:
        raise VoxsegError("images and labels disagree on batch size")
    if beta <= 0:
        raise VoxsegError(f"beta must be > 0, got {beta}")
    rng = np.random.default_rng(rng_seed)
    batch = images.shape[0]
    perm = torch.as_tensor(rng.permutation(batch))
    lam = torch.as_tensor(rng.beta(beta, beta, size=batch), dtype=images.dtype)
    lam_img = lam.reshape((batch,) + (1,) * (images.ndim - 1))
    lam_lab = lam.reshape((batch,) + (1,) * (labels.ndim - 1))
    mixed_x = lam_img * images + (1.0 - lam_img) * images[perm]
    mixed_y = lam_lab * labels + (1.0 - lam_lab) * labels[perm]
    return mixed_x, mixed_y, lam
