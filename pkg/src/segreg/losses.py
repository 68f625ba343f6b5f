"""Differentiable losses for the segmenter and the multi-resolution registration net."""

from __future__ import annotations

import warnings

import torch
import torch.nn.functional as F

from .errors import ContractViolation
from .warp import BORDER_CLAMP, BORDER_ZEROS, warp_batch

EPS = 1e-6


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    """Normalize (H, W) / (C, H, W) / (B, C, H, W) to (B, C*H*W) rows."""
    if x.dim() == 2:
        return x.reshape(1, -1)
    if x.dim() == 3:
        return x.reshape(1, -1)
    if x.dim() == 4:
        return x.reshape(x.shape[0], -1)
    raise ContractViolation(f"expected 2-4 dims, got {x.dim()}")


def _check_pair(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ContractViolation(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.dim() < 2:
        raise ContractViolation("inputs must have at least 2 spatial dims")


def soft_dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Soft Dice loss with squared-sum denominator.

    ``1 - (2 * sum(p * t) + eps) / (sum(p**2) + sum(t**2) + eps)`` with the sums
    over one mask pair; a 4-dim ``(B, C, H, W)`` input is treated as B pairs and
    the per-pair losses are averaged. Inputs live in [0, 1] and may both be
    soft. Identical non-empty inputs give 0, disjoint hard masks give ~1, and a
    pair of all-zero masks gives 0 by the epsilon convention, with a warning
    since overlap is undefined there.
    """
    _check_pair(pred, target)
    p = _as_batch(pred)
    t = _as_batch(target)
    inter = (p * t).sum(dim=1)
    denom = (p * p).sum(dim=1) + (t * t).sum(dim=1)
    if not bool((denom > 0).all()):
        warnings.warn("soft_dice_loss: an all-zero mask pair has undefined overlap, scored 0",
                      RuntimeWarning, stacklevel=2)
    per_pair = 1.0 - (2.0 * inter + eps) / (denom + eps)
    return per_pair.mean()


def gncc(x: torch.Tensor, y: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Global normalized cross-correlation as a loss (negated, so -1 is best).

    ``-(1/|omega|) * sum((x - mean x) * (y - mean y)) / max(std x * std y, eps)``
    with population standard deviations over one image pair; 4-dim input is B
    pairs, averaged. Invariant to positive affine intensity remapping of either
    input and exactly -1 for x against itself. A constant image has zero
    deviation, which the clamped denominator turns into correlation 0 with a
    warning rather than a division failure.
    """
    _check_pair(x, y)
    xr = _as_batch(x)
    yr = _as_batch(y)
    xc = xr - xr.mean(dim=1, keepdim=True)
    yc = yr - yr.mean(dim=1, keepdim=True)
    sx = torch.sqrt((xc * xc).mean(dim=1))
    sy = torch.sqrt((yc * yc).mean(dim=1))
    prod = sx * sy
    if not bool((prod >= eps).all()):
        warnings.warn("gncc: constant input has zero deviation, correlation scored 0",
                      RuntimeWarning, stacklevel=2)
    n = xr.shape[1]
    per_pair = -(xc * yc).sum(dim=1) / (n * torch.clamp(prod, min=eps))
    return per_pair.mean()


def smoothness_penalty(d: torch.Tensor) -> torch.Tensor:
    """Mean squared forward difference of a field, summed over the two axes.

    For a ``(2, H, W)`` field this is
    ``mean((d[:, 1:, :] - d[:, :-1, :])**2) + mean((d[:, :, 1:] - d[:, :, :-1])**2)``
    over valid (unpadded) positions; batched ``(B, 2, H, W)`` input folds the
    batch dim into the same means. Zero exactly for any constant field; a
    1-pixel axis contributes nothing.
    """
    if d.dim() not in (3, 4) or d.shape[-3] != 2:
        raise ContractViolation(f"expected (2, H, W) or (B, 2, H, W) field, got {tuple(d.shape)}")
    total = torch.zeros((), dtype=d.dtype, device=d.device)
    if d.shape[-2] > 1:
        dr = d[..., 1:, :] - d[..., :-1, :]
        total = total + (dr * dr).mean()
    if d.shape[-1] > 1:
        dc = d[..., :, 1:] - d[..., :, :-1]
        total = total + (dc * dc).mean()
    return total


class LambdaSchedule:
    """Per-level smoothness weights, coarse to fine.

    The default halves from 128 down the pyramid: ``[128, 64, 32, 16, 8]`` for
    five levels. Explicit weights override the geometric rule.
    """

    def __init__(self, levels: int, start: float = 128.0, factor: float = 0.5,
                 weights: list[float] | None = None):
        if levels < 1:
            raise ContractViolation("levels must be >= 1")
        if weights is not None:
            if len(weights) != levels:
                raise ContractViolation(f"expected {levels} weights, got {len(weights)}")
            self.weights = [float(w) for w in weights]
        else:
            self.weights = [start * factor ** i for i in range(levels)]
        if any(w < 0 for w in self.weights):
            raise ContractViolation("smoothness weights must be nonnegative")

    def __len__(self) -> int:
        return len(self.weights)

    def __getitem__(self, level: int) -> float:
        return self.weights[level]


def _to_b1hw(img: torch.Tensor, what: str) -> torch.Tensor:
    if img.dim() == 2:
        return img[None, None]
    if img.dim() == 4 and img.shape[1] == 1:
        return img
    raise ContractViolation(f"{what} must be (H, W) or (B, 1, H, W), got {tuple(img.shape)}")


def _image_pyramid(img: torch.Tensor, levels: int) -> list[torch.Tensor]:
    """Coarse-to-fine 2x average-pooled copies of a (B, 1, H, W) image."""
    out = [img]
    for _ in range(levels - 1):
        out.append(F.avg_pool2d(out[-1], 2))
    out.reverse()
    return out


def registration_objective(pyramid: list[torch.Tensor], x_s: torch.Tensor, x_t: torch.Tensor,
                           sched: LambdaSchedule, y_s: torch.Tensor | None = None,
                           y_t: torch.Tensor | None = None) -> torch.Tensor:
    """Multi-resolution alignment objective, averaged over pyramid levels.

    At each level i the full-resolution source/target (and optional masks) are
    average-pooled to the level's size, the source side is warped by the
    cumulative field D_i, and the level contributes
    ``gncc + lambda_i * smoothness`` plus a soft Dice term when both masks are
    given. Masks must come as a pair or not at all; the mean over levels keeps
    gradient magnitude independent of pyramid depth.
    """
    K = len(pyramid)
    if K != len(sched):
        raise ContractViolation(f"pyramid depth {K} does not match schedule length {len(sched)}")
    if (y_s is None) != (y_t is None):
        raise ContractViolation("source and target masks must be supplied together")
    xs = _to_b1hw(x_s, "source image")
    xt = _to_b1hw(x_t, "target image")
    fields = [f[None] if f.dim() == 3 else f for f in pyramid]
    for i, f in enumerate(fields):
        expect = xs.shape[-1] // 2 ** (K - 1 - i)
        if f.shape[-3] != 2 or f.shape[-1] != expect or f.shape[-2] != xs.shape[-2] // 2 ** (K - 1 - i):
            raise ContractViolation(f"pyramid level {i} has shape {tuple(f.shape)}, "
                                    f"expected width {expect}")
    xs_pyr = _image_pyramid(xs, K)
    xt_pyr = _image_pyramid(xt, K)
    if y_s is not None:
        ys_pyr = _image_pyramid(_to_b1hw(y_s, "source mask"), K)
        yt_pyr = _image_pyramid(_to_b1hw(y_t, "target mask"), K)
    total = None
    for i in range(K):
        warped = warp_batch(xs_pyr[i], fields[i], BORDER_CLAMP)
        term = gncc(warped, xt_pyr[i]) + sched[i] * smoothness_penalty(fields[i])
        if y_s is not None:
            warped_mask = warp_batch(ys_pyr[i], fields[i], BORDER_ZEROS)
            term = term + soft_dice_loss(warped_mask, yt_pyr[i])
        total = term if total is None else total + term
    return total / K


def mse_consistency(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between two prediction maps of the same shape."""
    _check_pair(a, b)
    diff = a - b
    return (diff * diff).mean()
