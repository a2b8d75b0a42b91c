"""Training objectives over score vectors.

Every function accepts array-likes or float64 tensors and returns a 0-d
tensor, so the same call works for a hand-checked value and inside autograd.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

_SQRT2 = math.sqrt(2.0)


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == torch.float64 else x.to(torch.float64)
    # contiguous copy: torch cannot wrap numpy views with negative strides
    return torch.as_tensor(np.ascontiguousarray(x, dtype=np.float64))


def _check_finite(t: torch.Tensor, name: str) -> None:
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains non-finite values")


@dataclass
class NormalizedScores:
    values: torch.Tensor
    shift: torch.Tensor
    scale: torch.Tensor

    @property
    def degenerate(self) -> bool:
        return bool((self.scale == 0).any())


def median(q: torch.Tensor) -> torch.Tensor:
    """Median along the last axis; even lengths average the two middle order statistics."""
    n = q.shape[-1]
    ordered = torch.sort(q, dim=-1).values
    if n % 2:
        return ordered[..., n // 2]
    return 0.5 * (ordered[..., n // 2 - 1] + ordered[..., n // 2])


def relative_map(q) -> NormalizedScores:
    """Map scores to zero median and unit mean absolute deviation along the last axis.

    A constant input has zero spread; it maps to all zeros and reports scale 0.
    """
    q = as_tensor(q)
    if q.ndim == 0 or q.shape[-1] < 2:
        raise ValueError("relative_map needs at least 2 scores")
    shift = median(q)
    centred = q - shift.unsqueeze(-1)
    scale = centred.abs().mean(dim=-1)
    ok = (scale > 0).unsqueeze(-1)
    safe = torch.where(ok, scale.unsqueeze(-1), torch.ones_like(scale).unsqueeze(-1))
    values = torch.where(ok, centred / safe, torch.zeros_like(centred))
    return NormalizedScores(values, shift, scale)


def _groups(x) -> list[torch.Tensor]:
    if isinstance(x, torch.Tensor):
        x = x.to(torch.float64)
        if x.ndim == 1:
            return [x]
        if x.ndim == 2:
            return list(x.unbind(0))
        raise ValueError("scene-grouped scores must be 1-d or 2-d")
    if len(x) and not hasattr(x[0], "__len__") and not isinstance(x[0], torch.Tensor):
        return [as_tensor(x)]
    return [as_tensor(g) for g in x]


def ssi_loss(pred, gt) -> torch.Tensor:
    """Scale-shift invariant loss over scene groups.

    ``pred`` and ``gt`` are aligned groups, one per scene (a list of vectors or
    an ``S x K`` tensor). Each group is mapped to the relative quality space
    independently; the loss is the mean absolute gap over all entries.
    """
    pred_groups, gt_groups = _groups(pred), _groups(gt)
    if len(pred_groups) != len(gt_groups) or not pred_groups:
        raise ValueError("pred and gt must hold the same, non-zero number of scene groups")
    total = None
    count = 0
    for p, g in zip(pred_groups, gt_groups):
        if p.shape != g.shape:
            raise ValueError(f"group shape mismatch {tuple(p.shape)} vs {tuple(g.shape)}")
        if p.shape[-1] < 2:
            raise ValueError("every scene group needs K >= 2 scores")
        gap = (relative_map(p).values - relative_map(g).values).abs().sum()
        total = gap if total is None else total + gap
        count += p.shape[-1]
    return total / count


def merged_rank_loss(pred, gt) -> torch.Tensor:
    """Pairwise exponential rank penalty plus squared error on consecutive pairs.

    Elements ``(0, 1), (2, 3), ...`` form the pairs. A pair pays
    ``exp(pred[i] - pred[i+1])`` when ``gt[i] < gt[i+1]``, and every pair pays
    ``(gt[i] - pred[i])**2``. The sum is scaled by ``2 / N``.
    """
    pred, gt = as_tensor(pred).reshape(-1), as_tensor(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt lengths differ")
    n = pred.shape[0]
    if n < 2 or n % 2:
        raise ValueError("merged_rank_loss needs an even number (>= 2) of scores")
    first, second = pred[0::2], pred[1::2]
    rank = torch.where(gt[0::2] < gt[1::2], torch.exp(first - second), torch.zeros_like(first))
    return (2.0 / n) * (rank + (gt[0::2] - first) ** 2).sum()


def pair_label(jod_x: float, jod_y: float) -> int:
    """1 when x is at least as good as y, else 0."""
    return 1 if jod_x >= jod_y else 0


def normal_cdf(z: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.special.erfc(-z / _SQRT2)


def _safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    positive = x > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, x, torch.ones_like(x))), torch.zeros_like(x))


def fidelity_loss(qx, qy, p, reduction: str = "mean") -> torch.Tensor:
    """Fidelity loss between a pair label and the Thurstone comparison probability.

    ``p_hat = Phi((qx - qy) / sqrt(2))``; both ``p_hat`` and ``1 - p_hat`` are
    evaluated through ``erfc`` so neither loses precision near saturation.
    """
    qx, qy, p = as_tensor(qx), as_tensor(qy), as_tensor(p)
    diff = qx - qy
    p_hat = 0.5 * torch.special.erfc(-diff / 2.0)
    q_hat = 0.5 * torch.special.erfc(diff / 2.0)
    loss = 1.0 - _safe_sqrt(p * p_hat) - _safe_sqrt((1.0 - p) * q_hat)
    if reduction == "none":
        return loss
    if reduction == "sum":
        return loss.sum()
    return loss.mean()


def patch_loss(pred_patches, gt_score, squared: bool = False) -> torch.Tensor:
    """Mean deviation of patch predictions from the score they inherit from their image.

    ``gt_score`` may be a scalar or broadcast against ``pred_patches`` (e.g. an
    ``(images, 1)`` column for an ``(images, patches)`` matrix).
    """
    pred = as_tensor(pred_patches)
    if pred.numel() == 0:
        raise ValueError("patch_loss needs at least one patch prediction")
    gt = as_tensor(gt_score)
    _check_finite(gt, "gt_score")
    resid = pred - gt
    return (resid ** 2).mean() if squared else resid.abs().mean()


def huber_loss(pred, gt, delta: float = 0.2) -> torch.Tensor:
    if delta <= 0:
        raise ValueError("delta must be positive")
    pred, gt = as_tensor(pred), as_tensor(gt)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt lengths differ")
    r = (pred - gt).abs()
    quad = 0.5 * r ** 2
    lin = delta * (r - 0.5 * delta)
    return torch.where(r <= delta, quad, lin).mean()


def scene_grouped(values: torch.Tensor, groups: Sequence[Sequence[int]]) -> list[torch.Tensor]:
    """Gather ``values`` into per-scene vectors given index lists."""
    return [values[list(g)] for g in groups]
