"""Training objectives for the hybrid representation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from typing import Optional

import torch
from torch import Tensor


@dataclass
class LossWeights:
    eikonal: float = 0.05
    depth_occ: float = 1.0
    depth_sdf: float = 0.1
    normal: float = 0.05

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")


@dataclass
class LossBreakdown:
    rgb_sdf: Tensor
    rgb_feature: Tensor
    eikonal: Tensor
    depth_occ: Tensor
    depth_sdf: Tensor
    normal_occ: Tensor
    normal_sdf: Tensor
    total: Tensor

    TERMS = ("rgb_sdf", "rgb_feature", "eikonal", "depth_occ", "depth_sdf", "normal_occ", "normal_sdf")

    def as_floats(self) -> dict:
        return {f.name: float(torch.as_tensor(getattr(self, f.name)).detach()) for f in fields(self)}

    def to_json_line(self, step: int) -> str:
        return json.dumps({"step": int(step), **self.as_floats()}, sort_keys=True)

    def first_nonfinite(self) -> Optional[str]:
        for name in self.TERMS + ("total",):
            if not torch.isfinite(torch.as_tensor(getattr(self, name))).all():
                return name
        return None


def rgb_l1(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean over rays of the per-ray L1 colour error."""
    if pred.shape != gt.shape:
        raise ValueError(f"pred {tuple(pred.shape)} and gt {tuple(gt.shape)} differ")
    return (pred - gt).abs().sum(dim=-1).mean()


def eikonal(gradient_norms: Tensor) -> Tensor:
    return ((gradient_norms - 1.0) ** 2).mean()


def solve_scale_shift(pred: Tensor, gt: Tensor, mask: Optional[Tensor] = None):
    """Least-squares ``(w, q)`` minimising ``sum (w * pred + q - gt)^2`` over masked rays.

    Returns ``(w, q, degenerate)``. The solve is detached from the graph. When
    every valid prediction is equal the system is singular; then ``w = 1`` and
    ``q`` is the mean residual.
    """
    pred = pred.detach()
    gt = gt.detach()
    if mask is None:
        mask = torch.ones_like(pred, dtype=torch.bool)
    x, y = pred[mask], gt[mask]
    n = x.numel()
    if n == 0:
        return torch.ones((), dtype=pred.dtype), torch.zeros((), dtype=pred.dtype), True
    sx, sy = x.sum(), y.sum()
    sxx, sxy = (x * x).sum(), (x * y).sum()
    det = n * sxx - sx * sx
    scale = torch.clamp(n * sxx, min=torch.finfo(pred.dtype).tiny)
    if n < 2 or det <= 1e-12 * scale:
        return torch.ones((), dtype=pred.dtype), (y - x).mean(), True
    w = (n * sxy - sx * sy) / det
    q = (sxx * sy - sx * sxy) / det
    return w, q, False


def depth_loss(pred: Tensor, gt: Tensor, mask: Optional[Tensor] = None) -> Tensor:
    """Mean squared residual after aligning ``pred`` to ``gt`` with a detached scale and shift."""
    if mask is None:
        mask = torch.isfinite(gt)
    if not mask.any():
        return pred.sum() * 0.0
    w, q, _ = solve_scale_shift(pred, torch.where(mask, gt, torch.zeros_like(gt)), mask)
    res = w * pred[mask] + q - gt[mask]
    return (res ** 2).mean()


def normal_loss(pred: Tensor, gt: Tensor, mask: Optional[Tensor] = None) -> Tensor:
    """Mean over rays of ``|N - N_gt|_1 + |1 - N . N_gt|``."""
    if mask is not None:
        pred, gt = pred[mask], gt[mask]
    if pred.shape[0] == 0:
        return pred.sum() * 0.0
    l1 = (pred - gt).abs().sum(dim=-1)
    ang = (1.0 - (pred * gt).sum(dim=-1)).abs()
    return (l1 + ang).mean()


def total_loss(rgb_sdf, rgb_feature, eikonal, depth_occ, depth_sdf, normal_occ, normal_sdf,
               weights: Optional[LossWeights] = None) -> LossBreakdown:
    """Weighted sum: both rgb terms at weight 1, then eikonal, occupancy depth,
    SDF depth and the pair of normal terms sharing one weight."""
    lw = weights or LossWeights()
    total = (rgb_feature + rgb_sdf + lw.eikonal * eikonal + lw.depth_occ * depth_occ
             + lw.depth_sdf * depth_sdf + lw.normal * (normal_occ + normal_sdf))
    as_t = lambda v: torch.as_tensor(v)
    return LossBreakdown(as_t(rgb_sdf), as_t(rgb_feature), as_t(eikonal), as_t(depth_occ), as_t(depth_sdf),
                         as_t(normal_occ), as_t(normal_sdf), as_t(total))
