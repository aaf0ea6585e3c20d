"""Distillation and detection losses plus channel partitioning of the student feature.

All feature tensors are channels-first (N, C, H, W). Masks are (N, H, W).
"""

from __future__ import annotations

import math

import torch

from .config import LossWeights, PartitionSpec
from .detectors import DetectionMaps

LOG_EPS = 1e-12


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value: float):
        self.component = component
        super().__init__(f"loss component '{component}' is not finite ({value})")


def partition(f_image: torch.Tensor, spec: PartitionSpec):
    """Split (N, C_S, H, W) into contiguous (image, lidar, label) channel groups."""
    if f_image.shape[1] != spec.total:
        raise ValueError(f"feature has {f_image.shape[1]} channels, partition expects {spec.total}")
    r = spec.ranges
    return tuple(f_image[:, a:b] for a, b in (r["image"], r["lidar"], r["label"]))


def masked_feature_loss(target: torch.Tensor, pred: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """``sum_ij M_ij * ||target_ij - pred_ij||^2 / N_p`` with ``N_p`` the count of nonzero mask cells."""
    if target.shape != pred.shape:
        raise ValueError(f"shape mismatch {tuple(target.shape)} vs {tuple(pred.shape)}")
    n_p = (mask != 0).sum()
    if n_p == 0:
        return pred.sum() * 0.0
    sq = ((target - pred) ** 2).sum(dim=1)
    return (sq * mask.to(sq.dtype)).sum() / n_p.to(sq.dtype)


def lidar_feature_loss(f_lidar, f_lidar_grp, mask, adapter) -> torch.Tensor:
    return masked_feature_loss(f_lidar, adapter(f_lidar_grp), mask)


def label_feature_loss(f_label, f_label_grp, mask, adapter) -> torch.Tensor:
    return masked_feature_loss(f_label, adapter(f_label_grp), mask)


def soft_focal_loss(pred: torch.Tensor, target: torch.Tensor, beta: float = 2.0) -> torch.Tensor:
    """Elementwise quality-focal loss: ``|t - p|^beta * BCE(p, t)``; zero where ``p == t``."""
    bce = -(target * torch.log(pred.clamp_min(LOG_EPS))
            + (1 - target) * torch.log((1 - pred).clamp_min(LOG_EPS)))
    return (target - pred).abs().pow(beta) * bce


def response_loss(teacher: DetectionMaps, student: DetectionMaps, gt_heatmap: torch.Tensor,
                  tau: float = 0.1, beta: float = 2.0) -> torch.Tensor:
    """Soft-focal heatmap + L1 regression distillation inside the ground-truth foreground.

    Each term is summed over channels and divided by the number of foreground cells.
    """
    if teacher.heatmap.shape != student.heatmap.shape or teacher.regress.shape != student.regress.shape:
        raise ValueError("teacher and student maps differ in shape")
    fg = (gt_heatmap.max(dim=1).values >= tau).to(student.heatmap.dtype)  # N, H, W
    n_fg = fg.sum()
    if n_fg == 0:
        return student.heatmap.sum() * 0.0
    cls = (soft_focal_loss(student.heatmap, teacher.heatmap, beta).sum(dim=1) * fg).sum()
    box = ((student.regress - teacher.regress).abs().sum(dim=1) * fg).sum()
    return (cls + box) / n_fg


def gaussian_focal_loss(pred: torch.Tensor, gt: torch.Tensor, alpha: float = 2.0,
                        beta: float = 4.0) -> torch.Tensor:
    """Penalty-reduced focal loss against a Gaussian heatmap, normalized by the peak count (min 1)."""
    pos = (gt == 1).to(pred.dtype)
    neg = 1 - pos
    pos_loss = -torch.log(pred.clamp_min(LOG_EPS)) * (1 - pred).pow(alpha) * pos
    neg_loss = -torch.log((1 - pred).clamp_min(LOG_EPS)) * pred.pow(alpha) * (1 - gt).pow(beta) * neg
    return (pos_loss + neg_loss).sum() / pos.sum().clamp_min(1)


def regression_loss(pred: torch.Tensor, target: torch.Tensor, center_mask: torch.Tensor) -> torch.Tensor:
    """L1 over the six regression channels at object-center cells, per object."""
    m = center_mask.to(pred.dtype)
    return ((pred - target).abs().sum(dim=1) * m).sum() / m.sum().clamp_min(1)


def depth_loss(depth_prob: torch.Tensor, depth_target: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of per-column depth distributions (N, A, D) against bin indices (N, A); -1 ignored."""
    valid = depth_target >= 0
    if not valid.any():
        return depth_prob.sum() * 0.0
    p = depth_prob[valid]
    t = depth_target[valid]
    return -torch.log(p.gather(1, t[:, None]).clamp_min(LOG_EPS)).mean()


def detection_loss(maps: DetectionMaps, heatmap_t: torch.Tensor, regress_t: torch.Tensor,
                   center_mask: torch.Tensor, weights: LossWeights,
                   depth_prob: torch.Tensor | None = None,
                   depth_target: torch.Tensor | None = None) -> torch.Tensor:
    loss = weights.heatmap * gaussian_focal_loss(maps.heatmap, heatmap_t, weights.focal_alpha, weights.focal_beta)
    loss = loss + weights.regress * regression_loss(maps.regress, regress_t, center_mask)
    if depth_prob is not None and weights.depth > 0:
        loss = loss + weights.depth * depth_loss(depth_prob, depth_target)
    return loss


def total_loss(components: dict, weights: LossWeights) -> torch.Tensor:
    """``L_det + l1 * L_lidar_feat + l2 * L_label_feat + l3 * L_lidar_resp``.

    ``components`` maps ``det``, ``lidar_feat``, ``label_feat``, ``lidar_resp``
    to tensors; a missing or ``None`` entry is switched off and contributes
    nothing at all (not a zero-weighted term).
    """
    lam = {"det": 1.0, "lidar_feat": weights.lidar_feat, "label_feat": weights.label_feat,
           "lidar_resp": weights.lidar_resp}
    unknown = set(components) - set(lam)
    if unknown:
        raise KeyError(f"unknown loss components {sorted(unknown)}")
    if components.get("det") is None:
        raise ValueError("detection loss is required")
    out = None
    for name in ("det", "lidar_feat", "label_feat", "lidar_resp"):
        term = components.get(name)
        if term is None:
            continue
        v = float(term.detach())
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
        out = term if name == "det" else out + lam[name] * term
    return out
