"""Corner-point losses on predicted inter-frame transforms.

Every loss maps the image-space corners ``p`` through the calibration into tool
space and then through a (predicted, composed or ground-truth) ``T_{j<-i}``,
and compares the resulting point sets with :func:`point_mse`. Predictions are
``(B, T, 6)`` pose vectors in task order; ground truth is ``(B, T, 4, 4)``.
Geometry is evaluated in float64 whatever the network precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import pose_to_matrix_torch
from .sampling import TaskSet


@dataclass(frozen=True)
class LossWeights:
    multi_task: float = 1.0
    consistency: float = 0.0
    accumulated: float = 0.0

    def __post_init__(self):
        if min(self.multi_task, self.consistency, self.accumulated) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.multi_task + self.accumulated <= 0:
            raise ValueError("at least one supervised loss (multi_task or accumulated) needs a positive weight")

    def to_dict(self) -> dict:
        return {"multi_task": self.multi_task, "consistency": self.consistency, "accumulated": self.accumulated}


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(torch.float64)
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def point_mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean over points and x/y/z of squared differences; reduces the last two dims."""
    if a.shape[-2] != b.shape[-2]:
        raise ValueError(f"point counts differ: {a.shape[-2]} vs {b.shape[-2]}")
    d = a[..., :3] - b[..., :3]
    return (d * d).mean(dim=(-1, -2))


def tool_points(calib, corners, image_space: bool = False) -> tuple[torch.Tensor, torch.Tensor | None]:
    """``T_calib . p`` as ``(4, N)`` plus the optional image-space back-projection."""
    calib = _t(calib)
    pts = calib @ _t(corners).T
    back = torch.linalg.inv(calib) if image_space else None
    return pts, back


def _transform(mats: torch.Tensor, pts: torch.Tensor, back: torch.Tensor | None) -> torch.Tensor:
    out = mats @ pts
    if back is not None:
        out = back @ out
    return out.transpose(-1, -2)  # (..., N, 4)


def multi_task_loss(preds, gts, calib, corners, task_weights=None, image_space: bool = False) -> torch.Tensor:
    """Average point MSE over the batch and the tau + 1 tasks."""
    pred_m = pose_to_matrix_torch(_t(preds))
    gts = _t(gts)
    if pred_m.shape != gts.shape:
        raise ValueError(f"predictions {tuple(pred_m.shape)} and ground truth {tuple(gts.shape)} misaligned")
    pts, back = tool_points(calib, corners, image_space)
    per_task = point_mse(_transform(pred_m, pts, back), _transform(gts, pts, back))  # (B, T)
    if task_weights is None:
        return per_task.mean()
    w = _t(task_weights)
    return (per_task * w).sum(-1).mean() / per_task.shape[-1]


def _composed(pred_m: torch.Tensor, triples: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
    ik, kj, ij = (torch.as_tensor(triples[:, c]) for c in range(3))
    direct = pred_m[..., ij, :, :]
    via_k = pred_m[..., kj, :, :] @ pred_m[..., ik, :, :]
    return direct, via_k


def consistency_loss(preds, tasks: TaskSet, calib, corners, image_space: bool = False) -> torch.Tensor | None:
    """Direct T_{j<-i} vs T_{j<-k} . T_{k<-i} over every available triple; None if there is none."""
    triples = tasks.triples
    if len(triples) == 0:
        return None
    pred_m = pose_to_matrix_torch(_t(preds))
    direct, via_k = _composed(pred_m, triples)
    pts, back = tool_points(calib, corners, image_space)
    return point_mse(_transform(direct, pts, back), _transform(via_k, pts, back)).mean()


def accumulated_loss(preds, gts, tasks: TaskSet, calib, corners, image_space: bool = False) -> torch.Tensor | None:
    """Composed prediction T_{j<-k} . T_{k<-i} vs ground-truth T_{j<-i}; None without triples."""
    triples = tasks.triples
    if len(triples) == 0:
        return None
    pred_m = pose_to_matrix_torch(_t(preds))
    gts = _t(gts)
    _, via_k = _composed(pred_m, triples)
    gt_ij = gts[..., torch.as_tensor(triples[:, 2]), :, :]
    pts, back = tool_points(calib, corners, image_space)
    return point_mse(_transform(gt_ij, pts, back), _transform(via_k, pts, back)).mean()


def total_loss(preds, gts, tasks: TaskSet, calib, corners, weights: LossWeights = LossWeights(),
               image_space: bool = False) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the enabled losses, plus the individual terms for logging."""
    parts: dict[str, torch.Tensor] = {}
    if weights.multi_task > 0:
        parts["multi_task"] = multi_task_loss(preds, gts, calib, corners, image_space=image_space)
    for name, fn, args in (
        ("consistency", consistency_loss, (preds, tasks, calib, corners)),
        ("accumulated", accumulated_loss, (preds, gts, tasks, calib, corners)),
    ):
        if getattr(weights, name) > 0:
            value = fn(*args, image_space=image_space)
            if value is None:
                raise ValueError(f"{name} loss enabled but the task set has no (i, k, j) triple")
            parts[name] = value
    total = sum(getattr(weights, k) * v for k, v in parts.items())
    return total, {k: float(v.detach()) for k, v in parts.items()}
