"""Scan reconstruction by chaining main-pair predictions along the schedule.

The first window's i*-th frame is the reference. Each window contributes
``T_{j*<-i*}`` and the pose of its j*-th frame in the reference space is
``P_j = P_i . (T_{j*<-i*})^-1``. Frames past the last full window stay
un-localized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio
from .dataio import Scan
from .geometry import (RigidTransform, compose, corner_points, inverse, invert_matrices, pixel_grid,
                       pose_to_transform)
from .metrics import (DegenerateVolumeError, MetricsReport, accumulated_error, final_drift, frame_errors,
                      prefix_accumulated_errors, volume_dice)
from .model import Predictor, predict
from .sampling import TaskSet, chain_schedule, gt_matrices


@dataclass
class ReconstructedScan:
    scan_ref: str
    reference_index: int
    frame_indices: np.ndarray  # localized scan positions, first is the initial j*
    ref_from_frame: np.ndarray  # (K, 4, 4) predicted poses in the reference tool space
    step_transforms: np.ndarray  # (K, 4, 4) the predicted T_{j*<-i*} of every window
    interval: int
    unlocalized: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    model_ref: str = ""

    def __post_init__(self):
        self.frame_indices = np.asarray(self.frame_indices, dtype=np.int64)
        if len(self.frame_indices) and np.any(np.diff(self.frame_indices) != self.interval):
            raise ValueError("localized frames must be evenly spaced by the interval")

    def __len__(self):
        return len(self.frame_indices)

    def with_reference(self) -> np.ndarray:
        """Chain including the identity reference pose at its start."""
        return np.concatenate([np.eye(4)[None], self.ref_from_frame])


def chain_from_steps(steps: np.ndarray) -> np.ndarray:
    """Fold predicted ``T_{j<-i}`` steps into reference<-frame poses."""
    pose = RigidTransform.identity()
    out = []
    for m in steps:
        pose = compose(pose, inverse(RigidTransform.from_matrix(m)))
        out.append(pose.as_matrix())
    return np.stack(out) if out else np.zeros((0, 4, 4))


def reconstruct_from_steps(scan: Scan, tasks: TaskSet, steps: np.ndarray, model_ref: str = "") -> ReconstructedScan:
    """Reconstruction from already-predicted main-pair transforms, one per scheduled window."""
    i_star, j_star = tasks.main
    starts = chain_schedule(scan.n_frames, tasks.M, i_star, j_star)
    steps = np.asarray(steps, dtype=np.float64)
    if len(steps) != len(starts):
        raise ValueError(f"{len(starts)} scheduled windows but {len(steps)} predictions")
    localized = starts + (j_star - 1)
    last = localized[-1]
    unlocalized = np.arange(last + 1, scan.n_frames)
    return ReconstructedScan(
        scan_ref=scan.scan_id,
        reference_index=int(starts[0] + i_star - 1),
        frame_indices=localized,
        ref_from_frame=chain_from_steps(steps),
        step_transforms=steps,
        interval=j_star - i_star,
        unlocalized=unlocalized,
        model_ref=model_ref,
    )


def scheduled_windows(scan: Scan, tasks: TaskSet) -> tuple[np.ndarray, np.ndarray]:
    starts = chain_schedule(scan.n_frames, tasks.M, *tasks.main)
    idx = starts[:, None] + np.arange(tasks.M)
    return scan.frames[idx], scan.world_from_tool[idx]


def reconstruct(model: Predictor, scan: Scan, tasks: TaskSet, batch_size: int = 64,
                model_ref: str = "") -> ReconstructedScan:
    """Run the model over every scheduled window and chain the main-task predictions."""
    if tasks.M != model.config.M or tasks.n_tasks != model.config.n_tasks:
        raise ValueError("task set does not match the model's sequence length / head count")
    frames, _ = scheduled_windows(scan, tasks)
    poses = predict(model, frames, batch_size)[:, 0]
    steps = np.stack([pose_to_transform(p).as_matrix() for p in poses])
    return reconstruct_from_steps(scan, tasks, steps, model_ref)


def ground_truth_steps(scan: Scan, tasks: TaskSet) -> np.ndarray:
    _, poses = scheduled_windows(scan, tasks)
    return gt_matrices(poses, tasks)[:, 0]


def ground_truth_chain(scan: Scan, rec: ReconstructedScan) -> np.ndarray:
    """True reference<-frame poses at the localized frames."""
    w = scan.world_from_tool
    ref = RigidTransform.from_matrix(w[rec.reference_index])
    return np.stack([compose(inverse(ref), RigidTransform.from_matrix(w[k])).as_matrix() for k in rec.frame_indices])


def export_trajectory(rec: ReconstructedScan, scan: Scan, path):
    if len(rec) == 0:
        raise ValueError("refusing to export an empty reconstruction")
    corners = corner_points(scan.width, scan.height, scan.pixel_spacing)
    m = rec.ref_from_frame @ scan.calib.as_matrix()
    poly = np.einsum("kij,pj->kpi", m, corners)[..., :3]
    dataio.write_trajectory(
        path, rec.frame_indices, rec.ref_from_frame, poly,
        meta={
            "scan_ref": rec.scan_ref, "reference_index": rec.reference_index, "interval": rec.interval,
            "model_ref": rec.model_ref, "unlocalized": rec.unlocalized.tolist(),
            "step_transforms": rec.step_transforms.tolist(),
        },
    )


def load_trajectory(path) -> ReconstructedScan:
    obj = dataio.read_trajectory(path)
    meta = obj["meta"]
    return ReconstructedScan(
        scan_ref=meta["scan_ref"],
        reference_index=meta["reference_index"],
        frame_indices=np.asarray(obj["frame_indices"]),
        ref_from_frame=obj["ref_from_frame"],
        step_transforms=np.asarray(meta["step_transforms"], dtype=np.float64),
        interval=meta["interval"],
        unlocalized=np.asarray(meta["unlocalized"], dtype=np.int64),
        model_ref=meta["model_ref"],
    )


@dataclass
class ScanEvaluation:
    frame_err_mm: float
    acc_err_mm: float
    dice: float | None
    drift_mm: float
    per_window_frame_err: np.ndarray
    prefix_acc_err: np.ndarray


def ground_truth_rec_steps(scan: Scan, rec: ReconstructedScan) -> np.ndarray:
    """True ``T_{j*<-i*}`` between consecutive localized frames (the reference first)."""
    w = scan.world_from_tool
    idx = np.concatenate([[rec.reference_index], rec.frame_indices])
    return invert_matrices(w[idx[1:]]) @ w[idx[:-1]]


def evaluate_scan(scan: Scan, rec: ReconstructedScan, pixel_stride: int = 4,
                  voxel_mm: float = 1.0, with_dice: bool = True) -> ScanEvaluation:
    """The four metrics for one reconstructed scan.

    Frame error uses the main-pair prediction of every scheduled window; the
    accumulated error pools over every localized frame and grid pixel; Dice
    includes the reference frame so the first cell is covered.
    """
    corners = corner_points(scan.width, scan.height, scan.pixel_spacing)
    grid = pixel_grid(scan.width, scan.height, scan.pixel_spacing, pixel_stride)
    if rec.scan_ref and rec.scan_ref != scan.scan_id:
        raise ValueError(f"reconstruction of {rec.scan_ref!r} evaluated against scan {scan.scan_id!r}")
    gt_steps = ground_truth_rec_steps(scan, rec)
    per_window = frame_errors(rec.step_transforms, gt_steps, scan.calib, corners)
    gt_chain = ground_truth_chain(scan, rec)
    dice = None
    if with_dice:
        gt_full = np.concatenate([np.eye(4)[None], gt_chain])
        try:
            dice = volume_dice(rec.with_reference(), gt_full, scan.calib,
                               (scan.width, scan.height, scan.pixel_spacing), voxel_mm)
        except DegenerateVolumeError:
            dice = None
    return ScanEvaluation(
        frame_err_mm=float(per_window.mean()),
        acc_err_mm=accumulated_error(rec.ref_from_frame, gt_chain, scan.calib, grid),
        dice=dice,
        drift_mm=final_drift(rec.ref_from_frame, gt_chain, scan.calib, corners),
        per_window_frame_err=per_window,
        prefix_acc_err=prefix_accumulated_errors(rec.ref_from_frame, gt_chain, scan.calib, grid),
    )


def evaluate_scans(scans, recs, pixel_stride: int = 4, voxel_mm: float = 1.0,
                   dice_filter: str | None = None, config_ref: str = "") -> tuple[MetricsReport, dict]:
    """MetricsReport over many scans plus the raw per-scan evaluations.

    ``dice_filter`` restricts Dice to scans whose label contains the string
    (e.g. ``"perpendicular"``).
    """
    report = MetricsReport(config_ref=config_ref)
    details = {}
    for scan, rec in zip(scans, recs):
        with_dice = dice_filter is None or dice_filter in scan.scan_label
        ev = evaluate_scan(scan, rec, pixel_stride, voxel_mm, with_dice)
        report.add(scan.scan_id, frame_err_mm=ev.frame_err_mm, acc_err_mm=ev.acc_err_mm, dice=ev.dice,
                   drift_mm=ev.drift_mm)
        details[scan.scan_id] = ev
    return report, details
