"""Evaluation metrics for reconstructed scans.

A *chain* is a ``(K, 4, 4)`` stack (or list of RigidTransform) of
reference<-frame poses: frame ``k``'s tool coordinates expressed in the tool
coordinates of the scan's reference frame. Pixel ``p`` of frame ``k`` then sits
at ``chain[k] . calib . p`` in the reference space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import as_matrices, corner_points

METRIC_NAMES = ("frame_err_mm", "acc_err_mm", "dice", "drift_mm")

# vertex order of a hexahedron built from two frames' corner_points (0..3 and 4..7)
_HEX_ORDER = (0, 1, 3, 2)
_HEX_TETS = np.array([(0, 1, 3, 4), (1, 2, 3, 6), (1, 4, 5, 6), (3, 4, 6, 7), (1, 3, 4, 6)])


class DegenerateVolumeError(ValueError):
    """The swept volume is (numerically) empty, so Dice is undefined."""


def _positions(chain, calib, pts) -> np.ndarray:
    """``(K, P, 3)`` reference-space positions of image points for every frame."""
    m = as_matrices(chain) @ as_matrices(calib)[0]
    return np.einsum("kij,pj->kpi", m, np.asarray(pts, dtype=np.float64))[..., :3]


def frame_errors(preds, gts, calib, corners) -> np.ndarray:
    """Per-transform mean corner distance (mm) between predicted and true ``T . calib . p``."""
    p = _positions(preds, calib, corners)
    g = _positions(gts, calib, corners)
    if p.shape != g.shape:
        raise ValueError("prediction and ground truth counts differ")
    return np.linalg.norm(p - g, axis=-1).mean(axis=-1)


def frame_error(pred, gt, calib, corners) -> float:
    return float(frame_errors(pred, gt, calib, corners)[0])


def accumulated_error(pred_chain, gt_chain, calib, pixel_grid) -> float:
    """Mean pixel distance pooled over every (frame, pixel) pair."""
    p = _positions(pred_chain, calib, pixel_grid)
    g = _positions(gt_chain, calib, pixel_grid)
    if p.shape != g.shape:
        raise ValueError(f"chains differ in length: {len(p)} vs {len(g)}")
    if len(p) == 0:
        raise ValueError("empty chain")
    return float(np.linalg.norm(p - g, axis=-1).mean())


def prefix_accumulated_errors(pred_chain, gt_chain, calib, pixel_grid) -> np.ndarray:
    """``accumulated_error`` of every prefix ``chain[:k]``, k = 1..K."""
    p = _positions(pred_chain, calib, pixel_grid)
    g = _positions(gt_chain, calib, pixel_grid)
    per_frame = np.linalg.norm(p - g, axis=-1).mean(axis=-1)
    return np.cumsum(per_frame) / np.arange(1, len(per_frame) + 1)


def final_drift(pred_chain, gt_chain, calib, corners) -> float:
    p, g = as_matrices(pred_chain), as_matrices(gt_chain)
    if len(p) == 0 or len(g) == 0:
        raise ValueError("empty chain")
    return frame_error(p[-1], g[-1], calib, corners)


# -- volume overlap ------------------------------------------------------------


def hexahedra_from_chain(chain, calib, corners) -> np.ndarray:
    """``(K-1, 8, 3)`` cells swept between adjacent frames."""
    c = _positions(chain, calib, corners)[:, _HEX_ORDER]
    if len(c) < 2:
        raise ValueError("need at least two frames to form a hexahedron")
    return np.concatenate([c[:-1], c[1:]], axis=1)


@dataclass(frozen=True)
class VoxelGrid:
    origin: np.ndarray
    voxel: float
    shape: tuple[int, int, int]

    @classmethod
    def covering(cls, points: np.ndarray, voxel: float) -> "VoxelGrid":
        lo = points.reshape(-1, 3).min(axis=0)
        hi = points.reshape(-1, 3).max(axis=0)
        shape = np.maximum(np.ceil((hi - lo) / voxel - 1e-9).astype(int), 1)
        return cls(lo, float(voxel), tuple(int(s) for s in shape))

    def centres(self, lo_idx, hi_idx) -> np.ndarray:
        axes = [self.origin[d] + (np.arange(lo_idx[d], hi_idx[d]) + 0.5) * self.voxel for d in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def voxelize_hexahedra(hexes: np.ndarray, grid: VoxelGrid, tol: float = 1e-9) -> np.ndarray:
    """Boolean occupancy of voxel centres inside any hexahedron (5-tetrahedron split)."""
    occ = np.zeros(grid.shape, dtype=bool)
    shape = np.array(grid.shape)
    for tet in np.asarray(hexes)[:, _HEX_TETS].reshape(-1, 4, 3):
        a = tet[0]
        m = (tet[1:] - a).T
        det = np.linalg.det(m)
        if abs(det) < 1e-12 * max(1.0, np.abs(m).max() ** 3):
            continue
        lo = np.clip(np.floor((tet.min(0) - grid.origin) / grid.voxel - 0.5).astype(int), 0, shape)
        hi = np.clip(np.ceil((tet.max(0) - grid.origin) / grid.voxel + 0.5).astype(int), 0, shape)
        if np.any(hi <= lo):
            continue
        x = grid.centres(lo, hi)
        lam = (x - a) @ np.linalg.inv(m).T
        inside = np.all(lam >= -tol, axis=-1) & (lam.sum(-1) <= 1 + tol)
        occ[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] |= inside
    return occ


def dice_from_hexahedra(pred_hexes: np.ndarray, gt_hexes: np.ndarray, voxel_mm: float) -> float:
    grid = VoxelGrid.covering(np.concatenate([pred_hexes, gt_hexes]), voxel_mm)
    a = voxelize_hexahedra(pred_hexes, grid)
    b = voxelize_hexahedra(gt_hexes, grid)
    na, nb = int(a.sum()), int(b.sum())
    if nb == 0 or na + nb == 0:
        raise DegenerateVolumeError("ground-truth swept volume is empty at this voxel size")
    return 2.0 * int((a & b).sum()) / (na + nb)


def volume_dice(pred_chain, gt_chain, calib, frame_dims, voxel_mm: float = 1.0) -> float:
    """Dice of the swept volumes; ``frame_dims`` is ``(width_px, height_px, spacing)``."""
    corners = corner_points(*frame_dims)
    return dice_from_hexahedra(
        hexahedra_from_chain(pred_chain, calib, corners),
        hexahedra_from_chain(gt_chain, calib, corners),
        voxel_mm,
    )


# -- reports ---------------------------------------------------------------------


def _clean(v):
    return None if v is None or (isinstance(v, float) and not np.isfinite(v)) else float(v)


@dataclass
class MetricsReport:
    per_scan: dict[str, dict[str, float | None]] = field(default_factory=dict)
    config_ref: str = ""

    def add(self, scan_id: str, **values):
        self.per_scan[scan_id] = {k: _clean(values.get(k)) for k in METRIC_NAMES}

    @property
    def aggregate(self) -> dict[str, dict[str, float | int | None]]:
        out = {}
        for name in METRIC_NAMES:
            vals = np.array([r[name] for r in self.per_scan.values() if r.get(name) is not None], dtype=np.float64)
            out[name] = {
                "mean": float(vals.mean()) if len(vals) else None,
                "std": float(vals.std()) if len(vals) else None,
                "n": int(len(vals)),
            }
        return out

    def to_dict(self) -> dict:
        return {"config_ref": self.config_ref, "per_scan": self.per_scan, "aggregate": self.aggregate}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(per_scan={k: dict(v) for k, v in d["per_scan"].items()}, config_ref=d.get("config_ref", ""))

    def csv_rows(self) -> list[dict]:
        return [{"scan_id": k, **v} for k, v in self.per_scan.items()]
