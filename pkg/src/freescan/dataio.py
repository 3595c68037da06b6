"""Persistence: scans, dataset splits, checkpoints, metric reports, trajectories.

Scan directory layout::

    <scan>/meta.json    dims, fps, spacing, calib (4x4), ids, checksums, version
    <scan>/frames.f32   little-endian float32, frame-major, row-major per frame
    <scan>/poses.f64    little-endian float64, one row-major 4x4 world<-tool per frame
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from .geometry import RigidTransform, as_matrices

SCAN_FORMAT_VERSION = "1.0"
CHECKPOINT_VERSION = 1
TRAJECTORY_FORMAT_VERSION = "1.0"
_CKPT_MAGIC = b"FSCKPT\x00\x01"
_CKPT_HEADER = struct.Struct("<8sIQ32s")


class DataError(Exception):
    """Malformed, inconsistent or unreadable persisted data."""


class ChecksumError(DataError):
    pass


class VersionError(DataError):
    pass


class ShapeMismatchError(DataError):
    pass


@dataclass(frozen=True)
class Frame:
    pixels: np.ndarray
    index: int
    timestamp: float


@dataclass(eq=False)
class Scan:
    """Ordered frames plus per-frame tracker poses.

    ``frames`` is ``(K, H, W)`` float32 in [0, 1]; ``world_from_tool`` is
    ``(K, 4, 4)`` float64.
    """

    frames: np.ndarray
    world_from_tool: np.ndarray
    calib: RigidTransform
    fps: float = 20.0
    pixel_spacing: float = 0.5
    subject_id: str = "s0"
    scan_label: str = "scan0"
    indices: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.world_from_tool = as_matrices(self.world_from_tool)
        if self.indices is None:
            self.indices = np.arange(len(self.frames), dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.validate()

    def validate(self):
        if self.frames.ndim != 3:
            raise ShapeMismatchError(f"frames must be (K, H, W), got {self.frames.shape}")
        k = len(self.frames)
        if k < 2:
            raise ShapeMismatchError("a scan needs at least 2 frames")
        if self.world_from_tool.shape != (k, 4, 4):
            raise ShapeMismatchError(f"{k} frames but poses of shape {self.world_from_tool.shape}")
        if self.indices.shape != (k,) or np.any(np.diff(self.indices) <= 0):
            raise ShapeMismatchError("frame indices must be strictly increasing, one per frame")
        if np.any(self.frames < 0) or np.any(self.frames > 1):
            raise DataError("pixel intensities must lie in [0, 1]")

    @property
    def scan_id(self) -> str:
        return f"{self.subject_id}_{self.scan_label}"

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def timestamps(self) -> np.ndarray:
        return self.indices / self.fps

    def frame(self, k: int) -> Frame:
        return Frame(self.frames[k], int(self.indices[k]), float(self.indices[k] / self.fps))

    def pose(self, k: int) -> RigidTransform:
        return RigidTransform.from_matrix(self.world_from_tool[k])


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_scan(scan: Scan, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    frames = np.ascontiguousarray(scan.frames, dtype="<f4").tobytes()
    poses = np.ascontiguousarray(scan.world_from_tool, dtype="<f8").tobytes()
    meta = {
        "format_version": SCAN_FORMAT_VERSION,
        "n_frames": scan.n_frames,
        "height": scan.height,
        "width": scan.width,
        "fps": scan.fps,
        "pixel_spacing": scan.pixel_spacing,
        "calib": scan.calib.as_matrix().tolist(),
        "subject_id": scan.subject_id,
        "scan_label": scan.scan_label,
        "frame_indices": scan.indices.tolist(),
        "sha256": {"frames.f32": _sha256(frames), "poses.f64": _sha256(poses)},
        "extra": scan.extra,
    }
    (path / "frames.f32").write_bytes(frames)
    (path / "poses.f64").write_bytes(poses)
    (path / "meta.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")
    return path


def _check_major(version: str, supported: str, what: str):
    if str(version).split(".")[0] != supported.split(".")[0]:
        raise VersionError(f"unsupported {what} format version {version!r}")


def read_scan(path) -> Scan:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
        frames_raw = (path / "frames.f32").read_bytes()
        poses_raw = (path / "poses.f64").read_bytes()
    except FileNotFoundError as e:
        raise DataError(f"incomplete scan directory {path}: {e.filename}") from e
    _check_major(meta.get("format_version", "?"), SCAN_FORMAT_VERSION, "scan")
    k, h, w = meta["n_frames"], meta["height"], meta["width"]
    if len(frames_raw) != k * h * w * 4:
        raise ShapeMismatchError(f"frames.f32 holds {len(frames_raw)} bytes, metadata implies {k}x{h}x{w} float32")
    if len(poses_raw) != k * 16 * 8:
        raise ShapeMismatchError(f"poses.f64 holds {len(poses_raw)} bytes, metadata implies {k} 4x4 float64")
    for name, raw in (("frames.f32", frames_raw), ("poses.f64", poses_raw)):
        if _sha256(raw) != meta["sha256"][name]:
            raise ChecksumError(f"checksum mismatch in {path / name}")
    frames = np.frombuffer(frames_raw, dtype="<f4").reshape(k, h, w).astype(np.float32)
    poses = np.frombuffer(poses_raw, dtype="<f8").reshape(k, 4, 4).astype(np.float64)
    return Scan(
        frames=frames,
        world_from_tool=poses,
        calib=RigidTransform.from_matrix(meta["calib"]),
        fps=meta["fps"],
        pixel_spacing=meta["pixel_spacing"],
        subject_id=meta["subject_id"],
        scan_label=meta["scan_label"],
        indices=np.asarray(meta["frame_indices"], dtype=np.int64),
        extra=meta.get("extra", {}),
    )


def write_dataset(scans: Sequence[Scan], root) -> list[Path]:
    root = Path(root)
    paths = [write_scan(s, root / s.scan_id) for s in scans]
    index = {"format_version": SCAN_FORMAT_VERSION, "scans": [s.scan_id for s in scans]}
    (root / "dataset.json").write_text(json.dumps(index, indent=1), encoding="utf-8")
    return paths


def read_dataset(root) -> list[Scan]:
    root = Path(root)
    try:
        index = json.loads((root / "dataset.json").read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise DataError(f"no dataset.json in {root}") from e
    _check_major(index["format_version"], SCAN_FORMAT_VERSION, "dataset")
    return [read_scan(root / sid) for sid in index["scans"]]


# -- splitting ----------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"train": list(self.train), "validation": list(self.validation), "test": list(self.test)}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(tuple(d["train"]), tuple(d["validation"]), tuple(d["test"]))

    def select(self, scans: Sequence[Scan], part: str) -> list[Scan]:
        wanted = set(getattr(self, part))
        return [s for s in scans if s.scan_id in wanted]


def _allocate(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder allocation of n items with at least one per part."""
    ratios = np.asarray(ratios, dtype=np.float64)
    ideal = ratios / ratios.sum() * n
    counts = np.maximum(np.floor(ideal).astype(int), 1)
    while counts.sum() > n:
        over = np.where(counts > 1)[0]
        counts[over[np.argmax((counts - ideal)[over])]] -= 1
    while counts.sum() < n:
        counts[np.argmax(ideal - counts)] += 1
    return counts.tolist()


def split_dataset(scans: Sequence[Scan], ratios=(3, 1, 1), rng_seed: int = 0) -> DatasetSplit:
    """Subject-disjoint train/validation/test split."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError("ratios must be three positive numbers")
    subjects = sorted({s.subject_id for s in scans})
    if len(subjects) < 3:
        raise ValueError(f"need at least 3 subjects for a 3-way split, got {len(subjects)}")
    order = np.random.default_rng(rng_seed).permutation(len(subjects))
    shuffled = [subjects[i] for i in order]
    n_train, n_val, _ = _allocate(len(subjects), ratios)
    groups = (
        set(shuffled[:n_train]),
        set(shuffled[n_train : n_train + n_val]),
        set(shuffled[n_train + n_val :]),
    )
    parts = [tuple(s.scan_id for s in scans if s.subject_id in g) for g in groups]
    return DatasetSplit(*parts)


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path, params: dict, optimizer_state: dict | None, config: dict, extra: dict | None = None):
    """Single-file checkpoint: fixed header (magic, version, length, sha256) + torch payload."""
    buf = io.BytesIO()
    payload = {
        "params": {k: v.detach().clone() for k, v in params.items()},
        "optimizer": optimizer_state,
        "config": config,
        "extra": extra or {},
    }
    torch.save(payload, buf)
    data = buf.getvalue()
    header = _CKPT_HEADER.pack(_CKPT_MAGIC, CHECKPOINT_VERSION, len(data), hashlib.sha256(data).digest())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + data)
    os.replace(tmp, path)


def load_checkpoint(path, expected_shapes: dict | None = None) -> dict:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise ChecksumError(f"checkpoint {path} is truncated (no header)")
    magic, version, length, digest = _CKPT_HEADER.unpack_from(raw)
    if magic != _CKPT_MAGIC:
        raise DataError(f"{path} is not a freescan checkpoint")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    data = raw[_CKPT_HEADER.size :]
    if len(data) != length:
        raise ChecksumError(f"checkpoint {path} is truncated: {len(data)} of {length} payload bytes")
    if hashlib.sha256(data).digest() != digest:
        raise ChecksumError(f"checkpoint {path} failed its checksum")
    payload = torch.load(io.BytesIO(data), weights_only=False)
    if expected_shapes is not None:
        check_shapes(payload["params"], expected_shapes)
    return payload


def check_shapes(params: dict, expected: dict):
    got = {k: tuple(v.shape) for k, v in params.items()}
    want = {k: tuple(v) for k, v in expected.items()}
    if got != want:
        diff = sorted(set(got.items()) ^ set(want.items()))
        raise ShapeMismatchError(f"parameter shapes differ from the model: {diff[:6]}")


# -- reports and trajectories -------------------------------------------------


def write_json(obj: Any, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, allow_nan=True), encoding="utf-8")


def read_json(path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_report_csv(rows: Sequence[dict], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(rows[0].keys()) if rows else []
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def write_trajectory(path, frame_indices, ref_from_frame, corners_ref, meta: dict | None = None):
    """Localized poses (4x4, row-major) and corner polylines as JSON.

    ``corners_ref`` is ``(K, 4, 3)``: the four frame corners of each localized
    frame in reference-frame coordinates (mm).
    """
    frame_indices = [int(i) for i in frame_indices]
    mats = as_matrices(ref_from_frame)
    if not frame_indices:
        raise ValueError("refusing to export an empty trajectory")
    if len(mats) != len(frame_indices) or len(corners_ref) != len(frame_indices):
        raise ShapeMismatchError("poses, corners and indices must have equal length")
    obj = {
        "format_version": TRAJECTORY_FORMAT_VERSION,
        "frame_indices": frame_indices,
        "ref_from_frame": mats.tolist(),
        "corners": np.asarray(corners_ref, dtype=np.float64).tolist(),
        "meta": meta or {},
    }
    write_json(obj, path)


def read_trajectory(path) -> dict:
    obj = read_json(path)
    _check_major(obj.get("format_version", "?"), TRAJECTORY_FORMAT_VERSION, "trajectory")
    obj["ref_from_frame"] = np.asarray(obj["ref_from_frame"], dtype=np.float64)
    obj["corners"] = np.asarray(obj["corners"], dtype=np.float64)
    return obj
