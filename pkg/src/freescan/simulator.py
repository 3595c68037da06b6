"""Synthetic freehand scans with exact ground truth.

A probe sweeps along a planar curve (line, C or S) on the z = 0 "skin"
surface, imaging downwards. Tool axes: x lateral, y depth (world -z), z the
image-plane normal. ``perpendicular`` puts the normal along the direction of
travel; ``parallel`` puts the direction of travel in the image plane.
Intensities come from a procedural volume of random 3D sinusoids.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .dataio import Scan
from .geometry import RigidTransform, rotation_about

SHAPES = ("line", "c_shape", "s_shape")
ORIENTATIONS = ("perpendicular", "parallel")

DEFAULT_WIDTH = 80
DEFAULT_HEIGHT = 64
DEFAULT_SPACING = 0.5  # mm / px
DEFAULT_FPS = 20.0


@dataclass(frozen=True)
class TrajectorySpec:
    shape: str = "line"
    orientation: str = "perpendicular"
    length_mm: float = 100.0
    n_frames: int = 101
    noise_mm: float = 0.0
    noise_rad: float = 0.0
    turn_deg: float = 60.0  # total heading change of each arc

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown trajectory shape {self.shape!r}")
        if self.orientation not in ORIENTATIONS:
            raise ValueError(f"unknown orientation {self.orientation!r}")
        if self.n_frames < 2:
            raise ValueError("a trajectory needs at least 2 frames")
        if not self.length_mm > 0:
            raise ValueError("length_mm must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _segments(spec: TrajectorySpec) -> list[tuple[float, float]]:
    """(length, curvature) pieces of the centreline."""
    L = spec.length_mm
    turn = np.deg2rad(spec.turn_deg)
    if spec.shape == "line":
        return [(L, 0.0)]
    if spec.shape == "c_shape":
        return [(L, turn / L)]
    half = L / 2
    return [(half, turn / half), (half, -turn / half)]


def _centreline(segments, arc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form position (x, y) and heading at each arc length, from heading 0 at the origin."""
    pos = np.zeros((len(arc), 2))
    heading = np.zeros(len(arc))
    x0 = np.zeros(2)
    h0 = 0.0
    start = 0.0
    for n, (length, kappa) in enumerate(segments):
        last = n == len(segments) - 1
        mask = (arc >= start) & ((arc <= start + length) if last else (arc < start + length))
        ds = arc[mask] - start
        if kappa == 0.0:
            pos[mask] = x0 + np.outer(ds, [np.cos(h0), np.sin(h0)])
            heading[mask] = h0
        else:
            h = h0 + kappa * ds
            pos[mask, 0] = x0[0] + (np.sin(h) - np.sin(h0)) / kappa
            pos[mask, 1] = x0[1] - (np.cos(h) - np.cos(h0)) / kappa
            heading[mask] = h
        h1 = h0 + kappa * length
        if kappa == 0.0:
            x0 = x0 + length * np.array([np.cos(h0), np.sin(h0)])
        else:
            x0 = x0 + np.array([np.sin(h1) - np.sin(h0), -(np.cos(h1) - np.cos(h0))]) / kappa
        h0 = h1
        start += length
    return pos, heading


def _probe_rotation(heading: float, orientation: str) -> np.ndarray:
    t = np.array([np.cos(heading), np.sin(heading), 0.0])
    y = np.array([0.0, 0.0, -1.0])
    if orientation == "perpendicular":
        z = t
        x = np.array([t[1], -t[0], 0.0])
    else:
        x = t
        z = np.array([-t[1], t[0], 0.0])
    return np.column_stack([x, y, z])


def generate_trajectory(
    spec: TrajectorySpec,
    rng_seed: int = 0,
    start: Sequence[float] = (0.0, 0.0),
    heading: float = 0.0,
    mirror: bool = False,
) -> list[RigidTransform]:
    """World<-tool poses at constant speed along the named shape."""
    rng = np.random.default_rng(rng_seed)
    arc = np.linspace(0.0, spec.length_mm, spec.n_frames)
    pos, head = _centreline(_segments(spec), arc)
    if mirror:
        pos[:, 1] *= -1
        head = -head
    c, s = np.cos(heading), np.sin(heading)
    pos = pos @ np.array([[c, s], [-s, c]]) + np.asarray(start, dtype=np.float64)
    head = head + heading
    poses = []
    for p, h in zip(pos, head):
        r = _probe_rotation(h, spec.orientation)
        t = np.array([p[0], p[1], 0.0])
        if spec.noise_rad > 0:
            r = r @ rotation_about(rng.normal(size=3), rng.normal(scale=spec.noise_rad))
        if spec.noise_mm > 0:
            t = t + rng.normal(scale=spec.noise_mm, size=3)
        poses.append(RigidTransform(r, t))
    return poses


@dataclass
class ProceduralVolume:
    """Sum of random 3D sinusoids squashed into [0, 1].

    Wavenumbers are drawn in ``[2, 6] / smoothness`` rad/mm with isotropic
    directions, so intensities decorrelate after roughly ``smoothness`` mm.
    """

    seed: int = 0
    band_count: int = 64
    smoothness: float = 5.0
    wavevectors: np.ndarray = field(init=False, repr=False)
    phases: np.ndarray = field(init=False, repr=False)
    amplitudes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        d = rng.normal(size=(self.band_count, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        k = rng.uniform(2.0, 6.0, size=self.band_count) / self.smoothness
        self.wavevectors = d * k[:, None]
        self.phases = rng.uniform(0, 2 * np.pi, size=self.band_count)
        self.amplitudes = rng.uniform(0.5, 1.0, size=self.band_count)
        self._scale = 1.5 * np.sqrt(0.5 * np.sum(self.amplitudes**2))

    def _squash(self, f):
        return 0.5 + 0.5 * np.tanh(f / self._scale)

    def sample(self, points) -> np.ndarray:
        """Intensity at world positions ``(..., 3)`` (mm)."""
        pts = np.asarray(points, dtype=np.float64)[..., :3]
        f = np.cos(pts @ self.wavevectors.T + self.phases) @ self.amplitudes
        return self._squash(f)

    def sample_plane(self, origin, axis_u, axis_v, nu: int, nv: int) -> np.ndarray:
        """Intensities at ``origin + a*axis_u + b*axis_v`` for a < nu, b < nv; shape (nv, nu).

        Separable evaluation: each sinusoid factors into a row and a column phasor.
        """
        k = self.wavevectors
        c = self.amplitudes * np.exp(1j * (k @ np.asarray(origin) + self.phases))
        eu = np.exp(1j * np.outer(k @ np.asarray(axis_u), np.arange(nu)))
        ev = np.exp(1j * np.outer(k @ np.asarray(axis_v), np.arange(nv)))
        f = ((ev * c[:, None]).T @ eu).real
        return self._squash(f)


def render_frame(
    vol: ProceduralVolume,
    world_from_tool: RigidTransform,
    calib: RigidTransform,
    width: int = DEFAULT_WIDTH,
    height: int = DEFAULT_HEIGHT,
    spacing: float = DEFAULT_SPACING,
) -> np.ndarray:
    """``(H, W)`` float32 frame; pixel (u, v) samples world_from_tool . calib . (u s, v s, 0)."""
    m = world_from_tool.as_matrix() @ calib.as_matrix()
    frame = vol.sample_plane(m[:3, 3], m[:3, 0] * spacing, m[:3, 1] * spacing, width, height)
    return np.clip(frame, 0.0, 1.0).astype(np.float32)


def default_calibration(seed: int = 0, angle_deg: float = 10.0, offset_mm: float = 20.0) -> RigidTransform:
    """Fixed non-trivial image->tool transform."""
    rng = np.random.default_rng([seed, 0xCA1])
    axis = rng.normal(size=3)
    d = rng.normal(size=3)
    return RigidTransform(rotation_about(axis, np.deg2rad(angle_deg)), offset_mm * d / np.linalg.norm(d))


def default_specs(n_frames: int = 100, length_mm: float = 150.0) -> list[TrajectorySpec]:
    return [
        TrajectorySpec(shape=s, orientation=o, length_mm=length_mm, n_frames=n_frames)
        for o in ORIENTATIONS
        for s in SHAPES
    ]


def simulate_scan(
    spec: TrajectorySpec,
    vol: ProceduralVolume,
    calib: RigidTransform,
    rng_seed: int = 0,
    width: int = DEFAULT_WIDTH,
    height: int = DEFAULT_HEIGHT,
    spacing: float = DEFAULT_SPACING,
    fps: float = DEFAULT_FPS,
    subject_id: str = "s0",
    scan_label: str = "scan0",
    placement: dict | None = None,
    image_noise: float = 0.0,
) -> Scan:
    """Render one scan; ``image_noise`` adds independent Gaussian noise to every frame."""
    placement = placement or {}
    poses = generate_trajectory(spec, rng_seed, **placement)
    frames = np.stack([render_frame(vol, p, calib, width, height, spacing) for p in poses])
    if image_noise > 0:
        for k in range(len(frames)):
            noise = np.random.default_rng([rng_seed, k]).normal(0.0, image_noise, frames[k].shape)
            frames[k] = np.clip(frames[k] + noise, 0.0, 1.0)
    return Scan(
        frames=frames,
        world_from_tool=np.stack([p.as_matrix() for p in poses]),
        calib=calib,
        fps=fps,
        pixel_spacing=spacing,
        subject_id=subject_id,
        scan_label=scan_label,
        extra={"trajectory": spec.to_dict(), "volume_seed": vol.seed, "image_noise": image_noise},
    )


def simulate_dataset(
    n_subjects: int,
    scans_per_subject: int,
    specs: Sequence[TrajectorySpec] | None = None,
    seed: int = 0,
    width: int = DEFAULT_WIDTH,
    height: int = DEFAULT_HEIGHT,
    spacing: float = DEFAULT_SPACING,
    fps: float = DEFAULT_FPS,
    length_range: tuple[float, float] | None = None,
    band_count: int = 64,
    smoothness: float = 5.0,
    image_noise: float = 0.0,
) -> list[Scan]:
    """Deterministic synthetic dataset: one volume per subject, a shared calibration.

    Scan ``s`` of every subject uses ``specs[s % len(specs)]``; with
    ``length_range`` the travel length is redrawn per scan. Start position and
    heading are randomised per scan; turn directions alternate so left and
    right turns are balanced.
    """
    if n_subjects < 1 or scans_per_subject < 1:
        raise ValueError("need at least one subject and one scan per subject")
    specs = list(specs) if specs else default_specs()
    calib = default_calibration(seed)
    scans = []
    for subj in range(n_subjects):
        vol = ProceduralVolume(seed=int(np.random.SeedSequence([seed, subj]).generate_state(1)[0]),
                               band_count=band_count, smoothness=smoothness)
        for k in range(scans_per_subject):
            spec = specs[k % len(specs)]
            rng = np.random.default_rng([seed, subj, k])
            if length_range is not None:
                spec = TrajectorySpec(**{**spec.to_dict(), "length_mm": float(rng.uniform(*length_range))})
            placement = {
                "start": tuple(rng.uniform(-500, 500, 2)),
                "heading": float(rng.uniform(0, 2 * np.pi)),
                "mirror": bool((subj + k // len(specs)) % 2),  # balances left and right turns
            }
            scans.append(
                simulate_scan(
                    spec, vol, calib, rng_seed=int(rng.integers(2**31)), width=width, height=height,
                    spacing=spacing, fps=fps, subject_id=f"sub{subj:02d}",
                    scan_label=f"{k:02d}_{spec.shape}_{spec.orientation}", placement=placement,
                    image_noise=image_noise,
                )
            )
    return scans
