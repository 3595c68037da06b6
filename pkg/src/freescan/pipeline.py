"""Run configuration and the simulate -> train -> reconstruct -> evaluate pipeline."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import dataio
from .dataio import Scan
from .metrics import MetricsReport
from .reconstruct import (ReconstructedScan, evaluate_scans, export_trajectory, ground_truth_steps, reconstruct,
                          reconstruct_from_steps)
from .sampling import TaskSet
from .simulator import ORIENTATIONS, SHAPES, TrajectorySpec, simulate_dataset
from .training import TrainConfig, TrainResult, train

RUN_CONFIG_VERSION = "1.0"


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class SimulationConfig:
    n_subjects: int = 10
    scans_per_subject: int = 5
    n_frames: int = 100
    length_range: tuple[float, float] | None = (100.0, 200.0)
    shapes: tuple[str, ...] = SHAPES
    orientations: tuple[str, ...] = ORIENTATIONS
    turn_deg: float = 60.0
    noise_mm: float = 0.0
    noise_rad: float = 0.0
    width: int = 80
    height: int = 64
    spacing: float = 0.5
    fps: float = 20.0
    band_count: int = 64
    smoothness: float = 5.0
    image_noise: float = 0.0

    def specs(self) -> list[TrajectorySpec]:
        length = 150.0 if self.length_range is None else float(np.mean(self.length_range))
        return [
            TrajectorySpec(s, o, length, self.n_frames, self.noise_mm, self.noise_rad, self.turn_deg)
            for o in self.orientations
            for s in self.shapes
        ]


@dataclass
class MetricOptions:
    pixel_stride: int = 4
    voxel_mm: float = 1.0
    dice_filter: str | None = None  # e.g. "perpendicular"


@dataclass
class RunConfig:
    """Everything needed to re-execute a run; round-trips through JSON."""

    seed: int = 0
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    split_ratios: tuple[float, float, float] = (3.0, 1.0, 1.0)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricOptions = field(default_factory=MetricOptions)
    sweep: dict = field(default_factory=dict)
    data_dir: str | None = None
    format_version: str = RUN_CONFIG_VERSION

    def to_dict(self) -> dict:
        sim = self.simulation.__dict__.copy()
        for k in ("length_range", "shapes", "orientations"):
            sim[k] = None if sim[k] is None else list(sim[k])
        return {
            "format_version": self.format_version,
            "seed": self.seed,
            "simulation": sim,
            "split_ratios": list(self.split_ratios),
            "train": self.train.to_dict(),
            "metrics": dict(self.metrics.__dict__),
            "sweep": copy.deepcopy(self.sweep),
            "data_dir": self.data_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {"format_version", "seed", "simulation", "split_ratios", "train", "metrics", "sweep", "data_dir"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        version = str(d.get("format_version", RUN_CONFIG_VERSION))
        if version.split(".")[0] != RUN_CONFIG_VERSION.split(".")[0]:
            raise ConfigError(f"unsupported run config version {version}")
        try:
            sim = dict(d.get("simulation", {}))
            for k in ("length_range", "shapes", "orientations"):
                if sim.get(k) is not None:
                    sim[k] = tuple(sim[k])
            ratios = tuple(float(r) for r in d.get("split_ratios", (3, 1, 1)))
            if len(ratios) != 3:
                raise ConfigError("split_ratios needs three values")
            return cls(
                seed=int(d.get("seed", 0)),
                simulation=SimulationConfig(**sim),
                split_ratios=ratios,
                train=TrainConfig.from_dict(d.get("train", {})),
                metrics=MetricOptions(**d.get("metrics", {})),
                sweep=dict(d.get("sweep", {})),
                data_dir=d.get("data_dir"),
                format_version=version,
            )
        except TypeError as e:  # unexpected keyword
            raise ConfigError(str(e)) from e
        except ValueError as e:
            raise ConfigError(str(e)) from e


def set_dotted(d: dict, key: str, value):
    """``set_dotted(cfg, "train.steps", 10)``; the value may be a JSON string."""
    if isinstance(value, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a section")
    node[parts[-1]] = value


def resolve_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the config file, then explicit overrides (dotted keys)."""
    base = RunConfig().to_dict()
    if path is not None:
        try:
            loaded = dataio.read_json(path)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        except FileNotFoundError as e:
            raise ConfigError(f"config file {path} not found") from e
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        for section, value in loaded.items():
            if isinstance(value, dict) and isinstance(base.get(section), dict):
                base[section].update(value)
            else:
                base[section] = value
    for key, value in (overrides or {}).items():
        set_dotted(base, key, value)
    return RunConfig.from_dict(base)


# -- stages ----------------------------------------------------------------------


def simulate(cfg: RunConfig) -> list[Scan]:
    s = cfg.simulation
    return simulate_dataset(
        s.n_subjects, s.scans_per_subject, s.specs(), seed=cfg.seed, width=s.width, height=s.height,
        spacing=s.spacing, fps=s.fps, length_range=s.length_range, band_count=s.band_count,
        smoothness=s.smoothness, image_noise=s.image_noise,
    )


def split(cfg: RunConfig, scans: list[Scan]) -> dict[str, list[Scan]]:
    sp = dataio.split_dataset(scans, cfg.split_ratios, cfg.seed)
    return {part: sp.select(scans, part) for part in ("train", "validation", "test")}


def oracle_reconstruction(scan: Scan, tasks: TaskSet) -> ReconstructedScan:
    """Ground-truth transforms injected as predictions."""
    return reconstruct_from_steps(scan, tasks, ground_truth_steps(scan, tasks), model_ref="oracle")


@dataclass
class PipelineResult:
    result: TrainResult
    report: MetricsReport
    recs: list[ReconstructedScan]
    details: dict


def train_and_evaluate(cfg: RunConfig, parts: dict[str, list[Scan]],
                       log_fn: Callable[[dict], None] | None = None, checkpoint_path=None) -> PipelineResult:
    if not parts["test"]:
        raise dataio.DataError("no held-out test scans")
    result = train(cfg.train, parts["train"], parts["validation"], log_fn, checkpoint_path)
    recs = [reconstruct(result.model, s, result.tasks) for s in parts["test"]]
    m = cfg.metrics
    report, details = evaluate_scans(parts["test"], recs, m.pixel_stride, m.voxel_mm, m.dice_filter,
                                     config_ref=json.dumps(cfg.train.to_dict(), sort_keys=True))
    return PipelineResult(result, report, recs, details)


def run_pipeline(cfg: RunConfig, scans: list[Scan] | None = None,
                 log_fn: Callable[[dict], None] | None = None) -> PipelineResult:
    """simulate (unless scans are given) -> split -> train -> reconstruct -> evaluate."""
    torch.set_num_threads(1)  # bitwise-stable reductions across runs
    if scans is None:
        scans = simulate(cfg)
    return train_and_evaluate(cfg, split(cfg, scans), log_fn)


# -- sweeps ----------------------------------------------------------------------


def sweep_overrides(base: TrainConfig, axis: str, values) -> list[dict]:
    """Train-config overrides for one ablation axis.

    ``interval`` keeps M and i* and moves j*; ``past`` moves i* (and j*) keeping
    the interval and the number of future frames; ``future`` grows M past j*;
    ``variant`` switches the sequence model.
    """
    out = []
    past = base.i_star - 1
    future = base.M - base.j_star
    interval = base.j_star - base.i_star
    for v in values:
        if axis == "interval":
            o = {"i_star": base.i_star, "j_star": base.i_star + int(v), "M": max(base.M, base.i_star + int(v))}
        elif axis == "past":
            i = int(v) + 1
            o = {"i_star": i, "j_star": i + interval, "M": i + interval + future}
        elif axis == "future":
            o = {"M": base.j_star + int(v)}
        elif axis == "variant":
            o = {"variant": str(v)}
        else:
            raise ConfigError(f"unknown sweep axis {axis!r}")
        # keep tau feasible when M shrinks
        M = o.get("M", base.M)
        o["tau"] = min(base.tau, M * (M - 1) // 2 - 1)
        o["axis"] = axis
        o["value"] = v
        out.append(o)
    return out


def sweep_runs(cfg: RunConfig) -> list[RunConfig]:
    axes = cfg.sweep.get("axes")
    if not axes:
        raise ConfigError('sweep needs "sweep": {"axes": {"interval": [...], ...}}')
    runs = []
    for axis, values in axes.items():
        for o in sweep_overrides(cfg.train, axis, values):
            meta = {"axis": o.pop("axis"), "value": o.pop("value")}
            d = cfg.to_dict()
            d["train"].update(o)
            d["sweep"] = {"point": meta}
            runs.append(RunConfig.from_dict(d))
    return runs


def save_reconstructions(recs, scans, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for rec, scan in zip(recs, scans):
        p = out_dir / f"{scan.scan_id}.json"
        export_trajectory(rec, scan, p)
        paths.append(p)
    return paths
