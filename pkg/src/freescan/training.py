"""Minibatch training with validation-based model selection."""

from __future__ import annotations

import copy
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import dataio
from .dataio import Scan
from .geometry import corner_points, pose_to_transform, random_transform
from .losses import LossWeights, total_loss
from .metrics import frame_errors
from .model import (AdamState, ModelConfig, NumericalError, Predictor, adam_step, build_model,
                    clip_global_norm, finite_difference_check, param_shapes, predict)
from .reconstruct import scheduled_windows
from .sampling import TaskSet, gt_matrices, make_task_set, valid_starts

log = logging.getLogger(__name__)

PRECISIONS = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    variant: str = "feedforward"
    M: int = 5
    i_star: int = 2
    j_star: int = 4
    tau: int = 8
    task_seed: int = 0
    learning_rate: float = 1e-4
    batch_size: int = 32
    steps: int = 2000
    eval_every: int = 200
    loss_weights: dict = field(default_factory=lambda: {"multi_task": 1.0, "consistency": 0.0, "accumulated": 0.0})
    seed: int = 0
    precision: str = "float32"
    hidden: int = 128
    channels: tuple[int, ...] = (16, 32, 64)
    fusion: str = "early"
    pool: tuple[int, int] = (1, 1)
    grad_clip: float | None = 10.0
    resample_tasks_per_epoch: bool = False

    def __post_init__(self):
        LossWeights(**self.loss_weights)
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.batch_size < 1 or self.steps < 0 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1, steps >= 0")
        self.channels = tuple(int(c) for c in self.channels)
        self.pool = tuple(int(c) for c in self.pool)

    @property
    def main(self) -> tuple[int, int]:
        return (self.i_star, self.j_star)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(**self.loss_weights)

    def task_set(self) -> TaskSet:
        return make_task_set(self.M, self.main, self.tau, self.task_seed)

    def model_config(self, height: int, width: int) -> ModelConfig:
        return ModelConfig(self.variant, self.M, self.tau + 1, height, width, self.channels, self.hidden, self.fusion,
                           self.pool)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["pool"] = list(self.pool)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class TrainingDiverged(NumericalError):
    def __init__(self, message: str, last_good: dict | None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainResult:
    model: Predictor
    tasks: TaskSet
    history: list[dict]
    best_step: int
    best_val_frame_err: float
    config: TrainConfig


class SequenceBatcher:
    """Random training windows drawn from a list of scans."""

    def __init__(self, scans: Sequence[Scan], M: int, rng: np.random.Generator):
        if not scans:
            raise ValueError("training set is empty")
        self.scans = list(scans)
        self.M = M
        self.rng = rng
        counts = np.array([len(valid_starts(s.n_frames, M)) for s in self.scans], dtype=np.float64)
        self.p = counts / counts.sum()

    def draw(self, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        which = self.rng.choice(len(self.scans), size=batch_size, p=self.p)
        frames, poses = [], []
        for w in which:
            s = self.scans[w]
            start = int(self.rng.integers(0, s.n_frames - self.M + 1))
            frames.append(s.frames[start : start + self.M])
            poses.append(s.world_from_tool[start : start + self.M])
        return np.stack(frames), np.stack(poses)


def validation_frame_error(model: Predictor, scans: Sequence[Scan], tasks: TaskSet, batch_size: int = 64) -> float:
    """Main-pair corner error pooled over every chained window of every scan."""
    errs = []
    for s in scans:
        frames, poses = scheduled_windows(s, tasks)
        preds = predict(model, frames, batch_size)[:, 0]
        gts = gt_matrices(poses, tasks)[:, 0]
        pred_m = np.stack([pose_to_transform(p).as_matrix() for p in preds])
        errs.append(frame_errors(pred_m, gts, s.calib, corner_points(s.width, s.height, s.pixel_spacing)))
    return float(np.concatenate(errs).mean())


class Trainer:
    """Owns parameters, optimiser state and the data stream between steps."""

    def __init__(self, config: TrainConfig, train_scans: Sequence[Scan]):
        self.config = config
        ref = train_scans[0]
        self.calib = ref.calib.as_matrix()
        self.corners = corner_points(ref.width, ref.height, ref.pixel_spacing)
        self.tasks = config.task_set()
        self.model = build_model(config.model_config(ref.height, ref.width), config.seed, PRECISIONS[config.precision])
        self.adam = AdamState()
        self.rng = np.random.default_rng([config.seed, 1])
        self.batcher = SequenceBatcher(train_scans, config.M, self.rng)
        self.epoch_len = max(1, sum(len(valid_starts(s.n_frames, config.M)) for s in train_scans) // config.batch_size)

    def loss(self, frames: np.ndarray, poses: np.ndarray):
        dtype = PRECISIONS[self.config.precision]
        preds = self.model(torch.as_tensor(frames, dtype=dtype))
        gts = gt_matrices(poses, self.tasks)
        return total_loss(preds, gts, self.tasks, self.calib, self.corners, self.config.weights)

    def step(self, batch=None) -> dict:
        if batch is None:
            batch = self.batcher.draw(self.config.batch_size)
        self.model.train()
        self.model.zero_grad()
        loss, parts = self.loss(*batch)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite training loss at step {self.adam.step + 1}")
        loss.backward()
        params = dict(self.model.named_parameters())
        grads = {k: p.grad for k, p in params.items()}
        gnorm = clip_global_norm(grads, self.config.grad_clip)
        adam_step(params, grads, self.adam, lr=self.config.learning_rate)
        if self.config.resample_tasks_per_epoch and self.adam.step % self.epoch_len == 0:
            seed = int(self.rng.integers(2**31))
            self.tasks = make_task_set(self.config.M, self.config.main, self.config.tau, seed)
        return {"step": self.adam.step, "loss": float(loss.detach()), **parts, "grad_norm": gnorm}

    def state(self) -> dict:
        return {
            "params": self.model.state_dict(),
            "optimizer": {"step": self.adam.step, "m": self.adam.m, "v": self.adam.v},
            "rng": self.rng.bit_generator.state,
            "tasks": self.tasks.to_dict(),
        }

    def save(self, path, extra: dict | None = None):
        st = self.state()
        dataio.save_checkpoint(
            path, st["params"], st["optimizer"], self.config.to_dict(),
            {"rng": st["rng"], "tasks": st["tasks"], **(extra or {})},
        )

    def restore(self, payload: dict):
        dataio.check_shapes(payload["params"], param_shapes(self.model))
        self.model.load_state_dict(payload["params"])
        # adam buffers are keyed by parameter name and must be detached copies
        opt = payload["optimizer"]
        self.adam = AdamState(opt["step"], {k: v.clone() for k, v in opt["m"].items()},
                              {k: v.clone() for k, v in opt["v"].items()})
        self.rng.bit_generator.state = payload["extra"]["rng"]
        self.tasks = TaskSet.from_dict(payload["extra"]["tasks"])


def train(config: TrainConfig, train_scans: Sequence[Scan], val_scans: Sequence[Scan],
          log_fn: Callable[[dict], None] | None = None, checkpoint_path=None) -> TrainResult:
    """Train for ``config.steps`` steps, keeping the parameters with the lowest validation frame error."""
    trainer = Trainer(config, train_scans)
    val_scans = list(val_scans) or list(train_scans)
    history: list[dict] = []
    best = (np.inf, 0, copy.deepcopy(trainer.model.state_dict()))
    window: list[float] = []

    def evaluate(step: int):
        nonlocal best, window
        trainer.model.eval()
        err = validation_frame_error(trainer.model, val_scans, trainer.tasks)
        rec = {"step": step, "train_loss": float(np.mean(window)) if window else None, "val_frame_err_mm": err}
        history.append(rec)
        window = []
        if log_fn:
            log_fn(rec)
        if err < best[0]:
            best = (err, step, copy.deepcopy(trainer.model.state_dict()))
            if checkpoint_path is not None:
                trainer.save(checkpoint_path, {"best_step": step, "val_frame_err_mm": err})

    evaluate(0)
    for step in range(1, config.steps + 1):
        try:
            rec = trainer.step()
        except NumericalError as e:
            trainer.model.load_state_dict(best[2])
            raise TrainingDiverged(str(e), best[2]) from e
        window.append(rec["loss"])
        if step % config.eval_every == 0 or step == config.steps:
            evaluate(step)
    trainer.model.load_state_dict(best[2])
    trainer.model.eval()
    return TrainResult(trainer.model, trainer.tasks, history, best[1], float(best[0]), config)


def json_logger(stream=None) -> Callable[[dict], None]:
    stream = stream or sys.stderr

    def emit(rec: dict):
        stream.write(json.dumps(rec) + "\n")
        stream.flush()

    return emit


# -- gradient check ------------------------------------------------------------


def gradcheck(variant: str, seed: int = 0, height: int = 8, width: int = 10, M: int = 3, tau: int = 2,
              hidden: int = 16, batch: int = 2, eps: float = 1e-5) -> dict[str, float]:
    """Finite-difference check of every parameter tensor of a tiny float64 model.

    Uses all three losses at unit weight so that gradients flow through the
    pose parameterisation, composition and point application.
    """
    rng = np.random.default_rng([seed, 7])
    tasks = make_task_set(M, (1, M), tau, seed)
    cfg = ModelConfig(variant, M, tasks.n_tasks, height, width, channels=(4, 6, 8), hidden=hidden, fusion="early")
    model = build_model(cfg, seed, torch.float64)
    # scale up the head so the check is not dominated by a near-zero output layer
    with torch.no_grad():
        model.out.weight.mul_(10.0)
        model.out.bias.uniform_(-0.1, 0.1, generator=torch.Generator().manual_seed(seed))
    frames = torch.as_tensor(rng.uniform(0, 1, (batch, M, height, width)), dtype=torch.float64)
    poses = np.stack([[random_transform(rng, 0.3, 5.0).as_matrix() for _ in range(M)] for _ in range(batch)])
    gts = gt_matrices(poses, tasks)
    calib = random_transform(rng, 0.2, 20.0).as_matrix()
    corners = corner_points(width, height, 0.5)
    weights = LossWeights(1.0, 1.0, 1.0)

    def loss_fn(m):
        return total_loss(m(frames), gts, tasks, calib, corners, weights)[0]

    return finite_difference_check(model, loss_fn, eps)
