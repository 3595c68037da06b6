"""Sequence models mapping M frames to (tau + 1) six-DoF transform vectors.

``FeedForwardPredictor`` models the whole window at once; ``RecurrentPredictor``
runs a gated memory cell over per-frame encoder features and reads the output
from the final hidden state, so predictions with future frames are
time-delayed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

VARIANTS = ("feedforward", "recurrent")


class NumericalError(RuntimeError):
    """Non-finite values appeared in a forward pass or in training."""


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "feedforward"
    M: int = 5
    n_tasks: int = 1
    height: int = 64
    width: int = 80
    channels: tuple[int, ...] = (16, 32, 64)
    hidden: int = 128  # recurrent cell size, or perceptron width
    fusion: str = "early"  # feed-forward only: "early" stacks frames as channels, "late" encodes each frame
    pool: tuple[int, int] = (1, 1)  # average-pooling grid after the convolutions; (1, 1) is global

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}")
        if self.M < 2:
            raise ValueError("sequence length M must be >= 2")
        if self.fusion not in ("early", "late"):
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "pool", tuple(int(c) for c in self.pool))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["pool"] = list(self.pool)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "channels": tuple(d["channels"]), "pool": tuple(d.get("pool", (1, 1)))})


class FrameEncoder(nn.Module):
    """Three stride-2 convolutions with SiLU, then average pooling onto a ``pool`` grid."""

    def __init__(self, in_channels: int, channels=(16, 32, 64), pool=(1, 1)):
        super().__init__()
        layers = []
        c_in = in_channels
        for c in channels:
            layers += [nn.Conv2d(c_in, c, kernel_size=3, stride=2, padding=1), nn.SiLU()]
            c_in = c
        self.conv = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(tuple(pool))
        self.out_features = c_in * pool[0] * pool[1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.conv(x)).flatten(1)


class Predictor(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config

    @property
    def out_dim(self) -> int:
        return self.config.n_tasks * 6

    def _check(self, frames: torch.Tensor):
        c = self.config
        if frames.ndim != 4 or frames.shape[1:] != (c.M, c.height, c.width):
            raise ValueError(f"expected frames (B, {c.M}, {c.height}, {c.width}), got {tuple(frames.shape)}")

    def _head(self, features: torch.Tensor) -> torch.Tensor:
        return self.out(features).reshape(features.shape[0], self.config.n_tasks, 6)


class FeedForwardPredictor(Predictor):
    def __init__(self, config: ModelConfig):
        super().__init__(config)
        if config.fusion == "early":
            self.encoder = FrameEncoder(config.M, config.channels, config.pool)
            n_feat = self.encoder.out_features
        else:
            self.encoder = FrameEncoder(1, config.channels, config.pool)
            n_feat = self.encoder.out_features * config.M
        self.mlp = nn.Sequential(
            nn.Linear(n_feat, config.hidden), nn.SiLU(), nn.Linear(config.hidden, config.hidden), nn.SiLU()
        )
        self.out = nn.Linear(config.hidden, self.out_dim)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        self._check(frames)
        x = 2.0 * frames - 1.0
        if self.config.fusion == "early":
            feats = self.encoder(x)
        else:
            b, m = x.shape[:2]
            feats = self.encoder(x.reshape(b * m, 1, *x.shape[2:])).reshape(b, -1)
        return self._head(self.mlp(feats))


class GatedCell(nn.Module):
    """LSTM cell: input, forget, output gates and a candidate state."""

    def __init__(self, n_in: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.x2g = nn.Linear(n_in, 4 * hidden)
        self.h2g = nn.Linear(hidden, 4 * hidden, bias=False)
        with torch.no_grad():
            self.x2g.bias.zero_()
            self.x2g.bias[hidden : 2 * hidden] = 1.0  # forget gate starts open

    def forward(self, x, state):
        h, c = state
        i, f, o, g = (self.x2g(x) + self.h2g(h)).chunk(4, dim=-1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


class RecurrentPredictor(Predictor):
    def __init__(self, config: ModelConfig):
        super().__init__(config)
        self.encoder = FrameEncoder(1, config.channels, config.pool)
        self.cell = GatedCell(self.encoder.out_features, config.hidden)
        self.out = nn.Linear(config.hidden, self.out_dim)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        self._check(frames)
        b, m = frames.shape[:2]
        x = 2.0 * frames - 1.0
        feats = self.encoder(x.reshape(b * m, 1, *x.shape[2:])).reshape(b, m, -1)
        h = feats.new_zeros(b, self.config.hidden)
        c = feats.new_zeros(b, self.config.hidden)
        for step in range(m):
            h, c = self.cell(feats[:, step], (h, c))
            if not (torch.isfinite(h).all() and torch.isfinite(c).all()):
                raise NumericalError(f"non-finite recurrent state at time-step {step + 1}")
        return self._head(h)


def build_model(config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> Predictor:
    """Seeded construction; the output layer starts near zero (near-identity transforms)."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        cls = FeedForwardPredictor if config.variant == "feedforward" else RecurrentPredictor
        model = cls(config)
        with torch.no_grad():
            model.out.weight.mul_(0.1)
            model.out.bias.zero_()
    finally:
        torch.random.set_rng_state(gen_state)
    return model.to(dtype)


def param_shapes(model: nn.Module) -> dict[str, tuple[int, ...]]:
    return {k: tuple(v.shape) for k, v in model.state_dict().items()}


@torch.no_grad()
def predict(model: Predictor, frames: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """``(N, M, H, W)`` frames to float64 ``(N, T, 6)`` pose vectors."""
    dtype = next(model.parameters()).dtype
    out = []
    for s in range(0, len(frames), batch_size):
        x = torch.as_tensor(np.asarray(frames[s : s + batch_size]), dtype=dtype)
        out.append(model(x).to(torch.float64).numpy())
    if not out:
        return np.zeros((0, model.config.n_tasks, 6))
    return np.concatenate(out)


# -- optimiser -----------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"step": self.step, "m": self.m, "v": self.v}

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        return cls(int(d["step"]), dict(d["m"]), dict(d["v"]))


@torch.no_grad()
def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: AdamState,
              lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """In-place bias-corrected Adam update of ``params``."""
    state.step += 1
    bc1 = 1 - beta1**state.step
    bc2 = 1 - beta2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
        m = state.m.setdefault(name, torch.zeros_like(p))
        v = state.v.setdefault(name, torch.zeros_like(p))
        m.mul_(beta1).add_(g, alpha=1 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
        p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + eps))
    return state


def clip_global_norm(grads: dict[str, torch.Tensor], max_norm: float | None) -> float:
    norm = float(torch.sqrt(sum((g.to(torch.float64) ** 2).sum() for g in grads.values())))
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g.mul_(scale)
    return norm


# -- gradient verification -----------------------------------------------------


def finite_difference_check(model: nn.Module, loss_fn, eps: float = 1e-5) -> dict[str, float]:
    """Per-tensor relative error between autograd and central finite differences.

    ``loss_fn(model)`` must return a float64 scalar tensor. The error of a tensor
    is ``|g_auto - g_fd| / max(|g_auto|, |g_fd|)`` in the 2-norm.
    """
    params = dict(model.named_parameters())
    model.zero_grad()
    loss_fn(model).backward()
    auto = {k: p.grad.detach().clone() for k, p in params.items()}
    errors = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            fd = torch.zeros_like(flat)
            for n in range(flat.numel()):
                orig = flat[n].item()
                flat[n] = orig + eps
                up = loss_fn(model).item()
                flat[n] = orig - eps
                down = loss_fn(model).item()
                flat[n] = orig
                fd[n] = (up - down) / (2 * eps)
            a = auto[name].view(-1)
            denom = max(a.norm().item(), fd.norm().item())
            errors[name] = 0.0 if denom == 0 else (a - fd).norm().item() / denom
    return errors
