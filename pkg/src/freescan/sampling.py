"""Sequence windows and the main/auxiliary transform tasks inside them.

Frame positions inside a window are 1-based, as in ``T_{j<-i}`` with
``1 <= i < j <= M``. Scan positions (start indices) are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from itertools import combinations
from math import comb

import numpy as np

from .dataio import Scan
from .geometry import RigidTransform, invert_matrices

Pair = tuple[int, int]


def enumerate_pairs(M: int) -> list[Pair]:
    if M < 2:
        raise ValueError("sequence length M must be >= 2")
    return list(combinations(range(1, M + 1), 2))


@dataclass(frozen=True)
class TaskSet:
    """Main pair first, then the auxiliary pairs in their sampled order."""

    M: int
    main: Pair
    auxiliary: tuple[Pair, ...] = ()

    def __post_init__(self):
        i, j = self.main
        if not 1 <= i < j <= self.M:
            raise ValueError(f"main pair {self.main} invalid for M={self.M}")
        aux = tuple(tuple(map(int, p)) for p in self.auxiliary)
        object.__setattr__(self, "auxiliary", aux)
        if len(set(aux)) != len(aux) or self.main in aux:
            raise ValueError("auxiliary pairs must be distinct and exclude the main pair")
        for a, b in aux:
            if not 1 <= a < b <= self.M:
                raise ValueError(f"auxiliary pair {(a, b)} invalid for M={self.M}")

    @property
    def tau(self) -> int:
        return len(self.auxiliary)

    @property
    def pairs(self) -> tuple[Pair, ...]:
        return (self.main,) + self.auxiliary

    @property
    def n_tasks(self) -> int:
        return self.tau + 1

    @property
    def interval(self) -> int:
        return self.main[1] - self.main[0]

    @cached_property
    def triples(self) -> np.ndarray:
        """``(n, 3)`` task indices ``(ik, kj, ij)`` for every i < k < j with all three pairs present."""
        index = {p: n for n, p in enumerate(self.pairs)}
        out = []
        for (i, j), ij in index.items():
            for k in range(i + 1, j):
                if (i, k) in index and (k, j) in index:
                    out.append((index[(i, k)], index[(k, j)], ij))
        return np.asarray(out, dtype=np.int64).reshape(-1, 3)

    def to_dict(self) -> dict:
        return {"M": self.M, "main": list(self.main), "auxiliary": [list(p) for p in self.auxiliary]}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSet":
        return cls(int(d["M"]), tuple(d["main"]), tuple(tuple(p) for p in d["auxiliary"]))


def make_task_set(M: int, main: Pair, tau: int, rng: np.random.Generator | int | None = None) -> TaskSet:
    """Draw ``tau`` auxiliary pairs uniformly without replacement."""
    main = (int(main[0]), int(main[1]))
    candidates = [p for p in enumerate_pairs(M) if p != main]
    if len(candidates) == len(enumerate_pairs(M)):
        raise ValueError(f"main pair {main} invalid for M={M}")
    if not 0 <= tau <= comb(M, 2) - 1:
        raise ValueError(f"tau={tau} exceeds the {comb(M, 2) - 1} available auxiliary pairs")
    rng = np.random.default_rng(rng)
    chosen = rng.choice(len(candidates), size=tau, replace=False) if tau else []
    return TaskSet(M, main, tuple(candidates[c] for c in chosen))


@dataclass(frozen=True, eq=False)
class SequenceSample:
    frames: np.ndarray  # (M, H, W)
    gt_poses: np.ndarray  # (M, 4, 4) world<-tool
    scan_ref: str
    start_index: int
    main_pair: Pair

    @property
    def M(self) -> int:
        return len(self.frames)


def valid_starts(scan_len: int, M: int) -> np.ndarray:
    if M < 2:
        raise ValueError("sequence length M must be >= 2")
    if scan_len < M:
        raise ValueError(f"scan of {scan_len} frames is shorter than M={M}")
    return np.arange(scan_len - M + 1)


def chain_schedule(scan_len: int, M: int, i_star: int, j_star: int) -> np.ndarray:
    """0-based starts stepping by ``j* - i*`` so each window's i*-th frame is the previous j*-th."""
    starts = valid_starts(scan_len, M)
    if not 1 <= i_star < j_star <= M:
        raise ValueError(f"main pair {(i_star, j_star)} invalid for M={M}")
    return starts[:: j_star - i_star]


def window(scan: Scan, start: int, M: int, main: Pair) -> SequenceSample:
    return SequenceSample(
        frames=scan.frames[start : start + M],
        gt_poses=scan.world_from_tool[start : start + M],
        scan_ref=scan.scan_id,
        start_index=int(start),
        main_pair=main,
    )


def sample_sequences(
    scan: Scan,
    M: int,
    main: Pair,
    n: int | None = None,
    rng: np.random.Generator | int | None = None,
    mode: str = "train",
) -> list[SequenceSample]:
    """Random windows (``mode='train'``) or the reconstruction chain (``mode='eval'``)."""
    if mode == "train":
        starts = valid_starts(scan.n_frames, M)
        rng = np.random.default_rng(rng)
        picks = rng.choice(starts, size=n if n is not None else len(starts), replace=True)
    elif mode == "eval":
        picks = chain_schedule(scan.n_frames, M, *main)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return [window(scan, s, M, main) for s in picks]


def gt_matrices(world_from_tool: np.ndarray, tasks: TaskSet) -> np.ndarray:
    """``(..., T, 4, 4)`` ground-truth T_{j<-i} for poses ``(..., M, 4, 4)``."""
    pairs = np.asarray(tasks.pairs) - 1
    w_i = world_from_tool[..., pairs[:, 0], :, :]
    w_j = world_from_tool[..., pairs[:, 1], :, :]
    return invert_matrices(w_j) @ w_i


def gt_for_tasks(sample: SequenceSample, tasks: TaskSet) -> list[RigidTransform]:
    if tasks.M != sample.M:
        raise ValueError(f"task set is for M={tasks.M}, sample has {sample.M} frames")
    return [RigidTransform.from_matrix(m) for m in gt_matrices(sample.gt_poses, tasks)]
