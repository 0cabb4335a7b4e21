"""Hierarchical dynamic encoding: FPS order -> T frames of E centers -> neighbor tokens.

The FPS selection order is cut into an early stage (L points), a mid stage
(M points) and a late stage (R points).  Step ``i`` takes a forward window of
F points starting at ``i*l`` inside early+mid, plus its own block of ``r``
late-stage points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .pointcloud import PointCloud, SampleResult, fps, knn
from .rng import Rng


@dataclass(frozen=True)
class HdeConfig:
    T: int
    E: int
    L: int
    M: int
    R: int

    @property
    def l(self) -> int:  # noqa: E743
        return self.L // self.T

    @property
    def r(self) -> int:
        return self.R // self.T

    @property
    def F(self) -> int:
        return self.E - self.r

    @property
    def S(self) -> int:
        return self.L + self.M + self.R

    def validate(self) -> None:
        if min(self.T, self.E, self.L, self.M, self.R) <= 0:
            raise ValueError(f"HdeConfig counts must be positive: {self}")
        if self.F <= 0:
            raise ValueError(f"forward window F={self.F} must be positive")
        if self.F + (self.T - 1) * self.l > self.M + self.L:
            raise ValueError("forward windows leave the early+mid region")
        if self.T * self.r > self.R:
            raise ValueError("backward blocks leave the late region")


def derive_config(E: int, T: int, stage_fraction: float = 0.10) -> HdeConfig:
    """Smallest consistent config with early = late = ceil(fraction * E)."""
    if not (E >= T >= 1):
        raise ValueError(f"need E >= T >= 1, got E={E}, T={T}")
    if not 0 < stage_fraction < 0.5:
        raise ValueError("stage_fraction must lie in (0, 0.5)")
    L = R = max(1, math.ceil(stage_fraction * E - 1e-9))
    l, r = L // T, R // T
    F = E - r
    M = F + (T - 1) * l - L
    if M <= 0:
        raise ValueError(f"E={E}, T={T}, fraction={stage_fraction} leave no mid stage (M={M})")
    cfg = HdeConfig(T=T, E=E, L=L, M=M, R=R)
    cfg.validate()
    return cfg


@dataclass
class EncodedFrames:
    frames: np.ndarray          # T x E x 3
    index_sets: np.ndarray      # T x E, indices into the source cloud
    forward_part: np.ndarray    # T x F
    backward_part: np.ndarray   # T x r
    positions: np.ndarray       # T x E, positions within the FPS ordering


OffsetSchedule = Callable[[int, HdeConfig], int]


def hde(ordering: SampleResult, cfg: HdeConfig, cloud: PointCloud | np.ndarray | None = None,
        forward: bool = True, backward: bool = True,
        offset_schedule: OffsetSchedule | None = None) -> EncodedFrames:
    """Build the T encoded frames from an FPS ordering.

    ``forward=False`` pins every forward window at the start of the ordering,
    ``backward=False`` gives every step the first late-stage block; with both
    off, all frames are identical (plain repeated encoding).
    ``offset_schedule(i, cfg)`` overrides the forward window start of step i.
    """
    cfg.validate()
    idx = np.asarray(ordering.indices if isinstance(ordering, SampleResult) else ordering)
    if len(idx) != cfg.S:
        raise ValueError(f"hde: ordering has {len(idx)} entries, config needs S={cfg.S}")
    late0 = cfg.M + cfg.L
    pos_rows = []
    for i in range(cfg.T):
        if offset_schedule is not None:
            start = int(offset_schedule(i, cfg))
        else:
            start = i * cfg.l if forward else 0
        fwd = np.arange(start, start + cfg.F)
        b = i if backward else 0
        bwd = np.arange(late0 + b * cfg.r, late0 + (b + 1) * cfg.r)
        if fwd.size and (fwd[0] < 0 or fwd[-1] >= late0):
            raise IndexError(f"hde: step {i} forward window [{fwd[0]}, {fwd[-1]}] leaves [0, {late0})")
        if bwd.size and bwd[-1] >= cfg.S:
            raise IndexError(f"hde: step {i} backward block ends at {bwd[-1]} >= S={cfg.S}")
        pos_rows.append(np.concatenate([fwd, bwd]))
    positions = np.stack(pos_rows).astype(np.int64)
    index_sets = idx[positions]
    if cloud is not None:
        pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
        frames = pts[index_sets]
    else:
        frames = np.zeros(index_sets.shape + (3,))
    return EncodedFrames(frames=frames, index_sets=index_sets,
                         forward_part=index_sets[:, :cfg.F], backward_part=index_sets[:, cfg.F:],
                         positions=positions)


def group_tokens(frames: EncodedFrames | np.ndarray, cloud: PointCloud, k: int) -> np.ndarray:
    """k nearest cloud points of every center, relative to the center: T x E x k x 3."""
    centers = frames.frames if isinstance(frames, EncodedFrames) else np.asarray(frames)
    T, E, _ = centers.shape
    flat = centers.reshape(-1, 3)
    nbr = knn(flat, cloud, k)
    tokens = cloud.points[nbr] - flat[:, None, :]
    return tokens.reshape(T, E, k, 3)


def encode_cloud(cloud: PointCloud, cfg: HdeConfig, k: int, rng: Rng,
                 forward: bool = True, backward: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """FPS + HDE + grouping for one cloud; returns (tokens T×E×k×3, centers T×E×3)."""
    order = fps(cloud, cfg.S, rng)
    enc = hde(order, cfg, cloud, forward=forward, backward=backward)
    return group_tokens(enc, cloud, k), enc.frames
