"""Synthetic shape corpus and its preprocessing into (tokens, centers) arrays."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .hde import HdeConfig, encode_cloud
from .pointcloud import PointCloud, generate_shape, read_points, write_text
from .rng import Rng


@dataclass
class Split:
    clouds: list[PointCloud]

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clouds], dtype=np.int64)


@dataclass
class Prepared:
    tokens: np.ndarray    # N x T x E x K x 3
    centers: np.ndarray   # N x T x E x 3
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.tokens[idx], self.centers[idx], self.labels[idx]


def make_split(kinds: list[str], per_class: int, points: int, noise: float, rng: Rng) -> Split:
    clouds = []
    for i in range(per_class):
        for label, kind in enumerate(kinds):
            clouds.append(generate_shape(kind, points, noise, rng.child(i * len(kinds) + label),
                                         label=label))
    return Split(clouds)


def make_dataset(kinds: list[str], train_per_class: int, test_per_class: int, points: int,
                 noise: float, seed: int) -> tuple[Split, Split]:
    root = Rng(seed).child("data")
    return (make_split(kinds, train_per_class, points, noise, root.child("train")),
            make_split(kinds, test_per_class, points, noise, root.child("test")))


def prepare(split: Split, cfg: HdeConfig, k: int, rng: Rng, forward: bool = True,
            backward: bool = True) -> Prepared:
    toks, cens = [], []
    for i, cloud in enumerate(split.clouds):
        t, c = encode_cloud(cloud, cfg, k, rng.child(i), forward=forward, backward=backward)
        toks.append(t)
        cens.append(c)
    return Prepared(np.stack(toks), np.stack(cens), split.labels)


def save_split(split: Split, directory, kinds: list[str]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, c in enumerate(split.clouds):
        write_text(d / f"{i:05d}_{kinds[c.label]}.xyz", c.points,
                   comments=[f"label={c.label}", f"kind={kinds[c.label]}"])


def load_split(directory) -> Split:
    files = sorted(Path(directory).glob("*.xyz")) + sorted(Path(directory).glob("*.pcb"))
    if not files:
        raise FileNotFoundError(f"no point files in {directory}")
    clouds = [read_points(f) for f in files]
    for f, c in zip(files, clouds):
        if c.label is None:
            raise ValueError(f"{f}: missing '# label=' comment")
    return Split(clouds)
