"""Point-cloud geometry: sampling, neighborhoods, synthetic shapes, Chamfer distance, file I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Rng

SHAPE_KINDS = ("sphere", "cube", "torus", "cylinder")
BINARY_MAGIC = b"PCB1"


@dataclass
class PointCloud:
    points: np.ndarray
    label: int | None = None
    seg_labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be n x 3, got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        self.points = pts
        if self.seg_labels is not None:
            self.seg_labels = np.asarray(self.seg_labels, dtype=np.int64)
            if self.seg_labels.shape != (pts.shape[0],):
                raise ValueError("seg_labels must have one entry per point")

    def __len__(self) -> int:
        return self.points.shape[0]

    def normalized(self) -> "PointCloud":
        """Zero mean, max radius 1."""
        pts = self.points - self.points.mean(axis=0)
        r = np.sqrt((pts ** 2).sum(axis=1)).max()
        if r > 0:
            pts = pts / r
        return PointCloud(pts, self.label, self.seg_labels)


@dataclass
class SampleResult:
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.indices)


def _points(x) -> np.ndarray:
    return x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)


def fps(cloud: PointCloud, count: int, rng: Rng | None = None, start: int | None = None) -> SampleResult:
    """Farthest point sampling.

    The first index is drawn uniformly from ``rng`` unless ``start`` is given.
    Each later pick maximizes the distance to the already-selected set; ties
    go to the lowest index.
    """
    pts = _points(cloud)
    n = pts.shape[0]
    if count < 1:
        raise ValueError("fps: count must be positive")
    if count > n:
        raise ValueError(f"fps: requested {count} points from a cloud of {n}")
    if start is None:
        if rng is None:
            raise ValueError("fps: need an rng or an explicit start index")
        start = int(rng.integers(n))
    out = np.empty(count, dtype=np.int64)
    out[0] = start
    dist = ((pts - pts[start]) ** 2).sum(axis=1)
    dist[start] = -1.0
    for i in range(1, count):
        j = int(np.argmax(dist))  # argmax returns the first (lowest) index on ties
        out[i] = j
        d = ((pts - pts[j]) ** 2).sum(axis=1)
        np.minimum(dist, d, out=dist)
        dist[j] = -1.0
    return SampleResult(out)


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).sum(axis=-1)


def knn(centers, cloud, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest cloud points per center, nearest first, ties by index."""
    c = np.asarray(_points(centers), dtype=np.float64).reshape(-1, 3)
    pts = _points(cloud)
    if k < 1 or k > pts.shape[0]:
        raise ValueError(f"knn: k={k} outside [1, {pts.shape[0]}]")
    d = pairwise_sq_dists(c, pts)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def chamfer(p, q) -> float:
    """Symmetric squared-L2 Chamfer distance (sum of both directional means)."""
    p, q = _points(p), _points(q)
    if len(p) == 0 or len(q) == 0:
        raise ValueError("chamfer: empty point set")
    d = pairwise_sq_dists(p, q)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


# -- synthetic shapes ------------------------------------------------------------

def _sample_surface(kind: str, n: int, rng: Rng) -> np.ndarray:
    g = rng.gen
    if kind == "sphere":
        # antipodal pairs (plus one zero-sum triangle when n is odd) keep the
        # sample mean at the origin, so centering does not move points off the sphere
        v = g.normal(size=((n - 3 * (n % 2)) // 2, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        parts = [v, -v]
        if n % 2:
            a = g.normal(size=3)
            a /= np.linalg.norm(a)
            w = np.cross(a, g.normal(size=3))
            w /= np.linalg.norm(w)
            s3 = np.sqrt(3.0) / 2
            parts.append(np.stack([a, -a / 2 + s3 * w, -a / 2 - s3 * w]))
        return np.concatenate(parts)
    if kind == "cube":
        face = g.integers(6, size=n)
        uv = g.uniform(-1.0, 1.0, size=(n, 2))
        pts = np.empty((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        for a in range(3):
            sel = axis == a
            others = [b for b in range(3) if b != a]
            pts[sel, a] = sign[sel]
            pts[sel, others[0]] = uv[sel, 0]
            pts[sel, others[1]] = uv[sel, 1]
        return pts
    if kind == "torus":
        big, small = 1.0, 0.35
        # area-uniform: accept tube angles with density proportional to the local radius
        out = np.empty((0, 3))
        while len(out) < n:
            m = 2 * (n - len(out)) + 16
            u = g.uniform(0, 2 * np.pi, m)
            v = g.uniform(0, 2 * np.pi, m)
            keep = g.uniform(0, big + small, m) < big + small * np.cos(v)
            u, v = u[keep], v[keep]
            ring = big + small * np.cos(v)
            pts = np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1)
            out = np.concatenate([out, pts])
        return out[:n]
    if kind == "cylinder":
        radius, half = 0.5, 1.0
        side = 2 * np.pi * radius * 2 * half
        cap = np.pi * radius ** 2
        part = g.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
        theta = g.uniform(0, 2 * np.pi, n)
        pts = np.empty((n, 3))
        s = part == 0
        pts[s, 0] = radius * np.cos(theta[s])
        pts[s, 1] = radius * np.sin(theta[s])
        pts[s, 2] = g.uniform(-half, half, s.sum())
        c = ~s
        rr = radius * np.sqrt(g.uniform(0, 1, c.sum()))
        pts[c, 0] = rr * np.cos(theta[c])
        pts[c, 1] = rr * np.sin(theta[c])
        pts[c, 2] = np.where(part[c] == 1, half, -half)
        return pts
    raise ValueError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")


def generate_shape(kind: str, n: int, noise_sigma: float, rng: Rng, label: int | None = None) -> PointCloud:
    if kind not in SHAPE_KINDS:
        raise ValueError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    if n < 16:
        raise ValueError("generate_shape: n must be at least 16")
    pts = _sample_surface(kind, n, rng)
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, size=pts.shape)
    return PointCloud(pts, label=label).normalized()


# -- FPS stage behaviour -----------------------------------------------------------

def split_stages(indices: np.ndarray, fractions: tuple[float, float, float]) -> tuple[np.ndarray, ...]:
    n = len(indices)
    early = max(1, int(round(fractions[0] * n)))
    mid = max(1, int(round(fractions[1] * n)))
    late = max(1, int(round(fractions[2] * n)))
    if early + late < n:
        mid = min(mid, n - early - late)
    if early + mid + late > n:
        raise ValueError("stage sizes exceed the sampled count")
    return (indices[:early], indices[early:early + mid],
            indices[early + mid:early + mid + late])


def fps_stage_similarity(cloud: PointCloud, seeds: tuple[Rng, Rng],
                         stage_fractions: tuple[float, float, float] = (0.1, 0.8, 0.1),
                         count: int | None = None) -> tuple[float, float, float]:
    """Chamfer distance between same-stage FPS subsets under two seeds.

    Returns (early/early, mid/mid, late/late).  ``count`` points are sampled
    (default: a quarter of the cloud) and the selection order is cut into
    stages.  Sampling the whole cloud makes the late stage degenerate: its
    last picks are the closest pairs, which barely depend on the seed.
    """
    if any(f <= 0 for f in stage_fractions) or sum(stage_fractions) > 1 + 1e-12:
        raise ValueError("stage fractions must be positive and sum to at most 1")
    count = max(3, len(cloud) // 4) if count is None else count
    a = fps(cloud, count, seeds[0]).indices
    b = fps(cloud, count, seeds[1]).indices
    pts = cloud.points
    return tuple(chamfer(pts[x], pts[y])
                 for x, y in zip(split_stages(a, stage_fractions), split_stages(b, stage_fractions)))


# -- file formats ---------------------------------------------------------------

def write_text(path, points: np.ndarray, labels=None, comments=()) -> None:
    lines = [f"# {c}" for c in comments]
    for i, p in enumerate(np.asarray(points, dtype=np.float64)):
        row = " ".join(repr(float(v)) for v in p)
        if labels is not None:
            row += f" {int(labels[i])}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def parse_text(text: str) -> tuple[np.ndarray, np.ndarray | None, list[str]]:
    """Parse "x y z [label]" lines; returns points, per-point labels, comments."""
    pts, labels, comments = [], [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            comments.append(line[1:].strip())
            continue
        cols = line.split()
        if len(cols) not in (3, 4):
            raise ValueError(f"line {lineno}: expected 3 or 4 columns, got {len(cols)}")
        pts.append([float(c) for c in cols[:3]])
        if len(cols) == 4:
            labels.append(int(cols[3]))
    if labels and len(labels) != len(pts):
        raise ValueError("label column present on some lines only")
    arr = np.array(pts, dtype=np.float64).reshape(-1, 3)
    return arr, (np.array(labels, dtype=np.int64) if labels else None), comments


def read_text(path) -> PointCloud:
    pts, seg, comments = parse_text(Path(path).read_text())
    label = None
    for c in comments:
        if c.startswith("label="):
            label = int(c.split("=", 1)[1])
    return PointCloud(pts, label=label, seg_labels=seg)


def write_binary(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    Path(path).write_bytes(BINARY_MAGIC + struct.pack("<I", len(pts)) + pts.tobytes())


def read_binary(path) -> PointCloud:
    blob = Path(path).read_bytes()
    if blob[:4] != BINARY_MAGIC:
        raise ValueError("not a PCB1 point file")
    (count,) = struct.unpack_from("<I", blob, 4)
    need = 8 + count * 12
    if len(blob) != need:
        raise ValueError(f"PCB1 payload length {len(blob)} != expected {need}")
    pts = np.frombuffer(blob, dtype="<f4", offset=8).reshape(count, 3)
    return PointCloud(pts.astype(np.float64))


def read_points(path) -> PointCloud:
    with open(path, "rb") as fh:
        head = fh.read(4)
    return read_binary(path) if head == BINARY_MAGIC else read_text(path)
