"""Point cloud frames, sequences, sampling and statistical outlier removal."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .neighbors import knn

__all__ = ["PointCloud", "Sequence", "sample_points", "remove_outliers",
           "normalize_timestamps"]


@dataclass
class PointCloud:
    """One frame: N x 3 positions plus a scalar timestamp."""

    points: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 1:
            raise ValueError(f"points must be N x 3 with N >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite values")
        if not np.isfinite(self.timestamp):
            raise ValueError("timestamp must be finite")
        self.points = pts
        self.timestamp = float(self.timestamp)

    def __len__(self):
        return len(self.points)

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))


@dataclass
class Sequence:
    """Ordered frames with strictly increasing timestamps."""

    frames: list[PointCloud] = field(default_factory=list)

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ValueError("a sequence needs at least 2 frames")
        times = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"timestamps must strictly increase, got {times}")

    def __len__(self):
        return len(self.frames)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames])

    def bbox_diagonal(self) -> float:
        pts = np.concatenate([f.points for f in self.frames])
        return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def sample_points(pc: PointCloud, n: int, seed: int) -> PointCloud:
    """Uniform subsample without replacement; undersized clouds are padded
    by sampling extra points with replacement. Deterministic under `seed`."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    count = len(pc)
    if count >= n:
        idx = rng.choice(count, size=n, replace=False)
    else:
        extra = rng.choice(count, size=n - count, replace=True)
        idx = np.concatenate([np.arange(count), extra])
    return PointCloud(pc.points[idx], pc.timestamp)


def remove_outliers(pc: PointCloud, k: int = 16, std_ratio: float = 2.0) -> PointCloud:
    """Drop points whose mean k-NN distance exceeds mean + std_ratio * std.

    Survivor order is preserved. k must satisfy 1 <= k < N.
    """
    n = len(pc)
    if k < 1 or k >= n:
        raise ValueError(f"k must satisfy 1 <= k < N (k={k}, N={n})")
    _, dist = knn(pc.points, k, exclude_self=True)
    avg = dist.mean(axis=1)
    keep = avg <= avg.mean() + std_ratio * avg.std()
    if keep.sum() < 0.5 * n:
        warnings.warn(
            f"outlier removal dropped {n - int(keep.sum())} of {n} points; "
            "check k/std_ratio", stacklevel=2)
    if not keep.any():
        raise ValueError("outlier removal would drop every point")
    return PointCloud(pc.points[keep], pc.timestamp)


def normalize_timestamps(seq: Sequence) -> Sequence:
    """Affinely map timestamps so the first frame sits at 0 and the last at 1."""
    times = seq.timestamps
    span = times[-1] - times[0]
    if span <= 0:
        raise ValueError("cannot normalize: duplicate or non-increasing timestamps")
    scaled = (times - times[0]) / span
    return Sequence([PointCloud(f.points, t) for f, t in zip(seq.frames, scaled)])
