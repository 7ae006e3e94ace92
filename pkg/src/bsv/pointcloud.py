"""Point clouds, rigid transforms, nearest-neighbour search and cleaning."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.utils.validation import check_is_fitted

from .segments import EXTREMITIES, SegmentLabel
from .validation import check_labels, check_points, check_rotation

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = check_rotation(self.rotation)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_euler(cls, angles_deg, translation=(0.0, 0.0, 0.0), seq="xyz") -> "RigidTransform":
        R = Rotation.from_euler(seq, angles_deg, degrees=True).as_matrix()
        return cls(R, translation)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M


@dataclass(frozen=True, eq=False)
class LabeledPointCloud:
    points: np.ndarray
    labels: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        p = check_points(self.points, "points", allow_empty=True)
        p.setflags(write=False)
        object.__setattr__(self, "points", p)
        lab = check_labels(self.labels, len(p))
        if lab is not None:
            lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)
        if self.colors is not None:
            c = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(c) != len(p):
                raise ValueError("colors must have one row per point")
            c.setflags(write=False)
            object.__setattr__(self, "colors", c)

    def __len__(self):
        return len(self.points)

    def select(self, mask) -> "LabeledPointCloud":
        return LabeledPointCloud(
            self.points[mask],
            None if self.labels is None else self.labels[mask],
            None if self.colors is None else self.colors[mask])

    def transformed(self, transform: RigidTransform) -> "LabeledPointCloud":
        return LabeledPointCloud(transform.apply(self.points), self.labels, self.colors)

    def translated(self, offset) -> "LabeledPointCloud":
        return LabeledPointCloud(self.points + np.asarray(offset), self.labels, self.colors)

    def scaled(self, s: float) -> "LabeledPointCloud":
        return LabeledPointCloud(self.points * s, self.labels, self.colors)


class SpatialIndex:
    """k-d tree over 3D points with a lowest-index rule for equidistant hits."""

    def __init__(self, points):
        self.points = check_points(points, "points", allow_empty=True)
        self._tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self):
        return len(self.points)

    def query(self, queries, k_probe: int = 8):
        """Nearest stored point for every query: ``(distances, indices)``."""
        if self._tree is None:
            raise ValueError("spatial index is empty")
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        k = min(k_probe, len(self.points))
        _, idx = self._tree.query(q, k=k)
        idx = idx.reshape(len(q), k)
        # recompute so ties are judged with one consistent formula
        d = np.linalg.norm(self.points[idx] - q[:, None, :], axis=2)
        best = d.min(axis=1)
        tied = d == best[:, None]
        out = np.where(tied, idx, np.iinfo(np.int64).max).min(axis=1)
        if k < len(self.points):
            # every probed neighbour tied: more may sit beyond the probe
            for i in np.flatnonzero(tied.all(axis=1)):
                cand = np.asarray(self._tree.query_ball_point(q[i], best[i] * (1 + 1e-9) + 1e-300),
                                  dtype=np.int64)
                dc = np.linalg.norm(self.points[cand] - q[i], axis=1)
                out[i] = cand[dc == dc.min()].min()
        return np.linalg.norm(self.points[out] - q, axis=1), out

    def nearest(self, q) -> int:
        return int(self.query(np.asarray(q, dtype=np.float64).reshape(1, 3))[1][0])


def nearest(index: SpatialIndex, q) -> int:
    return index.nearest(q)


def mean_knn_distance(points: np.ndarray, k: int, chunk: int = 4096) -> np.ndarray:
    """Mean distance from each point to its ``k`` nearest other points."""
    tree = cKDTree(points)
    out = np.empty(len(points))
    step = max(1, min(chunk, 4_000_000 // (k + 1)))
    for s in range(0, len(points), step):
        d, _ = tree.query(points[s:s + step], k=k + 1)
        # column 0 is the point itself (or an exact duplicate, same distance)
        out[s:s + step] = d[:, 1:].mean(axis=1)
    return out


class StatisticalOutlierRemoval(OutlierMixin, BaseEstimator):
    """Flag points whose mean k-NN distance exceeds ``mean + std_ratio * std``.

    Parameters
    ----------
    n_neighbors : int, default=600
        Neighbours used for the per-point mean distance. Reduced to
        ``n_samples - 1`` with a warning on small clouds.
    std_ratio : float, default=0.05
        Multiplier on the standard deviation of the statistic.

    Attributes
    ----------
    mean_distances_ : ndarray of shape (n_samples,)
    threshold_ : float
    inlier_mask_ : ndarray of bool
    """

    def __init__(self, n_neighbors=600, std_ratio=0.05):
        self.n_neighbors = n_neighbors
        self.std_ratio = std_ratio

    def fit(self, X, y=None):
        X = check_points(X)
        n = len(X)
        k = int(self.n_neighbors)
        if n <= k:
            warnings.warn("cloud has %d points; using %d neighbours instead of %d" % (n, n - 1, k))
            k = n - 1
        self.n_neighbors_ = k
        if k < 1:
            self.mean_distances_ = np.zeros(n)
            self.threshold_ = 0.0
            self.inlier_mask_ = np.ones(n, dtype=bool)
            return self
        md = mean_knn_distance(X, k)
        mu = md.mean()
        sigma = md.std(ddof=1) if n > 1 else 0.0
        self.mean_distances_ = md
        self.threshold_ = float(mu + self.std_ratio * sigma)
        # rounding noise must not split a homogeneous cloud
        self.inlier_mask_ = md <= self.threshold_ + 1e-12 * mu
        logger.debug("SOR kept %d of %d points", int(self.inlier_mask_.sum()), n)
        return self

    def fit_predict(self, X, y=None):
        self.fit(X)
        return np.where(self.inlier_mask_, 1, -1)

    def predict(self, X=None):
        check_is_fitted(self, "inlier_mask_")
        return np.where(self.inlier_mask_, 1, -1)


def statistical_outlier_removal(pc: LabeledPointCloud, k: int = 600,
                                std_ratio: float = 0.05) -> LabeledPointCloud:
    if len(pc) == 0:
        raise ValueError("cannot clean an empty point cloud")
    keep = StatisticalOutlierRemoval(k, std_ratio).fit_predict(pc.points) == 1
    return pc.select(keep)


def merge(front: LabeledPointCloud, back: LabeledPointCloud,
          t_front: RigidTransform, t_back: RigidTransform) -> LabeledPointCloud:
    """Map both views into the shared frame and concatenate (front first)."""
    parts = [front.transformed(t_front), back.transformed(t_back)]
    pts = np.concatenate([p.points for p in parts])
    labels = None
    if any(p.labels is not None for p in parts):
        labels = np.concatenate([
            p.labels if p.labels is not None else np.full(len(p), SegmentLabel.BACKGROUND, np.uint8)
            for p in parts])
    colors = None
    if all(p.colors is not None for p in parts):
        colors = np.concatenate([p.colors for p in parts])
    return LabeledPointCloud(pts, labels, colors)


def drop_extremities(pc: LabeledPointCloud) -> LabeledPointCloud:
    """Remove head, hand and foot points, keeping the rest in order."""
    if pc.labels is None:
        raise ValueError("drop_extremities needs a labelled cloud")
    keep = ~np.isin(pc.labels, np.array([int(s) for s in EXTREMITIES], dtype=np.uint8))
    return pc.select(keep)
