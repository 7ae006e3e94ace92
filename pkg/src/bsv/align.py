"""Translation and uniform-scale pre-alignment of a template to a target cloud."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .mesh import TriangleMesh
from .pointcloud import LabeledPointCloud
from .validation import check_points

Shape = Union[TriangleMesh, LabeledPointCloud]


@dataclass(frozen=True)
class AlignmentParams:
    """``x -> scale * (x + pre_translation) + post_translation``."""

    scale: float = 1.0
    pre_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    post_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise ValueError("scale must be positive, got %r" % self.scale)
        object.__setattr__(self, "pre_translation", np.asarray(self.pre_translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "post_translation", np.asarray(self.post_translation, dtype=np.float64).reshape(3))

    def apply(self, points) -> np.ndarray:
        return self.scale * (np.asarray(points, dtype=np.float64) + self.pre_translation) + self.post_translation

    def invert(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.post_translation) / self.scale - self.pre_translation


def _points(shape: Shape) -> np.ndarray:
    return shape.vertices if isinstance(shape, TriangleMesh) else shape.points


def _with_points(shape: Shape, pts: np.ndarray) -> Shape:
    if isinstance(shape, TriangleMesh):
        return shape.with_vertices(pts)
    return LabeledPointCloud(pts, shape.labels, shape.colors)


def bbox_center(points) -> np.ndarray:
    return 0.5 * (points.min(axis=0) + points.max(axis=0))


def bbox_diagonal(points) -> float:
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))


def center_to_origin(shape: Shape):
    """Translate so the axis-aligned bounding-box center sits at the origin.

    Returns the moved shape and the translation that was added.
    """
    pts = _points(shape)
    if len(pts) == 0:
        raise ValueError("cannot center an empty shape")
    t = -bbox_center(pts)
    return _with_points(shape, pts + t), t


def scale_template(template: TriangleMesh, target: LabeledPointCloud):
    """Scale ``template`` about its bbox center so both bbox diagonals match.

    The result is then translated onto the target's bbox center. Works for
    shapes that are not centered too; the translations are recorded in the
    returned :class:`AlignmentParams`.
    """
    tp = template.vertices
    cp = check_points(target.points, "target")
    d_t, d_c = bbox_diagonal(tp), bbox_diagonal(cp)
    if d_t <= 0 or d_c <= 0:
        raise ValueError("zero bounding-box diagonal (template %g, target %g)" % (d_t, d_c))
    params = AlignmentParams(d_c / d_t, -bbox_center(tp), bbox_center(cp))
    return template.with_vertices(params.apply(tp)), params


class BoundingBoxAligner(TransformerMixin, BaseEstimator):
    """Fit the template-to-cloud translation and scale from bounding boxes.

    ``fit(template_vertices, target_points)`` stores ``params_``; ``transform``
    maps any point array with the same parameters.
    """

    def __init__(self, scale=True):
        self.scale = scale

    def fit(self, X, y):
        X = check_points(X, "template")
        y = check_points(y, "target")
        dx, dy = bbox_diagonal(X), bbox_diagonal(y)
        if dx <= 0 or dy <= 0:
            raise ValueError("zero bounding-box diagonal")
        s = dy / dx if self.scale else 1.0
        self.params_ = AlignmentParams(s, -bbox_center(X), bbox_center(y))
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        return self.params_.apply(check_points(X))

    def inverse_transform(self, X):
        check_is_fitted(self, "params_")
        return self.params_.invert(check_points(X))
