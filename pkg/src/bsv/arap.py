"""Regularized as-rigid-as-possible registration of a template mesh to a cloud.

The objective minimized over positions ``p'`` and per-vertex rotations ``R``::

    E = w * (sum_i ARAP_i + alpha * A * sum_i REG_i) + 2 * w * mu * sum_c |p'_c - t_c|^2

    ARAP_i = sum_j w_ij |(p'_i - p'_j) - R_i (p_i - p_j)|^2
    REG_i  = |S^_i - C^_i R_i^T|_F^2

where ``S^_i`` is the deformed 1-ring covariance normalized by the cell's
weight sum and ``C^_i`` the same quantity at rest. ``w`` is the per-cell
weight, ``A`` the template area and ``mu`` the correspondence weight. The
local step fits each ``R_i`` jointly to both terms and the global step solves
one sparse SPD system per coordinate.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu
from sklearn.base import BaseEstimator

from .mesh import (TriangleMesh, build_laplacian, cotangent_weights, surface_area,
                   unique_edges)
from .pointcloud import LabeledPointCloud, SpatialIndex
from .validation import check_points

logger = logging.getLogger(__name__)

M2P = "m2p"
P2M = "p2m"
DEFAULT_SCHEDULE = ((M2P, 5), (P2M, 5), (M2P, 10))
DISTORTION_LIMIT = 10.0


class RegistrationError(RuntimeError):
    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = "iteration %d: %s" % (iteration, message)
        super().__init__(message)
        self.iteration = iteration


@dataclass
class RegistrationConfig:
    """Weights and schedule for :func:`register`.

    ``correspondence_weight`` is the diagonal penalty added per constrained
    vertex in the normalized global system (see module docstring).
    """

    per_cell_weight: float = 1e-2
    regularization_alpha: float = 1e6
    schedule: Sequence[Tuple[str, int]] = DEFAULT_SCHEDULE
    inner_sweeps: int = 1
    correspondence_weight: float = 500.0
    max_distance: Optional[float] = None
    early_exit_tol: Optional[float] = None
    distortion_limit: float = DISTORTION_LIMIT

    def __post_init__(self):
        self.schedule = tuple((str(d).lower(), int(n)) for d, n in self.schedule)
        if not self.schedule:
            raise ValueError("schedule must not be empty")
        for d, n in self.schedule:
            if d not in (M2P, P2M):
                raise ValueError("unknown correspondence direction %r" % d)
            if n < 0:
                raise ValueError("iteration counts must be >= 0")
        if self.per_cell_weight <= 0:
            raise ValueError("per_cell_weight must be > 0")
        if self.regularization_alpha < 0:
            raise ValueError("regularization_alpha must be >= 0")
        if self.correspondence_weight <= 0:
            raise ValueError("correspondence_weight must be > 0")
        if self.inner_sweeps < 1:
            raise ValueError("inner_sweeps must be >= 1")
        if self.max_distance is not None and self.max_distance <= 0:
            raise ValueError("max_distance must be > 0")

    @property
    def n_iterations(self) -> int:
        return sum(n for _, n in self.schedule)

    @staticmethod
    def parse_schedule(text: str):
        """``"m2p:5,p2m:5,m2p:10"`` -> tuple of pairs."""
        out = []
        for part in text.split(","):
            d, n = part.strip().split(":")
            out.append((d.strip(), int(n)))
        return tuple(out)


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    vertices: np.ndarray
    targets: np.ndarray
    weights: np.ndarray
    direction: str

    def __len__(self):
        return len(self.vertices)


@dataclass
class EnergyBreakdown:
    """``total = w * (fitting + regularization)``; ``objective`` adds the data term."""

    fitting: float
    regularization: float
    total: float
    correspondence: float = 0.0
    objective: float = 0.0


@dataclass
class IterationRecord:
    iteration: int
    phase: str
    sweep: int
    fitting: float
    regularization: float
    total: float
    correspondence: float
    objective: float
    n_correspondences: int
    max_edge_distortion: float
    unstable: bool


# ---------------------------------------------------------------- structure

class ArapSystem:
    """Precomputed cell structure and system matrices for one rest mesh."""

    def __init__(self, rest: TriangleMesh, config: RegistrationConfig = None, weights=None):
        config = config or RegistrationConfig()
        self.rest = rest
        self.config = config
        self.n = n = rest.n_vertices
        self.weights = weights if weights is not None else cotangent_weights(rest, config.per_cell_weight)
        self.laplacian = build_laplacian(rest, self.weights)
        e, w = self.weights.edges, self.weights.weights
        # half-edge h belongs to cell src[h] and points to its neighbour dst[h]
        self.src = np.concatenate([e[:, 0], e[:, 1]])
        self.dst = np.concatenate([e[:, 1], e[:, 0]])
        self.w = np.concatenate([w, w])
        H = len(self.src)
        self.rest_edges = rest.vertices[self.src] - rest.vertices[self.dst]
        sums = np.bincount(self.src, weights=self.w, minlength=n)
        abs_sums = np.bincount(self.src, weights=np.abs(self.w), minlength=n)
        sums = np.where(sums > 1e-12 * np.maximum(abs_sums, 1e-300), sums, abs_sums)
        self.cell_sums = np.where(sums > 0, sums, 1.0)
        self.w_hat = self.w / self.cell_sums[self.src]
        # cell incidence: sums half-edge quantities into their cell
        self._cell = sparse.csr_matrix((np.ones(H), (self.src, np.arange(H))), shape=(n, H))
        # G maps one coordinate of the deformed positions to the stacked normalized
        # covariance columns: (G x)[3i + a] = sum_h w^_h e_h[a] (x_i - x_j)
        D = sparse.csr_matrix((np.concatenate([np.ones(H), -np.ones(H)]),
                               (np.tile(np.arange(H), 2), np.concatenate([self.src, self.dst]))),
                              shape=(H, n))
        rows = (3 * self.src[:, None] + np.arange(3)).ravel()
        cols = np.repeat(np.arange(H), 3)
        vals = (self.w_hat[:, None] * self.rest_edges).ravel()
        B = sparse.csr_matrix((vals, (rows, cols)), shape=(3 * n, H))
        self.G = (B @ D).tocsr()
        self.rest_cov = (self.G @ rest.vertices).reshape(n, 3, 3)
        self.area = surface_area(rest)
        self.reg_scale = config.regularization_alpha * self.area
        self.K = (self.G.T @ self.G).tocsr()
        self.edges = unique_edges(rest.faces)
        self.rest_lengths = np.linalg.norm(rest.vertices[self.edges[:, 0]] - rest.vertices[self.edges[:, 1]], axis=1)
        # sliver edges (marching cubes leaves some near zero) would dominate the ratio
        self._gauge = self.rest_lengths >= 0.1 * np.median(self.rest_lengths)
        self._base = (self.laplacian.matrix + 0.5 * self.reg_scale * self.K).tocsr()
        self._factor_key = None
        self._factor = None
        self.n_factorizations = 0

    # covariances ---------------------------------------------------------
    def covariances(self, deformed: np.ndarray) -> np.ndarray:
        """``S_i = sum_j w_ij e_ij e'_ij^T`` for every cell, shape (n, 3, 3)."""
        return (self.G @ deformed).reshape(self.n, 3, 3) * self.cell_sums[:, None, None]

    def normalized_covariances(self, deformed: np.ndarray) -> np.ndarray:
        return (self.G @ deformed).reshape(self.n, 3, 3)

    # system --------------------------------------------------------------
    def matrix(self, constraint_diag: np.ndarray) -> sparse.csc_matrix:
        return (self._base + sparse.diags(constraint_diag)).tocsc()

    def factorization(self, constraint_diag: np.ndarray):
        key = constraint_diag.tobytes()
        if key != self._factor_key:
            A = self.matrix(constraint_diag)
            self._factor = (A, splu(A))
            self._factor_key = key
            self.n_factorizations += 1
        return self._factor

    def rhs(self, rotations: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """``b_i = sum_j 0.5 w_ij (R_i + R_j)(p_i - p_j)`` and the regularizer pull ``G^T g``."""
        Rsum = rotations[self.src] + rotations[self.dst]
        contrib = 0.5 * self.w[:, None] * np.einsum("hab,hb->ha", Rsum, self.rest_edges)
        b = self._cell @ contrib
        g = np.einsum("iab,icb->iac", self.rest_cov, rotations).reshape(3 * self.n, 3)
        return b, self.G.T @ g

    def edge_distortion(self, deformed: np.ndarray) -> float:
        """Largest ratio between deformed and rest edge length (either way).

        Edges shorter than a tenth of the median rest length are ignored.
        """
        e = self.edges[self._gauge]
        l = np.linalg.norm(deformed[e[:, 0]] - deformed[e[:, 1]], axis=1)
        if not np.all(np.isfinite(l)):
            return float("inf")
        if np.any(l == 0):
            return float("inf")
        r = l / self.rest_lengths[self._gauge]
        return float(max(r.max(), (1.0 / r).max()))


# ---------------------------------------------------------------- steps

def compute_correspondences(mesh: TriangleMesh, cloud, direction: str = M2P,
                            config: RegistrationConfig = None, mesh_positions=None,
                            cloud_index: Optional[SpatialIndex] = None) -> CorrespondenceSet:
    """Nearest-neighbour correspondences between mesh vertices and cloud points.

    ``m2p`` pairs every vertex with its nearest cloud point. ``p2m`` assigns
    every point to its nearest vertex and uses the mean of the assigned points
    as that vertex's target; vertices with no assigned point are left free.
    """
    config = config or RegistrationConfig()
    pts = cloud.points if isinstance(cloud, LabeledPointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("target cloud is empty")
    V = mesh.vertices if mesh_positions is None else np.asarray(mesh_positions, dtype=np.float64)
    direction = str(direction).lower()
    if direction == M2P:
        index = cloud_index or SpatialIndex(pts)
        d, idx = index.query(V)
        verts = np.arange(len(V))
        targets = pts[idx]
        keep = np.ones(len(V), dtype=bool) if config.max_distance is None else d <= config.max_distance
        verts, targets = verts[keep], targets[keep]
    elif direction == P2M:
        d, idx = SpatialIndex(V).query(pts)
        if config.max_distance is not None:
            keep = d <= config.max_distance
            idx, sel = idx[keep], pts[keep]
        else:
            sel = pts
        counts = np.bincount(idx, minlength=len(V))
        verts = np.flatnonzero(counts)
        sums = np.stack([np.bincount(idx, weights=sel[:, a], minlength=len(V)) for a in range(3)], axis=1)
        targets = sums[verts] / counts[verts, None]
    else:
        raise ValueError("unknown correspondence direction %r" % direction)
    w = np.full(len(verts), float(config.correspondence_weight))
    return CorrespondenceSet(verts, targets, w, direction)


def _fit_rotations(M: np.ndarray) -> np.ndarray:
    """Rotation maximizing ``tr(R M_i)`` per cell: ``R = V U^T`` with det correction."""
    U, s, Vt = np.linalg.svd(M)
    V = np.swapaxes(Vt, 1, 2)
    R = V @ np.swapaxes(U, 1, 2)
    flip = np.linalg.det(R) < 0
    if flip.any():
        # singular values come sorted, so the last column of U pairs with the smallest
        Uf = U[flip].copy()
        Uf[:, :, 2] *= -1
        R[flip] = V[flip] @ np.swapaxes(Uf, 1, 2)
    scale = np.maximum(s[:, 0], 1e-300)
    degenerate = (s[:, 0] <= 0) | (s[:, 1] <= 1e-12 * scale) | ~np.isfinite(s).all(axis=1)
    R[degenerate] = np.eye(3)
    return R


def local_step(rest: TriangleMesh, deformed, weights=None, cells: Optional[ArapSystem] = None,
               reg_scale: Optional[float] = None) -> np.ndarray:
    """Best-fit rotation per 1-ring.

    Without regularization this is the SVD of ``S_i``. With ``reg_scale``
    (alpha times area) the matrix decomposed is ``S_i + reg_scale C^_i S^_i``,
    which is the exact minimizer of both terms for fixed positions.
    """
    system = cells if cells is not None else ArapSystem(rest, weights=weights)
    deformed = np.asarray(deformed, dtype=np.float64)
    if deformed.shape != rest.vertices.shape:
        raise ValueError("deformed positions have shape %s, expected %s"
                         % (deformed.shape, rest.vertices.shape))
    S = system.covariances(deformed)
    if reg_scale is None:
        reg_scale = 0.0 if cells is None else system.reg_scale
    if reg_scale:
        S = S + reg_scale * (system.rest_cov @ system.normalized_covariances(deformed))
    return _fit_rotations(S)


def global_step(system: ArapSystem, rest: TriangleMesh, rotations: np.ndarray,
                corr: CorrespondenceSet, config: RegistrationConfig = None) -> np.ndarray:
    """Solve ``(L + a/2 K + C) p' = b + a/2 G^T g + C t`` for all three coordinates."""
    n = system.n
    c = np.zeros(n)
    t = np.zeros((n, 3))
    if len(corr):
        c[corr.vertices] = corr.weights
        t[corr.vertices] = corr.targets
    if not np.any(c > 0):
        raise RegistrationError("no correspondences: the system is singular")
    A, lu = system.factorization(c)
    b, k = system.rhs(rotations)
    rhs = b + 0.5 * system.reg_scale * k + c[:, None] * t
    x = lu.solve(rhs)
    r = A @ x - rhs
    scale = max(np.abs(rhs).max(), 1e-300)
    if np.abs(r).max() > 1e-10 * scale:
        x = x - lu.solve(r)
        r = A @ x - rhs
    if not np.all(np.isfinite(x)) or np.abs(r).max() > 1e-8 * scale:
        raise RegistrationError("global solve failed (relative residual %.3g)" % (np.abs(r).max() / scale))
    return x


def regularization_energy(covariances, total_area: float, alpha: float,
                          rest_covariances=None, rotations=None) -> float:
    """``alpha * A * sum_i |S_i - U_i V_i^T|_F^2``, evaluated as ``sum (sigma - 1)^2``.

    ``covariances`` may be (n, 3, 3) normalized covariances or (n, 3) singular
    values. When ``rest_covariances`` and ``rotations`` are given, the deviation
    is measured against ``C_i R_i^T`` instead, which vanishes at rest for any
    1-ring shape.
    """
    cov = np.asarray(covariances, dtype=np.float64)
    if rest_covariances is not None:
        if rotations is None:
            raise ValueError("rotations are required with rest_covariances")
        diff = cov - np.asarray(rest_covariances) @ np.swapaxes(np.asarray(rotations), 1, 2)
        return float(alpha * total_area * np.sum(diff ** 2))
    s = cov if cov.ndim == 2 else np.linalg.svd(cov, compute_uv=False)
    return float(alpha * total_area * np.sum((s - 1.0) ** 2))


def total_energy(rest: TriangleMesh, deformed, rotations, weights=None,
                 config: RegistrationConfig = None, system: Optional[ArapSystem] = None,
                 corr: Optional[CorrespondenceSet] = None) -> EnergyBreakdown:
    config = config or RegistrationConfig()
    system = system or ArapSystem(rest, config, weights)
    P = np.asarray(deformed, dtype=np.float64)
    R = np.asarray(rotations, dtype=np.float64)
    d = (P[system.src] - P[system.dst]) - np.einsum("hab,hb->ha", R[system.src], system.rest_edges)
    fitting = float(np.sum(system.w * np.sum(d * d, axis=1)))
    reg = regularization_energy(system.normalized_covariances(P), system.area,
                                config.regularization_alpha, system.rest_cov, R)
    w = config.per_cell_weight
    total = w * (fitting + reg)
    data = 0.0
    if corr is not None and len(corr):
        diff = P[corr.vertices] - corr.targets
        data = float(2.0 * w * np.sum(corr.weights * np.sum(diff * diff, axis=1)))
    return EnergyBreakdown(fitting, reg, total, data, total + data)


# ---------------------------------------------------------------- driver

def register(template: TriangleMesh, cloud, config: RegistrationConfig = None,
             callback=None) -> Tuple[TriangleMesh, List[IterationRecord]]:
    """Deform ``template`` toward ``cloud`` following the correspondence schedule.

    Each outer iteration recomputes correspondences from the current shape and
    runs ``inner_sweeps`` local/global sweeps. Returns the deformed mesh (same
    connectivity and labels) and one record per sweep. Edge distortion above
    ``distortion_limit`` is flagged in the log; non-finite positions raise
    :class:`RegistrationError` carrying the iteration index.
    """
    config = config or RegistrationConfig()
    pts = cloud.points if isinstance(cloud, LabeledPointCloud) else check_points(cloud, "cloud")
    if len(pts) == 0:
        raise ValueError("target cloud is empty")
    system = ArapSystem(template, config)
    index = SpatialIndex(pts)
    P = template.vertices.copy()
    log: List[IterationRecord] = []
    it = 0
    prev = None
    warned = False
    t0 = time.perf_counter()
    for phase, count in config.schedule:
        for _ in range(count):
            corr = compute_correspondences(template, pts, phase, config, mesh_positions=P,
                                           cloud_index=index if phase == M2P else None)
            if len(corr) == 0:
                raise RegistrationError("no correspondences within max_distance", it)
            for sweep in range(config.inner_sweeps):
                R = local_step(template, P, cells=system)
                P = global_step(system, template, R, corr, config)
                if not np.all(np.isfinite(P)):
                    raise RegistrationError("non-finite vertex positions", it)
                e = total_energy(template, P, R, config=config, system=system, corr=corr)
                dist = system.edge_distortion(P)
                rec = IterationRecord(it, phase, sweep, e.fitting, e.regularization, e.total,
                                      e.correspondence, e.objective, len(corr), dist,
                                      dist > config.distortion_limit)
                log.append(rec)
                if rec.unstable and not warned:
                    logger.warning("iteration %d: edge distortion %.3g exceeds %.3g",
                                   it, dist, config.distortion_limit)
                    warned = True
                if callback is not None:
                    callback(rec, P)
            logger.debug("iteration %d (%s): objective %.6g", it, phase, log[-1].objective)
            if config.early_exit_tol is not None and prev is not None and \
                    abs(prev - log[-1].objective) <= config.early_exit_tol * max(abs(prev), 1e-300):
                logger.info("early exit after iteration %d", it)
                return template.with_vertices(P), log
            prev = log[-1].objective
            it += 1
    logger.info("registration: %d iterations, %d factorizations, %.1f s",
                it, system.n_factorizations, time.perf_counter() - t0)
    return template.with_vertices(P), log


ENERGY_FIELDS = ("iteration", "phase", "sweep", "fitting", "regularization", "total",
                 "correspondence", "objective", "n_correspondences", "max_edge_distortion", "unstable")


def write_energy_csv(path, log: Sequence[IterationRecord]):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(ENERGY_FIELDS)
        for r in log:
            d = asdict(r)
            wr.writerow([repr(d[k]) if isinstance(d[k], float) else d[k] for k in ENERGY_FIELDS])


class ARAPRegistration(BaseEstimator):
    """Estimator wrapper around :func:`register`.

    ``fit(X)`` deforms ``template`` toward the (n, 3) points ``X``; the result
    is in ``mesh_`` and the per-sweep log in ``energy_log_``.
    """

    def __init__(self, template=None, per_cell_weight=1e-2, regularization_alpha=1e6,
                 schedule=DEFAULT_SCHEDULE, inner_sweeps=1, correspondence_weight=500.0,
                 max_distance=None, early_exit_tol=None):
        self.template = template
        self.per_cell_weight = per_cell_weight
        self.regularization_alpha = regularization_alpha
        self.schedule = schedule
        self.inner_sweeps = inner_sweeps
        self.correspondence_weight = correspondence_weight
        self.max_distance = max_distance
        self.early_exit_tol = early_exit_tol

    def _config(self):
        return RegistrationConfig(self.per_cell_weight, self.regularization_alpha, self.schedule,
                                  self.inner_sweeps, self.correspondence_weight, self.max_distance,
                                  self.early_exit_tol)

    def fit(self, X, y=None):
        if self.template is None:
            raise ValueError("template mesh is required")
        X = check_points(X, "cloud")
        self.mesh_, self.energy_log_ = register(self.template, X, self._config())
        self.n_iter_ = len(self.energy_log_)
        return self
