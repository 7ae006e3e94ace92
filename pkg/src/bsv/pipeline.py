"""End-to-end stages shared by the CLI and the acceptance tests."""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass
from importlib import resources
from typing import Dict, List, Optional, Sequence

import numpy as np

from .align import center_to_origin, scale_template, AlignmentParams
from .arap import IterationRecord, RegistrationConfig, register
from .humanoid import (SUBJECT_PARAMS, HumanoidParams, generate_humanoid, landmarks_3d,
                       project_landmarks)
from .io import load_mesh
from .labels import (LandmarkSet, RawPart, extract_segment, project_labels_to_cloud,
                     propagate_labels_to_mesh, regroup_24_to_14, relabel_by_body_lines,
                     segment_to_raw, strip_extremities)
from .mesh import TriangleMesh, box, face_labels, face_normals, signed_volume
from .metrics import WHOLE_BODY, SegmentEntry, VolumeReport, segment_name
from .pointcloud import (LabeledPointCloud, RigidTransform, drop_extremities, merge,
                         statistical_outlier_removal)
from .scan import (DEFAULT_CAMERA_HEIGHT, DEFAULT_SEPARATION, ErrorCondition, NoiseModel,
                   VirtualCamera, deproject, two_view_capture)
from .segments import EVALUATED_SEGMENTS

logger = logging.getLogger(__name__)

BOX_TEMPLATE_DIVISIONS = 16
TEMPLATE_RESOLUTION = 0.015
SUBJECT_RESOLUTION = 0.01


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, error: BaseException):
        super().__init__("%s: %s" % (stage, error))
        self.stage = stage
        self.error = error


def run_seed(seed: int, *keys) -> int:
    """Per-run seed: base seed plus a stable hash of the run keys."""
    h = zlib.crc32("/".join(str(k) for k in keys).encode("utf-8"))
    return (int(seed) + h) % (2 ** 32)


# ---------------------------------------------------------------- simulate

@dataclass
class ViewData:
    depth: np.ndarray
    transform: RigidTransform
    camera: VirtualCamera
    raw_mask: Optional[np.ndarray] = None
    landmarks: Optional[dict] = None


@dataclass
class ScanData:
    front: ViewData
    back: ViewData
    condition: ErrorCondition
    seed: int
    true_front: Optional[RigidTransform] = None
    true_back: Optional[RigidTransform] = None

    def views(self):
        return (("front", self.front), ("back", self.back))


def _raw_masks(mesh: TriangleMesh, fid: np.ndarray) -> np.ndarray:
    fl = face_labels(mesh)
    anterior = face_normals(mesh)[:, 1] < 0
    left = mesh.vertices[mesh.faces].mean(axis=1)[:, 0] > 0
    hit = fid >= 0
    f = np.maximum(fid, 0)
    raw = segment_to_raw(fl[f], anterior[f], left[f])
    return np.where(hit, raw, 255).astype(np.uint8)


def inject_label_errors(raw: np.ndarray) -> np.ndarray:
    """Swap the two hands, the detector confusion the body-line relabelling fixes."""
    out = raw.copy()
    lh, rh = raw == RawPart.LEFT_HAND, raw == RawPart.RIGHT_HAND
    out[lh], out[rh] = RawPart.RIGHT_HAND, RawPart.LEFT_HAND
    return out


def simulate_scan(mesh: TriangleMesh, condition=ErrorCondition.NOER, seed: int = 0,
                  separation: float = DEFAULT_SEPARATION, camera_height: float = DEFAULT_CAMERA_HEIGHT,
                  noise: Optional[NoiseModel] = None, landmarks3d: Optional[Dict] = None,
                  label_errors: bool = False) -> ScanData:
    """Render both views; with a labelled mesh also synthesize raw part masks."""
    condition = ErrorCondition.parse(condition)
    cap = two_view_capture(mesh, separation, condition, noise, seed, camera_height=camera_height)
    views = {}
    for name, depth, fid, cam, t in (("front", cap.depth_front, cap.faces_front, cap.cam_front, cap.t_front),
                                     ("back", cap.depth_back, cap.faces_back, cap.cam_back, cap.t_back)):
        raw = lm = None
        if mesh.labels is not None:
            raw = _raw_masks(mesh, fid)
            if label_errors and name == "front":
                raw = inject_label_errors(raw)
        if landmarks3d is not None:
            lm = project_landmarks(landmarks3d, cam)
        views[name] = ViewData(np.asarray(depth, dtype=np.float64), t, cam.with_pose(RigidTransform.identity()), raw, lm)
    return ScanData(views["front"], views["back"], condition, int(seed), cap.true_front, cap.true_back)


# ---------------------------------------------------------------- clouds

def view_cloud(view: ViewData, name: str) -> LabeledPointCloud:
    """Camera-frame cloud of one view, labelled when a raw mask is present."""
    depth = np.asarray(view.depth, dtype=np.float64)
    if view.raw_mask is None:
        return deproject(depth, view.camera)
    mask = regroup_24_to_14(view.raw_mask)
    if view.landmarks is not None:
        mask = relabel_by_body_lines(mask, LandmarkSet.from_mapping(view.landmarks), name)
    return project_labels_to_cloud(mask, depth, view.camera)


def prepare_target(front: LabeledPointCloud, back: LabeledPointCloud,
                   t_front: RigidTransform, t_back: RigidTransform,
                   sor_neighbors: int = 600, sor_ratio: float = 0.05,
                   clean: bool = True) -> LabeledPointCloud:
    """Clean each view, merge into the shared frame, drop head/hands/feet."""
    if clean:
        front = statistical_outlier_removal(front, sor_neighbors, sor_ratio)
        back = statistical_outlier_removal(back, sor_neighbors, sor_ratio)
    merged = merge(front, back, t_front, t_back)
    if merged.labels is not None:
        merged = drop_extremities(merged)
    if len(merged) == 0:
        raise ValueError("no target points left after cleaning")
    return merged


# ---------------------------------------------------------------- fit

@dataclass
class FitResult:
    mesh: TriangleMesh
    log: List[IterationRecord]
    alignment: AlignmentParams
    shift: np.ndarray
    aligned_template: TriangleMesh


def fit_template(template: TriangleMesh, target: LabeledPointCloud,
                 config: Optional[RegistrationConfig] = None) -> FitResult:
    """Center, scale and register; the fitted mesh is returned in the target's frame."""
    centered, shift = center_to_origin(target)
    tmpl, _ = center_to_origin(template)
    tmpl, params = scale_template(tmpl, centered)
    fitted, log = register(tmpl, centered, config)
    fitted = fitted.with_vertices(fitted.vertices - shift)
    if target.labels is not None:
        fitted = propagate_labels_to_mesh(fitted, target)
    return FitResult(fitted, log, params, shift, tmpl.with_vertices(tmpl.vertices - shift))


def estimate_volumes(mesh: TriangleMesh, segments: Sequence = EVALUATED_SEGMENTS) -> Dict[str, object]:
    """Whole-body and per-segment volumes; failures are reported as exceptions."""
    out: Dict[str, object] = {WHOLE_BODY: signed_volume(mesh)}
    if mesh.labels is None:
        return out
    for s in segments:
        try:
            out[segment_name(s)] = signed_volume(extract_segment(mesh, s))
        except Exception as exc:  # per-segment failure entry, the run continues
            out[segment_name(s)] = exc
    return out


def ground_truth_volumes(subject: TriangleMesh, segments: Sequence = EVALUATED_SEGMENTS) -> Dict[str, float]:
    """Reference volumes: the body without head/hands/feet and each segment."""
    if subject.labels is None:
        return {WHOLE_BODY: signed_volume(subject)}
    out = {WHOLE_BODY: signed_volume(strip_extremities(subject))}
    for s in segments:
        out[segment_name(s)] = signed_volume(extract_segment(subject, s))
    return out


def build_report(estimates: Dict[str, object], gt: Optional[Dict[str, float]], condition,
                 subject: str = "", seed=None, mass=None) -> VolumeReport:
    entries = []
    for name, v in estimates.items():
        g = None if gt is None else gt.get(name)
        if isinstance(v, Exception):
            entries.append(SegmentEntry(name, None, g, None, "%s: %s" % (type(v).__name__, v)))
        else:
            entries.append(SegmentEntry(name, float(v), g))
    return VolumeReport(ErrorCondition.parse(condition), entries[0], entries[1:], subject, seed, mass)


# ---------------------------------------------------------------- assets

def box_template(divisions: int = BOX_TEMPLATE_DIVISIONS) -> TriangleMesh:
    return box((1.0, 1.0, 1.0), divisions)


def box_subject(extents, yaw_deg: float = 45.0, divisions: int = 8) -> TriangleMesh:
    """Box standing on the floor at the origin; ``extents`` = (width, depth, height)."""
    from scipy.spatial.transform import Rotation
    ex = np.asarray(extents, dtype=np.float64)
    R = Rotation.from_euler("z", yaw_deg, degrees=True).as_matrix()
    return box(ex, divisions).transformed(R, [0.0, 0.0, ex[2] / 2])


def _bundled(name: str) -> Optional[TriangleMesh]:
    p = resources.files("bsv") / "data" / name
    if not p.is_file():
        return None
    with resources.as_file(p) as path:
        return load_mesh(path)


def humanoid_template(resolution: float = TEMPLATE_RESOLUTION) -> TriangleMesh:
    """Mean humanoid with head, hands and feet removed and the cuts closed."""
    if resolution == TEMPLATE_RESOLUTION:
        mesh = _bundled("template_humanoid.ply")
        if mesh is not None:
            return mesh
    return strip_extremities(generate_humanoid(HumanoidParams(), resolution))


def humanoid_subject(index: int, seed: int = 0, resolution: float = 0.01):
    """Subject ``index`` drawn from ``seed``: (mesh, params, 3D landmarks)."""
    rng = np.random.default_rng(run_seed(seed, "subject", index))
    params = HumanoidParams.sample(rng)
    return generate_humanoid(params, resolution), params, landmarks_3d(params)


def bundled_subject():
    """The shipped humanoid subject: (mesh, params, 3D landmarks)."""
    mesh = _bundled("subject_humanoid.ply")
    if mesh is None:
        mesh = generate_humanoid(SUBJECT_PARAMS, SUBJECT_RESOLUTION)
    return mesh, SUBJECT_PARAMS, landmarks_3d(SUBJECT_PARAMS)


# ---------------------------------------------------------------- one run

@dataclass
class RunResult:
    report: VolumeReport
    fit: FitResult
    target: LabeledPointCloud
    scan: ScanData


def run_subject(subject: TriangleMesh, template: TriangleMesh, condition=ErrorCondition.NOER,
                seed: int = 0, config: Optional[RegistrationConfig] = None,
                landmarks3d=None, label_errors: bool = True, clean: bool = False,
                sor_neighbors: int = 600, sor_ratio: float = 0.05, name: str = "",
                separation: float = DEFAULT_SEPARATION, noise: Optional[NoiseModel] = None) -> RunResult:
    """Simulate, fit and measure one subject under one condition.

    Simulated captures carry no stray points, so outlier removal is off by
    default here; with ``clean=True`` it runs on each view before merging.
    """
    def stage(label, fn, *a, **k):
        try:
            return fn(*a, **k)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(label, exc) from exc

    scan = stage("simulate", simulate_scan, subject, condition, seed, separation=separation,
                 noise=noise, landmarks3d=landmarks3d, label_errors=label_errors)
    front = stage("label", view_cloud, scan.front, "front")
    back = stage("label", view_cloud, scan.back, "back")
    target = stage("clean", prepare_target, front, back, scan.front.transform, scan.back.transform,
                   sor_neighbors, sor_ratio, clean)
    fit = stage("register", fit_template, template, target, config)
    est = stage("volumes", estimate_volumes, fit.mesh)
    gt = stage("ground-truth", ground_truth_volumes, subject)
    return RunResult(build_report(est, gt, condition, name, seed), fit, target, scan)
