"""Segment-label algebra: 24-part regrouping, body-line relabelling, 2D->3D
projection, mesh label propagation and per-segment watertight cutting."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Tuple

import numpy as np

from .mesh import MeshError, TriangleMesh, face_labels, fill_holes, is_watertight, submesh, unique_edges
from .pointcloud import LabeledPointCloud, SpatialIndex
from .segments import (ARM_FAMILY, EXTREMITIES, FAMILY_SWAP, LEFT_LIMBS, LEG_FAMILY, MIRROR,
                       RIGHT_LIMBS, SegmentLabel)

BG = int(SegmentLabel.BACKGROUND)
MIN_CONFIDENCE = 0.75


class RawPart(enum.IntEnum):
    """The 24 part ids of the raw person-segmentation masks."""

    LEFT_FACE = 0
    RIGHT_FACE = 1
    LEFT_UPPER_ARM_FRONT = 2
    LEFT_UPPER_ARM_BACK = 3
    RIGHT_UPPER_ARM_FRONT = 4
    RIGHT_UPPER_ARM_BACK = 5
    LEFT_LOWER_ARM_FRONT = 6
    LEFT_LOWER_ARM_BACK = 7
    RIGHT_LOWER_ARM_FRONT = 8
    RIGHT_LOWER_ARM_BACK = 9
    LEFT_HAND = 10
    RIGHT_HAND = 11
    TORSO_FRONT = 12
    TORSO_BACK = 13
    LEFT_UPPER_LEG_FRONT = 14
    LEFT_UPPER_LEG_BACK = 15
    RIGHT_UPPER_LEG_FRONT = 16
    RIGHT_UPPER_LEG_BACK = 17
    LEFT_LOWER_LEG_FRONT = 18
    LEFT_LOWER_LEG_BACK = 19
    RIGHT_LOWER_LEG_FRONT = 20
    RIGHT_LOWER_LEG_BACK = 21
    LEFT_FOOT = 22
    RIGHT_FOOT = 23


def _default_mapping() -> Dict[int, int]:
    S = SegmentLabel
    stem = {
        "FACE": None, "UPPER_ARM": "ARM", "LOWER_ARM": "FOREARM", "HAND": "HAND",
        "UPPER_LEG": "THIGH", "LOWER_LEG": "SHIN", "FOOT": "FOOT",
    }
    out = {}
    for p in RawPart:
        name = p.name
        if name.startswith("TORSO"):
            out[int(p)] = int(S.TORSO)
            continue
        side, rest = name.split("_", 1)
        rest = rest.replace("_FRONT", "").replace("_BACK", "")
        seg = stem[rest]
        out[int(p)] = int(S.HEAD) if seg is None else int(S[side + "_" + seg])
    return out


RAW_TO_SEGMENT: Dict[int, int] = _default_mapping()


def regroup_24_to_14(raw, mapping: Mapping[int, int] = None) -> np.ndarray:
    """Map a raw 24-part grid to body segments; background (255) passes through."""
    mapping = RAW_TO_SEGMENT if mapping is None else mapping
    raw = np.asarray(raw)
    lut = np.full(256, -1, dtype=np.int64)
    for k, v in mapping.items():
        lut[int(k)] = int(v)
    lut[BG] = BG
    if raw.size and (raw.min() < 0 or raw.max() > 255):
        raise ValueError("raw labels must be bytes")
    out = lut[raw.astype(np.int64)]
    if (out < 0).any():
        bad = np.unique(raw[out < 0])
        raise ValueError("raw label value(s) %s have no mapping" % bad.tolist())
    return out.astype(np.uint8)


def _front_back_table() -> Dict[int, Tuple[int, int]]:
    out = {}
    for p in RawPart:
        seg = RAW_TO_SEGMENT[int(p)]
        f, b = out.get(seg, (int(p), int(p)))
        if p.name.endswith("_BACK"):
            b = int(p)
        elif p.name.endswith("_FRONT"):
            f = int(p)
        out[seg] = (f, b)
    return out


SEGMENT_TO_RAW = _front_back_table()


def segment_to_raw(labels, front_facing, subject_left=None) -> np.ndarray:
    """Split segment labels back into raw parts for synthetic masks.

    ``front_facing`` picks the front or back variant of limb and torso parts;
    ``subject_left`` (default all True) picks the left or right face for head
    pixels.
    """
    labels = np.asarray(labels, dtype=np.int64)
    front_facing = np.broadcast_to(np.asarray(front_facing, dtype=bool), labels.shape)
    out = np.full(labels.shape, BG, dtype=np.int64)
    for seg, (f, b) in SEGMENT_TO_RAW.items():
        sel = labels == seg
        out[sel & front_facing] = f
        out[sel & ~front_facing] = b
    if subject_left is not None:
        left = np.broadcast_to(np.asarray(subject_left, dtype=bool), labels.shape)
        head = labels == int(SegmentLabel.HEAD)
        out[head & left] = int(RawPart.LEFT_FACE)
        out[head & ~left] = int(RawPart.RIGHT_FACE)
    return out.astype(np.uint8)


# ---------------------------------------------------------------- landmarks

REQUIRED_LANDMARKS = ("left_shoulder", "right_shoulder", "left_hip", "right_hip",
                      "left_elbow", "right_elbow", "left_wrist", "right_wrist",
                      "left_knee", "right_knee", "left_ankle", "right_ankle")


class LandmarkError(ValueError):
    pass


@dataclass(frozen=True)
class Landmark:
    x: float
    y: float
    confidence: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must be in [0, 1], got %r" % self.confidence)


class LandmarkSet(dict):
    """Named 2D image keypoints ``name -> Landmark`` (pixel coordinates)."""

    @classmethod
    def from_mapping(cls, data: Mapping) -> "LandmarkSet":
        out = cls()
        for k, v in data.items():
            out[k] = v if isinstance(v, Landmark) else Landmark(*[float(x) for x in v])
        return out

    def to_mapping(self) -> dict:
        return {k: (v.x, v.y, v.confidence) for k, v in self.items()}

    def require(self, names: Iterable[str] = REQUIRED_LANDMARKS, min_confidence: float = MIN_CONFIDENCE):
        for n in names:
            if n not in self:
                raise LandmarkError("landmark %r is missing" % n)
            if self[n].confidence < min_confidence:
                raise LandmarkError("landmark %r has confidence %.2f < %.2f"
                                    % (n, self[n].confidence, min_confidence))

    def point(self, name) -> np.ndarray:
        lm = self[name]
        return np.array([lm.x, lm.y])


def body_lines(lm: LandmarkSet):
    """``(mid_hip, medial_direction)`` in image coordinates.

    The medial line runs from the mid-hip to the mid-shoulder point; the
    transverse line is its perpendicular through the mid-hip point.
    """
    hip = 0.5 * (lm.point("left_hip") + lm.point("right_hip"))
    sh = 0.5 * (lm.point("left_shoulder") + lm.point("right_shoulder"))
    d = sh - hip
    n = np.linalg.norm(d)
    if n == 0:
        raise LandmarkError("shoulder and hip midpoints coincide")
    return hip, d / n


def relabel_by_body_lines(mask, lm: LandmarkSet, view: str = "front") -> np.ndarray:
    """Fix left/right and arm/leg confusions of limb pixels.

    A limb pixel takes the side given by the medial line (front view: the
    subject's left is on image-right; back view: the reverse) and the family
    given by the transverse line (arm above, leg below). Head and torso pixels
    are never changed. Pixels exactly on a line keep their label.
    """
    if view not in ("front", "back"):
        raise ValueError("view must be 'front' or 'back'")
    lm = lm if isinstance(lm, LandmarkSet) else LandmarkSet.from_mapping(lm)
    lm.require()
    mask = np.asarray(mask, dtype=np.uint8)
    out = mask.copy()
    limbs = np.array([int(s) for s in LEFT_LIMBS | RIGHT_LIMBS])
    v, u = np.nonzero(np.isin(mask, limbs))
    if len(v) == 0:
        return out
    hip, d = body_lines(lm)
    ru, rv = u - hip[0], v - hip[1]
    side = d[0] * rv - d[1] * ru        # > 0: image-right of the medial line
    along = ru * d[0] + rv * d[1]       # > 0: above the transverse line
    image_right_is_left = view == "front"
    lut_left = np.arange(256, dtype=np.uint8)
    lut_right = np.arange(256, dtype=np.uint8)
    for s in LEFT_LIMBS:
        lut_right[int(s)] = int(MIRROR[s])
    for s in RIGHT_LIMBS:
        lut_left[int(s)] = int(MIRROR[s])
    lab = mask[v, u]
    want_left = (side > 0) if image_right_is_left else (side < 0)
    new = np.where(side == 0, lab, np.where(want_left, lut_left[lab], lut_right[lab]))
    lut_arm = np.arange(256, dtype=np.uint8)
    lut_leg = np.arange(256, dtype=np.uint8)
    for s in LEG_FAMILY:
        lut_arm[int(s)] = int(FAMILY_SWAP[s])
    for s in ARM_FAMILY:
        lut_leg[int(s)] = int(FAMILY_SWAP[s])
    new = np.where(along == 0, new, np.where(along > 0, lut_arm[new], lut_leg[new]))
    out[v, u] = new
    return out


def project_labels_to_cloud(mask, depth, cam) -> LabeledPointCloud:
    """Deproject nonzero-depth, non-background pixels carrying their label."""
    from .scan import deproject
    mask = np.asarray(mask)
    depth = np.asarray(depth)
    if mask.shape != depth.shape:
        raise ValueError("mask shape %s does not match depth shape %s" % (mask.shape, depth.shape))
    return deproject(depth, cam, mask)


def propagate_labels_to_mesh(mesh: TriangleMesh, cloud: LabeledPointCloud) -> TriangleMesh:
    """Give each vertex the label of its nearest cloud point."""
    if cloud.labels is None:
        raise ValueError("cloud has no labels")
    if len(cloud) == 0:
        raise ValueError("cloud is empty")
    _, idx = SpatialIndex(cloud.points).query(mesh.vertices)
    return mesh.with_labels(cloud.labels[idx])


class EmptySegmentError(MeshError):
    pass


def extract_segment(mesh: TriangleMesh, label) -> TriangleMesh:
    """Faces whose majority label is ``label``, with cut boundaries fan-filled."""
    fl = face_labels(mesh)
    sel = fl == int(label)
    if not sel.any():
        raise EmptySegmentError("segment %s has no faces" % _name(label))
    if sel.all():
        return mesh
    return fill_holes(submesh(mesh, sel))


def strip_extremities(mesh: TriangleMesh, extremities=EXTREMITIES) -> TriangleMesh:
    """Remove head, hand and foot faces and close the cuts."""
    fl = face_labels(mesh)
    keep = ~np.isin(fl, [int(s) for s in extremities])
    if not keep.any():
        raise EmptySegmentError("mesh has only extremity faces")
    out = fill_holes(submesh(mesh, keep))
    if not is_watertight(out):
        raise MeshError("stripped mesh is not watertight")
    return out


def _name(label) -> str:
    try:
        return SegmentLabel(int(label)).name
    except ValueError:
        return str(label)


_JOINT_BOUNDARIES = {
    "shoulder": ("ARM", "TORSO"), "elbow": ("ARM", "FOREARM"), "wrist": ("FOREARM", "HAND"),
    "hip": ("THIGH", "TORSO"), "knee": ("THIGH", "SHIN"), "ankle": ("SHIN", "FOOT"),
}


def landmarks_from_labels(mesh: TriangleMesh) -> Dict[str, np.ndarray]:
    """3D joints of a labelled body mesh, each the mean midpoint of the edges
    joining the two segments that meet there (e.g. elbow = arm/forearm)."""
    if mesh.labels is None:
        raise ValueError("mesh has no labels")
    e = unique_edges(mesh.faces)
    la, lb = mesh.labels[e[:, 0]], mesh.labels[e[:, 1]]
    mid = 0.5 * (mesh.vertices[e[:, 0]] + mesh.vertices[e[:, 1]])
    out = {}
    for side in ("left", "right"):
        for joint, (a, b) in _JOINT_BOUNDARIES.items():
            sa = SegmentLabel[side.upper() + "_" + a]
            sb = SegmentLabel.TORSO if b == "TORSO" else SegmentLabel[side.upper() + "_" + b]
            sel = ((la == sa) & (lb == sb)) | ((la == sb) & (lb == sa))
            if not sel.any():
                raise LandmarkError("segments %s and %s do not touch" % (sa.name, sb.name))
            out[side + "_" + joint] = mid[sel].mean(axis=0)
    return out
