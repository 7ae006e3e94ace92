"""Procedural A-pose humanoid: smooth union of capsules and ellipsoids.

Standing on the floor (z = 0) at the origin, facing -y, subject-left on +x.
Meshed with marching cubes; each vertex is labelled by the primitive that
dominates the implicit function there.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp
from skimage.measure import marching_cubes

from .mesh import TriangleMesh, is_watertight
from .segments import SegmentLabel as S

SMOOTH_K = 0.015


@dataclass(frozen=True)
class HumanoidParams:
    """Shape knobs; 1.0 everywhere gives the mean body used as template."""

    height: float = 1.0
    torso_girth: float = 1.0
    arm_girth: float = 1.0
    leg_girth: float = 1.0
    shoulder_width: float = 1.0
    arm_angle_deg: float = 40.0

    @classmethod
    def sample(cls, rng: np.random.Generator, spread: float = 0.08) -> "HumanoidParams":
        u = lambda: float(1.0 + rng.uniform(-spread, spread))
        return cls(height=float(1.0 + rng.uniform(-0.04, 0.04)), torso_girth=u(), arm_girth=u(),
                   leg_girth=u(), shoulder_width=float(1.0 + rng.uniform(-0.04, 0.04)),
                   arm_angle_deg=float(40.0 + rng.uniform(-4, 4)))


@dataclass(frozen=True)
class Capsule:
    a: Tuple[float, float, float]
    b: Tuple[float, float, float]
    ra: float
    rb: float
    label: int

    def distance(self, p):
        a, b = np.asarray(self.a), np.asarray(self.b)
        ab = b - a
        t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
        r = self.ra + t * (self.rb - self.ra)
        return np.linalg.norm(p - (a + t[:, None] * ab), axis=1) - r


@dataclass(frozen=True)
class Ellipsoid:
    center: Tuple[float, float, float]
    radii: Tuple[float, float, float]
    label: int

    def distance(self, p):
        r = np.asarray(self.radii)
        q = (p - np.asarray(self.center)) / r
        return (np.linalg.norm(q, axis=1) - 1.0) * r.min()


# The shipped test subject: broader torso and arms, slimmer legs than the template.
SUBJECT_PARAMS = HumanoidParams(height=1.006, torso_girth=1.07, arm_girth=1.05, leg_girth=0.98,
                                shoulder_width=1.0, arm_angle_deg=39.9)


def joints(params: HumanoidParams = HumanoidParams()) -> Dict[str, np.ndarray]:
    """3D joint positions for the given shape (meters)."""
    h = params.height
    sw = params.shoulder_width
    ang = np.deg2rad(params.arm_angle_deg)
    J = {}
    for side, sx in (("left", 1.0), ("right", -1.0)):
        sh = np.array([sx * 0.19 * sw, 0.0, 1.45 * h])
        el = sh + 0.29 * h * np.array([sx * np.cos(ang), 0.0, -np.sin(ang)])
        wr = el + 0.26 * h * np.array([sx * np.cos(ang), 0.0, -np.sin(ang)])
        hand = wr + 0.07 * h * np.array([sx * np.cos(ang), 0.0, -np.sin(ang)])
        J[side + "_shoulder"] = sh
        J[side + "_elbow"] = el
        J[side + "_wrist"] = wr
        J[side + "_hand"] = hand
        J[side + "_hip"] = np.array([sx * 0.09, 0.0, 0.95 * h])
        J[side + "_knee"] = np.array([sx * 0.115, 0.0, 0.52 * h])
        J[side + "_ankle"] = np.array([sx * 0.13, 0.0, 0.09 * h])
        J[side + "_toe"] = np.array([sx * 0.14, -0.14, 0.03 * h])
    J["neck"] = np.array([0.0, 0.0, 1.52 * h])
    J["nose"] = np.array([0.0, -0.1, 1.68 * h])
    J["head"] = np.array([0.0, 0.0, 1.68 * h])
    return J


def primitives(params: HumanoidParams = HumanoidParams()) -> List:
    h = params.height
    tg, ag, lg = params.torso_girth, params.arm_girth, params.leg_girth
    J = joints(params)
    out = [
        Ellipsoid((0.0, 0.0, 1.22 * h), (0.17 * tg, 0.11 * tg, 0.32 * h), S.TORSO),
        Ellipsoid((0.0, 0.0, 0.99 * h), (0.155 * tg, 0.10 * tg, 0.11 * h), S.TORSO),
        Capsule(tuple(J["left_shoulder"] * [0.6, 1, 1]), tuple(J["right_shoulder"] * [0.6, 1, 1]),
                0.06 * tg, 0.06 * tg, S.TORSO),
        Capsule((0.0, 0.0, 1.48 * h), (0.0, 0.0, 1.62 * h), 0.05, 0.05, S.HEAD),
        Ellipsoid(tuple(J["head"]), (0.085, 0.1, 0.115), S.HEAD),
    ]
    for side in ("left", "right"):
        up = side.upper() + "_"
        sx = 1.0 if side == "left" else -1.0
        out += [
            Capsule(tuple(J[side + "_shoulder"]), tuple(J[side + "_elbow"]), 0.048 * ag, 0.038 * ag, S[up + "ARM"]),
            Capsule(tuple(J[side + "_elbow"]), tuple(J[side + "_wrist"]), 0.038 * ag, 0.028 * ag, S[up + "FOREARM"]),
            Ellipsoid(tuple(J[side + "_hand"]), (0.045, 0.02, 0.045), S[up + "HAND"]),
            Capsule(tuple(J[side + "_hip"]), tuple(J[side + "_knee"]), 0.08 * lg, 0.052 * lg, S[up + "THIGH"]),
            Capsule(tuple(J[side + "_knee"]), tuple(J[side + "_ankle"]), 0.052 * lg, 0.036 * lg, S[up + "SHIN"]),
            Ellipsoid((sx * 0.135, -0.045, 0.04 * h), (0.045, 0.11, 0.04 * h), S[up + "FOOT"]),
        ]
    return out


def _field(points, prims, k=SMOOTH_K):
    d = np.stack([p.distance(points) for p in prims], axis=1)
    return -k * logsumexp(-d / k, axis=1), d


def generate_humanoid(params: Optional[HumanoidParams] = None, resolution: float = 0.01) -> TriangleMesh:
    """Watertight labelled humanoid mesh."""
    params = params or HumanoidParams()
    prims = primitives(params)
    J = joints(params)
    lo = np.array([-0.85, -0.3, -0.05])
    hi = np.array([0.85, 0.3, 1.95 * params.height])
    n = np.ceil((hi - lo) / resolution).astype(int) + 1
    axes = [lo[i] + resolution * np.arange(n[i]) for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    f = np.empty(len(grid))
    step = 400_000
    for s in range(0, len(grid), step):
        f[s:s + step] = _field(grid[s:s + step], prims)[0]
    vol = f.reshape(n)
    if (vol[[0, -1], :, :] <= 0).any() or (vol[:, [0, -1], :] <= 0).any() or (vol[:, :, [0, -1]] <= 0).any():
        raise ValueError("humanoid does not fit in its sampling box")
    verts, faces, _, _ = marching_cubes(vol, level=0.0, spacing=(resolution,) * 3,
                                        allow_degenerate=False, method="lewiner")
    verts = verts + lo
    _, d = _field(verts, prims)
    labels = np.array([int(prims[i].label) for i in np.argmin(d, axis=1)], dtype=np.uint8)
    # thigh above the hip joints belongs to the torso
    hip_z = J["left_hip"][2]
    thigh = np.isin(labels, [int(S.LEFT_THIGH), int(S.RIGHT_THIGH)])
    labels[thigh & (verts[:, 2] > hip_z)] = int(S.TORSO)
    mesh = TriangleMesh(verts, faces.astype(np.int64), labels).oriented_outward()
    if not is_watertight(mesh):
        raise ValueError("marching cubes produced an open surface")
    return mesh


def landmarks_3d(params: Optional[HumanoidParams] = None) -> Dict[str, np.ndarray]:
    J = joints(params or HumanoidParams())
    keep = ("shoulder", "elbow", "wrist", "hip", "knee", "ankle")
    out = {k: v for k, v in J.items() if k.split("_", 1)[-1] in keep}
    out["nose"] = J["nose"]
    return out


def project_landmarks(points3d: Dict[str, np.ndarray], cam, confidence: float = 1.0) -> dict:
    """Image coordinates (u, v, confidence) of 3D landmarks seen by ``cam``."""
    names = sorted(points3d)
    P = np.stack([points3d[k] for k in names])
    uv = cam.project(cam.to_camera(P))
    return {k: (float(u), float(v), float(confidence)) for k, (u, v) in zip(names, uv)}
