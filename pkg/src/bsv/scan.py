"""Two-camera depth acquisition simulator.

World frame: z up, the subject stands on the floor at the origin facing -y.
The front camera sits on -y looking +y, the back camera on +y looking -y.
Camera frame: x right, y down, z along the optical axis.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .mesh import TriangleMesh, face_labels, is_watertight
from .pointcloud import LabeledPointCloud, RigidTransform
from .segments import SegmentLabel

# Calibration offsets measured on the real rig, per camera:
# translation in cm and rotation in degrees, ordered (vertical, transversal, longitudinal).
CALIBRATION_MEANS = {
    "front": {"translation_cm": (0.22, 0.53, -7.01), "rotation_deg": (0.88, 0.68, 0.47)},
    "back": {"translation_cm": (-0.17, -0.13, -5.84), "rotation_deg": (0.24, 0.46, 1.05)},
}
CALIBRATION_STDS = {
    "front": {"translation_cm": (0.11, 0.03, 0.06), "rotation_deg": (0.03, 0.01, 0.21)},
    "back": {"translation_cm": (0.15, 0.02, 0.34), "rotation_deg": (0.28, 0.11, 0.10)},
}

DEFAULT_SEPARATION = 4.006
DEFAULT_CAMERA_HEIGHT = 1.0


class CaptureError(ValueError):
    pass


class ErrorCondition(enum.Enum):
    NOER = "noer"
    CALI = "cali"
    L515 = "l515"
    L5CA = "l5ca"

    @property
    def depth_noise(self) -> bool:
        return self in (ErrorCondition.L515, ErrorCondition.L5CA)

    @property
    def calibration(self) -> bool:
        return self in (ErrorCondition.CALI, ErrorCondition.L5CA)

    @property
    def display(self) -> str:
        return {"noer": "NoEr", "cali": "Cali", "l515": "L515", "l5ca": "L5Ca"}[self.value]

    @classmethod
    def parse(cls, value) -> "ErrorCondition":
        if isinstance(value, cls):
            return value
        return cls(str(value).strip().lower())


@dataclass
class NoiseModel:
    """Depth noise and calibration offsets.

    ``depth_sigma_at_1m`` grows linearly with depth. Calibration offsets are
    deterministic (the table means); ``calibration_jitter`` scales optional
    Gaussian jitter with the table standard deviations and defaults to 0.
    """

    depth_sigma_at_1m: float = 0.005
    calibration: dict = field(default_factory=lambda: {k: dict(v) for k, v in CALIBRATION_MEANS.items()})
    calibration_jitter: float = 0.0

    def __post_init__(self):
        if self.depth_sigma_at_1m < 0:
            raise ValueError("depth_sigma_at_1m must be >= 0")

    def offset(self, camera: str, rng: Optional[np.random.Generator] = None) -> RigidTransform:
        """Error transform expressed in the camera frame."""
        c = self.calibration[camera]
        t = np.array(c["translation_cm"], dtype=np.float64) / 100.0
        r = np.array(c["rotation_deg"], dtype=np.float64)
        if self.calibration_jitter and rng is not None:
            s = CALIBRATION_STDS[camera]
            t = t + self.calibration_jitter * rng.normal(size=3) * np.array(s["translation_cm"]) / 100.0
            r = r + self.calibration_jitter * rng.normal(size=3) * np.array(s["rotation_deg"])
        # (vertical, transversal, longitudinal) -> camera (x right, y down, z forward)
        order = [1, 0, 2]
        return RigidTransform.from_euler(r[order], t[order], seq="xyz")


@dataclass(frozen=True)
class VirtualCamera:
    fx: float = 735.0
    fy: float = 735.0
    cx: float = 384.0
    cy: float = 512.0
    width: int = 768
    height: int = 1024
    pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def with_pose(self, pose: RigidTransform) -> "VirtualCamera":
        return VirtualCamera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose)

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    def to_camera(self, points) -> np.ndarray:
        return self.pose.inverse().apply(points)

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        z = points_cam[:, 2]
        return np.stack([self.fx * points_cam[:, 0] / z + self.cx,
                         self.fy * points_cam[:, 1] / z + self.cy], axis=1)


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera-to-world pose with the optical axis through ``target`` and image-down along -up."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(-up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform(np.stack([x, y, z], axis=1), eye)


def winding_number(mesh: TriangleMesh, point) -> float:
    """Generalized winding number of ``point`` (about 1 inside, 0 outside)."""
    a, b, c = (mesh.vertices[mesh.faces[:, k]] - np.asarray(point) for k in range(3))
    la, lb, lc = (np.linalg.norm(x, axis=1) for x in (a, b, c))
    num = np.einsum("ij,ij->i", a, np.cross(b, c))
    den = (la * lb * lc + np.einsum("ij,ij->i", a, b) * lc
           + np.einsum("ij,ij->i", b, c) * la + np.einsum("ij,ij->i", c, a) * lb)
    return float(2.0 * np.arctan2(num, den).sum() / (4.0 * np.pi))


def _rasterize(tri_uv, tri_cam, width, height, max_candidates=3_000_000):
    """Yield ``(pixel_index, depth, face_index)`` for every covered pixel center."""
    umin = np.ceil(tri_uv[:, :, 0].min(axis=1)).astype(np.int64).clip(0, width)
    umax = np.floor(tri_uv[:, :, 0].max(axis=1)).astype(np.int64).clip(-1, width - 1)
    vmin = np.ceil(tri_uv[:, :, 1].min(axis=1)).astype(np.int64).clip(0, height)
    vmax = np.floor(tri_uv[:, :, 1].max(axis=1)).astype(np.int64).clip(-1, height - 1)
    nu = np.maximum(umax - umin + 1, 0)
    nv = np.maximum(vmax - vmin + 1, 0)
    counts = nu * nv
    faces = np.flatnonzero(counts)
    # split very large triangles by rows so one chunk never explodes
    start = 0
    csum = np.cumsum(counts[faces])
    while start < len(faces):
        base = csum[start - 1] if start else 0
        end = int(np.searchsorted(csum, base + max_candidates, side="right"))
        end = max(end, start + 1)
        fi = faces[start:end]
        start = end
        cnt = counts[fi]
        if cnt.sum() > 4 * max_candidates:
            for f in fi:
                for row in range(vmin[f], vmax[f] + 1):
                    yield from _cover(np.array([f]), umin[f:f + 1], nu[f:f + 1],
                                      np.array([row]), np.array([1]), tri_uv, tri_cam, width)
            continue
        yield from _cover(fi, umin[fi], nu[fi], vmin[fi], nv[fi], tri_uv, tri_cam, width)


def _cover(fi, umin, nu, vmin, nv, tri_uv, tri_cam, width):
    cnt = nu * nv
    rep = np.repeat(np.arange(len(fi)), cnt)
    local = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    u = umin[rep] + local % nu[rep]
    v = vmin[rep] + local // nu[rep]
    f = fi[rep]
    p = tri_uv[f]
    px = u.astype(np.float64)
    py = v.astype(np.float64)

    def edge(a, b):
        return (b[:, 0] - a[:, 0]) * (py - a[:, 1]) - (b[:, 1] - a[:, 1]) * (px - a[:, 0])

    e0 = edge(p[:, 1], p[:, 2])
    e1 = edge(p[:, 2], p[:, 0])
    e2 = edge(p[:, 0], p[:, 1])
    inside = ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))
    area = e0 + e1 + e2
    inside &= area != 0
    if not inside.any():
        return
    u, v, f, px, py = u[inside], v[inside], f[inside], px[inside], py[inside]
    yield u, v, f, px, py


def render_depth(mesh: TriangleMesh, cam: VirtualCamera, return_faces: bool = False,
                 check_inside: bool = True):
    """Ray-cast depth image (meters along the optical axis, 0 where nothing is hit).

    Every pixel center's ray is intersected with every triangle whose projection
    covers it and the nearest hit wins, which is what a z-buffer gives, so
    self-occlusion is reproduced. With ``return_faces`` a second image holds the
    hit face index (-1 for misses).
    """
    if check_inside and winding_number(mesh, cam.center) > 0.5:
        raise CaptureError("camera center lies inside the mesh")
    W, H = cam.width, cam.height
    pc = cam.to_camera(mesh.vertices)
    tri = pc[mesh.faces]
    front = (tri[:, :, 2] > 1e-6).all(axis=1)
    fidx = np.flatnonzero(front)
    tri = tri[fidx]
    uv = np.stack([cam.project(tri[:, k]) for k in range(3)], axis=1)
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    offset = np.einsum("ij,ij->i", normal, tri[:, 0])

    zbuf = np.full(W * H, np.inf)
    fbuf = np.full(W * H, -1, dtype=np.int64)
    for u, v, f, px, py in _rasterize(uv, tri, W, H):
        d = np.stack([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, np.ones_like(px)], axis=1)
        z = offset[f] / np.einsum("ij,ij->i", normal[f], d)
        pix = v * W + u
        gf = fidx[f]
        order = np.lexsort((gf, z, pix))
        pix, z, gf = pix[order], z[order], gf[order]
        first = np.ones(len(pix), dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        pix, z, gf = pix[first], z[first], gf[first]
        better = (z < zbuf[pix]) | ((z == zbuf[pix]) & (gf < fbuf[pix]))
        zbuf[pix[better]] = z[better]
        fbuf[pix[better]] = gf[better]
    depth = np.where(np.isfinite(zbuf), zbuf, 0.0).reshape(H, W)
    if return_faces:
        return depth, fbuf.reshape(H, W)
    return depth


def deproject(depth, cam: VirtualCamera, labels=None) -> LabeledPointCloud:
    """Back-project nonzero depth pixels, ``pose @ ((u-cx) z/fx, (v-cy) z/fy, z)``.

    Returned points are in the frame given by ``cam.pose`` (identity pose gives
    camera coordinates). Label pixels equal to background produce no point.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (cam.height, cam.width):
        raise ValueError("depth image is %s, camera expects %s" % (depth.shape, (cam.height, cam.width)))
    valid = depth > 0
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != depth.shape:
            raise ValueError("label image shape %s does not match depth %s" % (labels.shape, depth.shape))
        valid &= labels != SegmentLabel.BACKGROUND
    v, u = np.nonzero(valid)
    z = depth[v, u]
    pts = np.stack([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z], axis=1)
    pts = cam.pose.apply(pts)
    return LabeledPointCloud(pts, None if labels is None else labels[v, u].astype(np.uint8))


def rig_cameras(separation: float = DEFAULT_SEPARATION, height: float = DEFAULT_CAMERA_HEIGHT,
                template: Optional[VirtualCamera] = None):
    """True poses of the opposed front and back cameras."""
    cam = template or VirtualCamera()
    half = separation / 2.0
    front = cam.with_pose(look_at_pose((0.0, -half, height), (0.0, 0.0, height)))
    back = cam.with_pose(look_at_pose((0.0, half, height), (0.0, 0.0, height)))
    return front, back


def _check_frustum(mesh, cam, name):
    pc = cam.to_camera(mesh.vertices)
    if (pc[:, 2] <= 0).any():
        raise CaptureError("mesh extends behind the %s camera" % name)
    uv = cam.project(pc)
    if (uv[:, 0] < 0).any() or (uv[:, 0] > cam.width - 1).any() or \
            (uv[:, 1] < 0).any() or (uv[:, 1] > cam.height - 1).any():
        raise CaptureError("mesh is not fully inside the %s camera frustum" % name)


def depth_noise(depth, sigma_at_1m, rng: np.random.Generator):
    """Zero-mean Gaussian depth noise, sigma proportional to range, drawn for every pixel."""
    n = rng.standard_normal(depth.shape)
    return np.where(depth > 0, depth + sigma_at_1m * depth * n, 0.0)


@dataclass
class Capture:
    front: LabeledPointCloud
    back: LabeledPointCloud
    t_front: RigidTransform
    t_back: RigidTransform
    true_front: RigidTransform
    true_back: RigidTransform
    depth_front: np.ndarray
    depth_back: np.ndarray
    faces_front: np.ndarray
    faces_back: np.ndarray
    cam_front: VirtualCamera
    cam_back: VirtualCamera

    def __iter__(self):
        return iter((self.front, self.back, self.t_front, self.t_back))


def two_view_capture(mesh: TriangleMesh, separation: float = DEFAULT_SEPARATION,
                     condition=ErrorCondition.NOER, noise: Optional[NoiseModel] = None,
                     seed: int = 0, camera: Optional[VirtualCamera] = None,
                     camera_height: float = DEFAULT_CAMERA_HEIGHT) -> Capture:
    """Render front and back views of ``mesh`` and return camera-frame clouds.

    The returned transforms are the *reported* camera-to-world poses: with a
    calibration condition they include the calibration offsets, while the depth
    is always rendered from the true poses. Unpacks as
    ``front, back, t_front, t_back``.
    """
    condition = ErrorCondition.parse(condition)
    noise = noise or NoiseModel()
    if not is_watertight(mesh):
        raise CaptureError("ground-truth mesh must be watertight")
    cam_f, cam_b = rig_cameras(separation, camera_height, camera)
    _check_frustum(mesh, cam_f, "front")
    _check_frustum(mesh, cam_b, "back")
    ss = np.random.SeedSequence(int(seed))
    streams = [np.random.default_rng(s) for s in ss.spawn(3)]
    flab = face_labels(mesh) if mesh.labels is not None else None

    out = {}
    for name, cam, rng in (("front", cam_f, streams[0]), ("back", cam_b, streams[1])):
        depth, fid = render_depth(mesh, cam, return_faces=True)
        if condition.depth_noise:
            depth = depth_noise(depth, noise.depth_sigma_at_1m, rng)
        lab = None
        if flab is not None:
            lab = np.where(fid >= 0, flab[np.maximum(fid, 0)], SegmentLabel.BACKGROUND).astype(np.uint8)
        cloud = deproject(depth, cam.with_pose(RigidTransform.identity()), lab)
        reported = cam.pose
        if condition.calibration:
            reported = cam.pose @ noise.offset(name, streams[2])
        out[name] = (cloud, reported, depth, fid, cam)
    f, b = out["front"], out["back"]
    return Capture(f[0], b[0], f[1], b[1], cam_f.pose, cam_b.pose, f[2], b[2], f[3], b[3], cam_f, cam_b)
