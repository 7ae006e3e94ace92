"""Indexed triangle meshes: adjacency, cotangent Laplacian, holes and volume."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)

COT_CLAMP = 10.0


class MeshError(ValueError):
    """Structural problem with a mesh."""


class NonManifoldEdgeError(MeshError):
    pass


class NotWatertightError(MeshError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Vertices (n, 3) in meters, CCW faces (m, 3) and optional per-vertex labels."""

    vertices: np.ndarray
    faces: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("face index out of range for %d vertices" % len(v))
        degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if degenerate.any():
            raise MeshError("degenerate face %d repeats a vertex index" % int(np.flatnonzero(degenerate)[0]))
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
            if len(lab) != len(v):
                raise MeshError("got %d labels for %d vertices" % (len(lab), len(v)))
            object.__setattr__(self, "labels", _frozen(lab))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "TriangleMesh":
        return TriangleMesh(vertices, self.faces, self.labels)

    def with_labels(self, labels) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.faces, labels)

    def transformed(self, rotation=None, translation=None, scale=1.0) -> "TriangleMesh":
        v = self.vertices * scale
        if rotation is not None:
            v = v @ np.asarray(rotation).T
        if translation is not None:
            v = v + np.asarray(translation)
        return self.with_vertices(v)

    def flipped(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.faces[:, ::-1], self.labels)

    def oriented_outward(self) -> "TriangleMesh":
        """Flip all faces if the mesh is closed and encloses negative volume."""
        if is_watertight(self) and _raw_volume(self) < 0:
            return self.flipped()
        return self

    def edge_lengths(self) -> np.ndarray:
        e = unique_edges(self.faces)
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    def bbox(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


@dataclass(frozen=True, eq=False)
class EdgeWeightMap:
    """Cotangent weight per undirected edge (``edges[k, 0] < edges[k, 1]``)."""

    edges: np.ndarray
    weights: np.ndarray
    n_vertices: int
    cell_weights: Optional[np.ndarray] = None

    def as_dict(self) -> dict:
        return {(int(i), int(j)): float(w) for (i, j), w in zip(self.edges, self.weights)}

    def vertex_sums(self) -> np.ndarray:
        s = np.zeros(self.n_vertices)
        np.add.at(s, self.edges[:, 0], self.weights)
        np.add.at(s, self.edges[:, 1], self.weights)
        return s


@dataclass(frozen=True, eq=False)
class SparseLaplacian:
    matrix: sparse.csr_matrix
    n_vertices: int

    def __matmul__(self, x):
        return self.matrix @ x

    def augmented(self, constraint_diagonal) -> sparse.csc_matrix:
        """``L + diag(c)``, the soft-constraint system matrix."""
        c = np.asarray(constraint_diagonal, dtype=np.float64)
        return (self.matrix + sparse.diags(c)).tocsc()


def unique_edges(faces: np.ndarray) -> np.ndarray:
    he = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    he.sort(axis=1)
    return np.unique(he, axis=0)


def half_edges(faces: np.ndarray) -> np.ndarray:
    """Directed edges (a -> b) following each face's winding, face-major order."""
    return np.stack([faces, np.roll(faces, -1, axis=1)], axis=-1).reshape(-1, 2)


def _edge_keys(a: np.ndarray, b: np.ndarray, n: int) -> np.ndarray:
    return a.astype(np.int64) * n + b.astype(np.int64)


def _edge_face_counts(mesh: TriangleMesh):
    e = unique_edges(mesh.faces)
    he = half_edges(mesh.faces)
    lo = np.minimum(he[:, 0], he[:, 1])
    hi = np.maximum(he[:, 0], he[:, 1])
    keys = _edge_keys(lo, hi, mesh.n_vertices)
    ekeys = _edge_keys(e[:, 0], e[:, 1], mesh.n_vertices)
    idx = np.searchsorted(ekeys, keys)
    counts = np.bincount(idx, minlength=len(e))
    return e, counts


def check_manifold(mesh: TriangleMesh) -> None:
    e, counts = _edge_face_counts(mesh)
    bad = np.flatnonzero(counts > 2)
    if len(bad):
        i, j = e[bad[0]]
        raise NonManifoldEdgeError(
            "edge (%d, %d) has %d incident faces" % (i, j, counts[bad[0]]))


def cotangent_weights(mesh: TriangleMesh, cell_weight: float = 1e-2) -> EdgeWeightMap:
    """Per-edge weights ``0.5 * (cot a + cot b)`` from the angles opposite each edge.

    Boundary edges get the single available cotangent term. Every cotangent is
    clamped to ``[-COT_CLAMP, COT_CLAMP]`` so sliver triangles cannot produce
    unbounded weights.
    """
    check_manifold(mesh)
    V, F = mesh.vertices, mesh.faces
    n = mesh.n_vertices
    cots = []
    pairs = []
    for k in range(3):
        # angle at corner k is opposite the edge (k+1, k+2)
        o, a, b = F[:, k], F[:, (k + 1) % 3], F[:, (k + 2) % 3]
        u = V[a] - V[o]
        w = V[b] - V[o]
        dot = np.einsum("ij,ij->i", u, w)
        cross = np.linalg.norm(np.cross(u, w), axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            c = dot / cross
        c = np.where(cross > 0, c, np.sign(dot) * COT_CLAMP)
        cots.append(np.clip(c, -COT_CLAMP, COT_CLAMP))
        pairs.append(np.stack([np.minimum(a, b), np.maximum(a, b)], axis=1))
    pairs = np.concatenate(pairs)
    cots = np.concatenate(cots)
    edges, inv = np.unique(pairs, axis=0, return_inverse=True)
    w = 0.5 * np.bincount(inv.reshape(-1), weights=cots, minlength=len(edges))
    cell = np.full(n, float(cell_weight))
    return EdgeWeightMap(_frozen(edges), _frozen(w), n, _frozen(cell))


def build_laplacian(mesh: TriangleMesh, weights: EdgeWeightMap) -> SparseLaplacian:
    """Assemble ``L`` with ``L_ij = -w_ij`` and ``L_ii = sum_j w_ij``."""
    n = mesh.n_vertices
    if weights.n_vertices != n or (len(weights.edges) and weights.edges.max() >= n):
        raise MeshError("edge weights were computed for a different mesh "
                        "(%d vs %d vertices)" % (weights.n_vertices, n))
    i, j = weights.edges[:, 0], weights.edges[:, 1]
    w = weights.weights
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([j, i, i, j])
    vals = np.concatenate([-w, -w, w, w])
    L = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    L.sum_duplicates()
    return SparseLaplacian(L, n)


def boundary_half_edges(mesh: TriangleMesh) -> np.ndarray:
    """Half-edges without an opposite twin."""
    he = half_edges(mesh.faces)
    n = mesh.n_vertices
    fwd = _edge_keys(he[:, 0], he[:, 1], n)
    rev = _edge_keys(he[:, 1], he[:, 0], n)
    return he[~np.isin(fwd, rev)]


def boundary_loops(mesh: TriangleMesh) -> list:
    """Ordered vertex cycles made of boundary half-edges.

    Loops follow the winding of the faces they border. A vertex touched by
    several boundary edges (a pinch) is split greedily into separate cycles.
    """
    bhe = boundary_half_edges(mesh)
    if len(bhe) == 0:
        return []
    outgoing: dict = {}
    for a, b in bhe.tolist():
        outgoing.setdefault(a, []).append(b)
    loops = []
    for start in sorted(outgoing):
        while outgoing.get(start):
            loop = [start]
            cur = outgoing[start].pop()
            while cur != start:
                loop.append(cur)
                nxt = outgoing.get(cur)
                if not nxt:
                    break
                cur = nxt.pop()
            if cur == start:
                loops.extend(_split_simple(loop))
            else:
                # open chain: only possible on inconsistently oriented input
                warnings.warn("boundary chain starting at vertex %d does not close" % start)
    return loops


def _split_simple(cycle) -> list:
    """Split a closed vertex walk that revisits vertices into simple cycles."""
    out = []
    stack: list = []
    pos: dict = {}
    for v in cycle:
        if v in pos:
            k = pos[v]
            sub = stack[k:]
            for u in sub[1:]:
                del pos[u]
            del stack[k + 1:]
            if len(sub) >= 3:
                out.append(np.array(sub, dtype=np.int64))
        else:
            pos[v] = len(stack)
            stack.append(v)
    if len(stack) >= 3:
        out.append(np.array(stack, dtype=np.int64))
    return out


def is_watertight(mesh: TriangleMesh) -> bool:
    """Closed, edge-manifold and consistently oriented."""
    if mesh.n_faces == 0:
        return False
    he = half_edges(mesh.faces)
    n = mesh.n_vertices
    fwd = _edge_keys(he[:, 0], he[:, 1], n)
    if len(np.unique(fwd)) != len(fwd):
        return False
    rev = _edge_keys(he[:, 1], he[:, 0], n)
    return bool(np.isin(fwd, rev).all())


def is_orientation_consistent(mesh: TriangleMesh) -> bool:
    he = half_edges(mesh.faces)
    keys = _edge_keys(he[:, 0], he[:, 1], mesh.n_vertices)
    return len(np.unique(keys)) == len(keys)


def _loop_self_intersects(points: np.ndarray) -> bool:
    c = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - c)
    p = (points - c) @ vt[:2].T
    k = len(p)
    if k < 4:
        return False
    a = p
    b = np.roll(p, -1, axis=0)

    def orient(p0, p1, p2):
        return (p1[..., 0] - p0[..., 0]) * (p2[..., 1] - p0[..., 1]) - \
               (p1[..., 1] - p0[..., 1]) * (p2[..., 0] - p0[..., 0])

    for i in range(k):
        j = np.arange(i + 2, k)
        if i == 0:
            j = j[j != k - 1]
        if not len(j):
            continue
        d1 = orient(a[i], b[i], a[j])
        d2 = orient(a[i], b[i], b[j])
        d3 = orient(a[j], b[j], a[i][None])
        d4 = orient(a[j], b[j], b[i][None])
        if np.any((d1 * d2 < 0) & (d3 * d4 < 0)):
            return True
    return False


def fill_holes(mesh: TriangleMesh) -> TriangleMesh:
    """Close every boundary loop with a fan around the loop centroid.

    Triangular holes are closed with a single face. Each new face reverses the
    boundary half-edge it covers, so the result has no boundary edges. Original
    faces and vertices are kept unchanged and in order.
    """
    loops = boundary_loops(mesh)
    if not loops:
        return mesh
    verts = [mesh.vertices]
    faces = [mesh.faces]
    labels = None if mesh.labels is None else [mesh.labels]
    n = mesh.n_vertices
    for loop in loops:
        pts = mesh.vertices[loop]
        if len(loop) == 3:
            faces.append(loop[::-1][None, :])
            continue
        if _loop_self_intersects(pts):
            # the fan may fold over itself; signed volume is unaffected
            logger.debug("boundary loop of %d vertices self-intersects in projection", len(loop))
        c = n
        n += 1
        verts.append(pts.mean(axis=0)[None, :])
        if labels is not None:
            vals, counts = np.unique(mesh.labels[loop], return_counts=True)
            labels.append(np.array([vals[np.argmax(counts)]], dtype=np.uint8))
        nxt = np.roll(loop, -1)
        faces.append(np.stack([nxt, loop, np.full(len(loop), c)], axis=1))
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces),
                        None if labels is None else np.concatenate(labels))


def _raw_volume(mesh: TriangleMesh) -> float:
    v0, v1, v2 = (mesh.vertices[mesh.faces[:, k]] for k in range(3))
    return float(np.einsum("ij,ij->i", v0, np.cross(v1, v2)).sum() / 6.0)


def signed_volume(mesh: TriangleMesh) -> float:
    """Enclosed volume by the divergence theorem, ``sum det[v0 v1 v2] / 6``."""
    if not is_watertight(mesh):
        nb = len(boundary_half_edges(mesh))
        raise NotWatertightError("mesh is not watertight: %d boundary edges" % nb)
    return _raw_volume(mesh)


def face_areas(mesh: TriangleMesh) -> np.ndarray:
    v0, v1, v2 = (mesh.vertices[mesh.faces[:, k]] for k in range(3))
    return 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)


def surface_area(mesh: TriangleMesh) -> float:
    return float(face_areas(mesh).sum())


def face_normals(mesh: TriangleMesh) -> np.ndarray:
    v0, v1, v2 = (mesh.vertices[mesh.faces[:, k]] for k in range(3))
    n = np.cross(v1 - v0, v2 - v0)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)


def vertex_normals(mesh: TriangleMesh) -> np.ndarray:
    v0, v1, v2 = (mesh.vertices[mesh.faces[:, k]] for k in range(3))
    fn = np.cross(v1 - v0, v2 - v0)  # area weighted
    vn = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(vn, mesh.faces[:, k], fn)
    norm = np.linalg.norm(vn, axis=1, keepdims=True)
    return np.divide(vn, norm, out=np.zeros_like(vn), where=norm > 0)


def face_labels(mesh: TriangleMesh) -> np.ndarray:
    """Majority vertex label per face; three-way ties go to the lowest label."""
    if mesh.labels is None:
        raise MeshError("mesh has no labels")
    lf = np.sort(mesh.labels[mesh.faces].astype(np.int64), axis=1)
    # sorted triple: majority is the middle value whenever two agree
    out = np.where(lf[:, 0] == lf[:, 1], lf[:, 0],
                   np.where(lf[:, 1] == lf[:, 2], lf[:, 1], lf[:, 0]))
    return out.astype(np.uint8)


def submesh(mesh: TriangleMesh, face_mask: np.ndarray) -> TriangleMesh:
    """Keep selected faces and compact the vertex array."""
    f = mesh.faces[np.asarray(face_mask, dtype=bool)]
    used = np.unique(f)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    labels = None if mesh.labels is None else mesh.labels[used]
    return TriangleMesh(mesh.vertices[used], remap[f], labels)


def weld_vertices(vertices: np.ndarray, faces: np.ndarray, decimals: int = 9):
    """Merge coincident vertices and drop faces that become degenerate."""
    key = np.round(np.asarray(vertices, dtype=np.float64), decimals)
    uniq, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inv = inv.reshape(-1)
    f = inv[np.asarray(faces)]
    ok = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    return np.asarray(vertices, dtype=np.float64)[first], f[ok]


# ---------------------------------------------------------------- primitives

def box(extents=(1.0, 1.0, 1.0), divisions: int = 1, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Axis-aligned box with each face split into a ``divisions`` x ``divisions`` grid."""
    ex = np.asarray(extents, dtype=np.float64)
    d = int(divisions)
    t = np.linspace(-0.5, 0.5, d + 1)
    verts, faces = [], []
    base = 0
    for axis in range(3):
        for sign in (-1.0, 1.0):
            u_ax, v_ax = [a for a in range(3) if a != axis]
            if sign < 0:
                u_ax, v_ax = v_ax, u_ax
            # (u, v, normal) right handed so that CCW grids face outward
            if np.linalg.det(np.eye(3)[[u_ax, v_ax, axis]]) * sign < 0:
                u_ax, v_ax = v_ax, u_ax
            uu, vv = np.meshgrid(t, t, indexing="ij")
            p = np.zeros((d + 1, d + 1, 3))
            p[..., u_ax] = uu
            p[..., v_ax] = vv
            p[..., axis] = 0.5 * sign
            verts.append(p.reshape(-1, 3))
            idx = np.arange((d + 1) ** 2).reshape(d + 1, d + 1) + base
            a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
            c, e = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
            faces.append(np.stack([a, b, c], 1))
            faces.append(np.stack([a, c, e], 1))
            base += (d + 1) ** 2
    v, f = weld_vertices(np.concatenate(verts), np.concatenate(faces))
    m = TriangleMesh(v * ex + np.asarray(center), f)
    return m.oriented_outward()


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriangleMesh:
    phi = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([[-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
                  [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
                  [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1]], dtype=np.float64)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]], dtype=np.int64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(int(subdivisions)):
        e = unique_edges(f)
        mid = v[e[:, 0]] + v[e[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        n = len(v)
        keys = _edge_keys(e[:, 0], e[:, 1], n)

        def m(a, b):
            return n + np.searchsorted(keys, _edge_keys(np.minimum(a, b), np.maximum(a, b), n))

        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        ab, bc, ca = m(a, b), m(b, c), m(c, a)
        f = np.concatenate([np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
                            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1)])
        v = np.concatenate([v, mid])
    return TriangleMesh(v * radius, f).oriented_outward()


def cylinder(radius: float = 1.0, height: float = 1.0, sections: int = 64,
             rings: int = 8, capped: bool = False) -> TriangleMesh:
    """Cylinder along +z centered at the origin; open unless ``capped``."""
    ang = 2 * np.pi * np.arange(sections) / sections
    z = np.linspace(-height / 2, height / 2, rings + 1)
    v = np.stack([np.tile(radius * np.cos(ang), rings + 1),
                  np.tile(radius * np.sin(ang), rings + 1),
                  np.repeat(z, sections)], axis=1)
    idx = np.arange((rings + 1) * sections).reshape(rings + 1, sections)
    nxt = np.roll(idx, -1, axis=1)
    a, b = idx[:-1].ravel(), nxt[:-1].ravel()
    c, d = nxt[1:].ravel(), idx[1:].ravel()
    f = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    mesh = TriangleMesh(v, f)
    if capped:
        mesh = fill_holes(mesh)
    return mesh
