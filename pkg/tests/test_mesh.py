import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from bsv.mesh import (MeshError, NonManifoldEdgeError, NotWatertightError, TriangleMesh,
                      boundary_loops, box, build_laplacian, check_manifold, cotangent_weights,
                      cylinder, fill_holes, icosphere, is_orientation_consistent, is_watertight,
                      signed_volume, submesh, surface_area)

from conftest import random_closed_mesh


def _equilateral_pair(angle_deg):
    """Two triangles sharing edge (0, 1) with the given opposite angles."""
    h = 0.5 / np.tan(np.radians(angle_deg) / 2)
    v = np.array([[-0.5, 0, 0], [0.5, 0, 0], [0, h, 0], [0, -h, 0]])
    return TriangleMesh(v, [[0, 1, 2], [1, 0, 3]])


# ---------------------------------------------------------------- weights

def test_cotangent_weight_60_degrees():
    w = cotangent_weights(_equilateral_pair(60)).as_dict()
    assert w[(0, 1)] == pytest.approx(1 / np.tan(np.radians(60)), abs=1e-12)


def test_cotangent_weight_90_degrees():
    w = cotangent_weights(_equilateral_pair(90)).as_dict()
    assert abs(w[(0, 1)]) < 1e-12


def test_cotangent_weight_boundary_edge():
    v = np.array([[0, 0, 0], [1, 0, 0], [0.5, np.sqrt(3) / 2, 0]])
    w = cotangent_weights(TriangleMesh(v, [[0, 1, 2]])).as_dict()
    for val in w.values():
        assert val == pytest.approx(0.5 / np.sqrt(3), abs=1e-12)


def test_cotangent_rejects_nonmanifold():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]], float)
    m = TriangleMesh(v, [[0, 1, 2], [1, 0, 3], [0, 1, 4]])
    with pytest.raises(NonManifoldEdgeError):
        cotangent_weights(m)


# ---------------------------------------------------------------- laplacian

def test_laplacian_tetra_rows(tetra):
    L = build_laplacian(tetra, cotangent_weights(tetra)).matrix.toarray()
    assert L.shape == (4, 4)
    assert np.abs(L.sum(axis=1)).max() < 1e-10
    assert np.allclose(L, L.T)


@pytest.mark.parametrize("seed", range(5))
def test_laplacian_row_sums_and_constants(seed):
    m = random_closed_mesh(np.random.default_rng(seed), 2)
    L = build_laplacian(m, cotangent_weights(m)).matrix
    assert np.abs(np.asarray(L.sum(axis=1))).max() < 1e-10
    assert np.abs(L @ np.ones(m.n_vertices)).max() < 1e-10


def test_laplacian_matches_dense_loop(rng):
    # 10-vertex mesh: a jittered pentagonal bipyramid
    ang = 2 * np.pi * np.arange(8) / 8
    v = np.concatenate([np.stack([np.cos(ang), np.sin(ang), np.zeros(8)], 1), [[0, 0, 1], [0, 0, -1]]])
    v = v + 0.05 * rng.normal(size=v.shape)
    f = [[i, (i + 1) % 8, 8] for i in range(8)] + [[(i + 1) % 8, i, 9] for i in range(8)]
    m = TriangleMesh(v, f)
    ref = np.zeros((10, 10))
    for tri in m.faces:
        for k in range(3):
            o, a, b = tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3]
            u, w = v[a] - v[o], v[b] - v[o]
            c = 0.5 * np.dot(u, w) / np.linalg.norm(np.cross(u, w))
            ref[a, b] -= c
            ref[b, a] -= c
            ref[a, a] += c
            ref[b, b] += c
    L = build_laplacian(m, cotangent_weights(m)).matrix.toarray()
    assert np.abs(L - ref).max() < 1e-12


def test_laplacian_weight_mismatch(tetra, cube):
    with pytest.raises(MeshError):
        build_laplacian(cube, cotangent_weights(tetra))


# ---------------------------------------------------------------- boundaries

def test_closed_cube_has_no_loops(cube):
    assert boundary_loops(cube) == []
    assert is_watertight(cube)


def test_cube_missing_face_one_loop(cube):
    open_cube = submesh(cube, np.arange(cube.n_faces) >= 2)
    loops = boundary_loops(open_cube)
    assert len(loops) == 1 and len(loops[0]) == 4


def test_open_cylinder_two_loops():
    m = cylinder(1.0, 2.0, 32, 4)
    loops = boundary_loops(m)
    assert len(loops) == 2
    assert sorted(len(l) for l in loops) == [32, 32]


# ---------------------------------------------------------------- fill_holes

def test_fill_cube_missing_face(cube):
    closed = fill_holes(submesh(cube, np.arange(cube.n_faces) >= 2))
    assert is_watertight(closed)
    assert signed_volume(closed) == pytest.approx(1.0, abs=1e-12)


def test_fill_noop_on_closed(cube):
    assert fill_holes(cube) is cube


def test_fill_cylinder_volume():
    m = fill_holes(cylinder(0.3, 1.2, 64, 6))
    assert is_watertight(m) and is_orientation_consistent(m)
    assert signed_volume(m) == pytest.approx(np.pi * 0.09 * 1.2, rel=0.02)


@pytest.mark.parametrize("fixture", ["cube", "sphere", "cylinder", "two_holes"])
def test_fill_holes_zero_boundary(fixture):
    if fixture == "cube":
        m = submesh(box((1, 2, 3), 3), np.arange(108) % 7 != 0)
    elif fixture == "sphere":
        s = icosphere(2)
        m = submesh(s, s.vertices[s.faces].mean(axis=1)[:, 2] < 0.6)
    elif fixture == "cylinder":
        m = cylinder(1.0, 1.0, 17, 3)
    else:
        s = icosphere(3)
        z = s.vertices[s.faces].mean(axis=1)[:, 2]
        m = submesh(s, np.abs(z) < 0.7)
    out = fill_holes(m)
    assert len(boundary_loops(out)) == 0
    assert is_watertight(out)


def test_fill_holes_keeps_labels(cube):
    lab = cube.with_labels(np.arange(cube.n_vertices) % 3)
    out = fill_holes(submesh(lab, np.arange(cube.n_faces) >= 2))
    assert out.labels is not None and len(out.labels) == out.n_vertices


# ---------------------------------------------------------------- volume / area

def test_unit_cube_volume_area(cube):
    assert signed_volume(cube) == pytest.approx(1.0, abs=1e-12)
    assert surface_area(cube) == pytest.approx(6.0, abs=1e-12)


def test_right_triangle_area():
    m = TriangleMesh([[0, 0, 0], [3, 0, 0], [0, 4, 0]], [[0, 1, 2]])
    assert surface_area(m) == pytest.approx(6.0, abs=1e-12)


def test_box_one_volume():
    assert signed_volume(box((0.52, 0.589, 0.558), 4)) == pytest.approx(0.171, abs=5e-4)


@pytest.mark.parametrize("seed", range(10))
def test_volume_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    m = random_closed_mesh(rng, 2)
    R = Rotation.random(random_state=seed).as_matrix()
    moved = m.transformed(R, rng.uniform(-10, 10, 3))
    assert abs(signed_volume(moved) - signed_volume(m)) < 1e-9


def test_icosphere_convergence():
    s = icosphere(3)
    v, a = signed_volume(s), surface_area(s)
    assert 0 < 4 / 3 * np.pi - v < 0.01 * 4 / 3 * np.pi
    assert 0 < 4 * np.pi - a < 0.01 * 4 * np.pi


def test_volume_requires_closed(cube):
    with pytest.raises(NotWatertightError):
        signed_volume(submesh(cube, np.arange(cube.n_faces) >= 1))


def test_flipped_volume_negative(cube):
    assert signed_volume(cube.flipped()) == pytest.approx(-1.0)
    assert signed_volume(cube.flipped().oriented_outward()) == pytest.approx(1.0)


def test_degenerate_face_rejected():
    with pytest.raises(MeshError):
        TriangleMesh(np.zeros((3, 3)), [[0, 0, 1]])


def test_check_manifold_passes(cube):
    check_manifold(cube)


@pytest.mark.parametrize("s", [0.1, 2.5])
def test_volume_scales_cubically(s):
    m = random_closed_mesh(np.random.default_rng(2), 2)
    assert signed_volume(m.transformed(scale=s)) == pytest.approx(s ** 3 * signed_volume(m), rel=1e-9)


def test_laplacian_symmetric(sphere2):
    L = build_laplacian(sphere2, cotangent_weights(sphere2)).matrix
    assert abs(L - L.T).max() < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_cotangent_weights_dense_reference(seed):
    m = random_closed_mesh(np.random.default_rng(seed), 2, 0.03)
    assert m.n_faces <= 500
    ref = {}
    V = m.vertices
    for tri in m.faces:
        for k in range(3):
            o, a, b = tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3]
            u, w = V[a] - V[o], V[b] - V[o]
            key = (min(a, b), max(a, b))
            ref[key] = ref.get(key, 0.0) + 0.5 * np.dot(u, w) / np.linalg.norm(np.cross(u, w))
    got = cotangent_weights(m).as_dict()
    assert got.keys() == ref.keys()
    assert max(abs(got[k] - ref[k]) for k in ref) < 1e-12


def test_face_label_majority_and_ties():
    from bsv.mesh import face_labels
    m = TriangleMesh(np.eye(3), [[0, 1, 2]], [5, 3, 5])
    assert face_labels(m).tolist() == [5]
    assert face_labels(m.with_labels([7, 2, 4])).tolist() == [2]
