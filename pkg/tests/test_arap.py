import csv

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from bsv.arap import (ARAPRegistration, ArapSystem, CorrespondenceSet, RegistrationConfig,
                      RegistrationError, compute_correspondences, global_step, local_step,
                      regularization_energy, register, total_energy, write_energy_csv)
from bsv.mesh import box, cotangent_weights, icosphere, surface_area, unique_edges
from bsv.pointcloud import LabeledPointCloud

from conftest import random_closed_mesh


def _corr(idx, targets, mu=500.0):
    idx = np.asarray(idx)
    return CorrespondenceSet(idx, np.asarray(targets, float), np.full(len(idx), mu), "m2p")


def _check_rotations(R):
    eye = np.broadcast_to(np.eye(3), R.shape)
    assert np.abs(R @ np.swapaxes(R, 1, 2) - eye).max() < 1e-9
    assert np.abs(np.linalg.det(R) - 1).max() < 1e-9


# ---------------------------------------------------------------- config

def test_parse_schedule():
    assert RegistrationConfig.parse_schedule("m2p:5, p2m:5,m2p:10") == (("m2p", 5), ("p2m", 5), ("m2p", 10))
    assert RegistrationConfig().n_iterations == 20


@pytest.mark.parametrize("kw", [dict(schedule=(("x2y", 3),)), dict(per_cell_weight=0),
                                dict(regularization_alpha=-1), dict(inner_sweeps=0),
                                dict(schedule=())])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        RegistrationConfig(**kw)


# ---------------------------------------------------------------- correspondences

def test_identity_pairing_both_directions(sphere2):
    for d in ("m2p", "p2m"):
        c = compute_correspondences(sphere2, sphere2.vertices, d)
        assert np.array_equal(c.vertices, np.arange(sphere2.n_vertices))
        assert np.allclose(c.targets, sphere2.vertices)


def test_m2p_brute_force(rng):
    m = icosphere(1)
    assert m.n_vertices <= 50
    pts = rng.normal(size=(500, 3))
    c = compute_correspondences(m, pts, "m2p")
    d = np.linalg.norm(m.vertices[:, None] - pts[None], axis=2)
    assert np.array_equal(c.targets, pts[d.argmin(axis=1)])


def test_p2m_centroid():
    m = icosphere(0)
    v = m.vertices[4]
    pts = v + np.array([[0.01, 0, 0], [0, 0.02, 0], [0, 0, -0.015]])
    c = compute_correspondences(m, pts, "p2m")
    assert c.vertices.tolist() == [4]
    assert np.allclose(c.targets[0], pts.mean(axis=0))


def test_max_distance_filters(sphere2):
    far = sphere2.vertices * 3
    cfg = RegistrationConfig(max_distance=0.5)
    assert len(compute_correspondences(sphere2, far, "m2p", cfg)) == 0


# ---------------------------------------------------------------- local step

def test_local_rest_is_identity(sphere2):
    R = local_step(sphere2, sphere2.vertices)
    assert np.abs(R - np.eye(3)).max() < 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_local_recovers_global_rotation(seed):
    m = random_closed_mesh(np.random.default_rng(seed), 2)
    Q = Rotation.random(random_state=seed).as_matrix()
    R = local_step(m, m.vertices @ Q.T)
    assert np.abs(R - Q).max() < 1e-9


def test_local_mirror_keeps_det_positive(sphere2):
    R = local_step(sphere2, sphere2.vertices * [-1, 1, 1])
    _check_rotations(R)


def test_local_with_regularizer_rotations(sphere2):
    system = ArapSystem(sphere2)
    R = local_step(sphere2, sphere2.vertices + 0.1 * np.random.default_rng(0).normal(size=(sphere2.n_vertices, 3)),
                   cells=system)
    _check_rotations(R)


# ---------------------------------------------------------------- global step

def test_global_fixed_point(sphere2):
    system = ArapSystem(sphere2)
    n = sphere2.n_vertices
    x = global_step(system, sphere2, np.tile(np.eye(3), (n, 1, 1)), _corr(np.arange(n), sphere2.vertices, 1e8))
    assert np.abs(x - sphere2.vertices).max() < 1e-6


def test_global_rotation_consistency(sphere2):
    Q = Rotation.from_euler("xyz", [20, -35, 50], degrees=True).as_matrix()
    system = ArapSystem(sphere2)
    n = sphere2.n_vertices
    target = sphere2.vertices @ Q.T
    x = global_step(system, sphere2, np.tile(Q, (n, 1, 1)), _corr(np.arange(0, n, 5), target[::5]))
    assert np.abs(x - target).max() < 1e-6


def _dense_reference(system, rotations, corr):
    """Assemble and solve the global system densely from its definition."""
    n = system.n
    L = system.laplacian.matrix.toarray()
    G = system.G.toarray()
    c = np.zeros(n)
    t = np.zeros((n, 3))
    c[corr.vertices] = corr.weights
    t[corr.vertices] = corr.targets
    A = L + 0.5 * system.reg_scale * G.T @ G + np.diag(c)
    b = np.zeros((n, 3))
    for h in range(len(system.src)):
        i, j = system.src[h], system.dst[h]
        b[i] += 0.5 * system.w[h] * (rotations[i] + rotations[j]) @ system.rest_edges[h]
    g = np.einsum("iab,icb->iac", system.rest_cov, rotations).reshape(3 * n, 3)
    rhs = b + 0.5 * system.reg_scale * G.T @ g + c[:, None] * t
    return np.linalg.solve(A, rhs)


@pytest.mark.parametrize("alpha", [0.0, 1.0, 1e6])
def test_global_dense_oracle(alpha):
    rng = np.random.default_rng(4)
    m = random_closed_mesh(rng, 1, 0.03)
    assert m.n_vertices <= 50
    cfg = RegistrationConfig(regularization_alpha=alpha)
    system = ArapSystem(m, cfg)
    R = Rotation.random(m.n_vertices, random_state=1).as_matrix()
    corr = _corr(np.arange(0, m.n_vertices, 3), rng.normal(size=(len(range(0, m.n_vertices, 3)), 3)))
    x = global_step(system, m, R, corr, cfg)
    ref = _dense_reference(system, R, corr)
    assert np.abs(x - ref).max() < 1e-9 * max(1.0, np.abs(ref).max())


def test_global_residual(rng):
    m = icosphere(3)
    cfg = RegistrationConfig()
    system = ArapSystem(m, cfg)
    R = Rotation.random(m.n_vertices, random_state=2).as_matrix()
    corr = _corr(np.arange(0, m.n_vertices, 2), rng.normal(size=(len(range(0, m.n_vertices, 2)), 3)))
    x = global_step(system, m, R, corr, cfg)
    c = np.zeros(m.n_vertices)
    t = np.zeros((m.n_vertices, 3))
    c[corr.vertices], t[corr.vertices] = corr.weights, corr.targets
    b, k = system.rhs(R)
    rhs = b + 0.5 * system.reg_scale * k + c[:, None] * t
    r = system.matrix(c) @ x - rhs
    assert np.abs(r).max() / np.abs(rhs).max() < 1e-8


def test_global_needs_correspondences(sphere2):
    system = ArapSystem(sphere2)
    with pytest.raises(RegistrationError):
        global_step(system, sphere2, np.tile(np.eye(3), (sphere2.n_vertices, 1, 1)), _corr([], np.zeros((0, 3))))


# ---------------------------------------------------------------- energies

def test_regularization_rest_zero(sphere2):
    system = ArapSystem(sphere2)
    cov = system.normalized_covariances(sphere2.vertices)
    R = np.tile(np.eye(3), (sphere2.n_vertices, 1, 1))
    assert regularization_energy(cov, system.area, 1e6, system.rest_cov, R) == 0.0


def test_regularization_single_cell():
    assert regularization_energy(np.array([[2.0, 1.0, 1.0]]), 1.0, 1.0) == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(5))
def test_regularization_svd_identity(seed):
    rng = np.random.default_rng(seed)
    S = rng.normal(size=(6, 3, 3))
    U, s, Vt = np.linalg.svd(S)
    explicit = sum(np.sum((U[i] @ np.diag(s[i]) @ Vt[i] - U[i] @ Vt[i]) ** 2) for i in range(6))
    assert regularization_energy(S, 1.0, 1.0) == pytest.approx(explicit, abs=1e-12)


def test_total_energy_rest_and_translation(sphere2):
    R = np.tile(np.eye(3), (sphere2.n_vertices, 1, 1))
    assert total_energy(sphere2, sphere2.vertices, R).total == pytest.approx(0.0, abs=1e-20)
    e = total_energy(sphere2, sphere2.vertices + [3.0, -1.0, 2.0], R)
    assert e.total == pytest.approx(0.0, abs=1e-18)


def _energy_loops(rest, P, R, cfg, corr):
    """Direct double loop over cells and their neighbours."""
    V = rest.vertices
    W = cotangent_weights(rest, cfg.per_cell_weight).as_dict()
    nbrs = {i: [] for i in range(rest.n_vertices)}
    for (i, j), w in W.items():
        nbrs[i].append((j, w))
        nbrs[j].append((i, w))
    area = surface_area(rest)
    fit = reg = 0.0
    for i in range(rest.n_vertices):
        wsum = sum(w for _, w in nbrs[i])
        if wsum <= 0:
            wsum = sum(abs(w) for _, w in nbrs[i])
        S = np.zeros((3, 3))
        C = np.zeros((3, 3))
        for j, w in nbrs[i]:
            e, d = V[i] - V[j], P[i] - P[j]
            fit += w * np.sum((d - R[i] @ e) ** 2)
            S += w / wsum * np.outer(e, d)
            C += w / wsum * np.outer(e, e)
        reg += np.sum((S - C @ R[i].T) ** 2)
    total = cfg.per_cell_weight * (fit + cfg.regularization_alpha * area * reg)
    data = sum(2 * cfg.per_cell_weight * corr.weights[k] * np.sum((P[v] - corr.targets[k]) ** 2)
               for k, v in enumerate(corr.vertices))
    return fit, reg * cfg.regularization_alpha * area, total, total + data


@pytest.mark.parametrize("seed", range(4))
def test_energy_oracle(seed):
    rng = np.random.default_rng(seed)
    rest = random_closed_mesh(rng, 1, 0.04)
    assert rest.n_vertices <= 50
    cfg = RegistrationConfig(regularization_alpha=[0.0, 1.0, 1e6, 10.0][seed])
    P = rest.vertices + 0.05 * rng.normal(size=rest.vertices.shape)
    R = Rotation.random(rest.n_vertices, random_state=seed).as_matrix()
    corr = _corr(np.arange(0, rest.n_vertices, 4), rng.normal(size=(len(range(0, rest.n_vertices, 4)), 3)), 37.0)
    e = total_energy(rest, P, R, config=cfg, corr=corr)
    fit, reg, total, obj = _energy_loops(rest, P, R, cfg, corr)
    for got, want in ((e.fitting, fit), (e.regularization, reg), (e.total, total), (e.objective, obj)):
        assert abs(got - want) <= 1e-10 * max(1.0, abs(want))


# ---------------------------------------------------------------- solver properties

def _sweeps(rest, cfg, corr, P, n):
    system = ArapSystem(rest, cfg)
    R = local_step(rest, P, cells=system)
    energies = [total_energy(rest, P, R, config=cfg, system=system, corr=corr).objective]
    for _ in range(n):
        R = local_step(rest, P, cells=system)
        _check_rotations(R)
        P = global_step(system, rest, R, corr, cfg)
        energies.append(total_energy(rest, P, R, config=cfg, system=system, corr=corr).objective)
    return np.array(energies)


@pytest.mark.parametrize("trial", range(100))
def test_energy_non_increasing(trial):
    rng = np.random.default_rng(1000 + trial)
    rest = icosphere(2) if trial % 2 == 0 else box((1.0, 0.6, 0.4), 4)
    rest = rest.with_vertices(rest.vertices + 0.02 * rng.normal(size=rest.vertices.shape))
    assert rest.n_vertices <= 500
    cfg = RegistrationConfig(regularization_alpha=[0.0, 1.0, 1e6][trial % 3],
                             correspondence_weight=float(rng.uniform(1, 1000)))
    sel = np.sort(rng.choice(rest.n_vertices, rest.n_vertices // 3, replace=False))
    corr = _corr(sel, 1.3 * rest.vertices[sel] + 0.1 * rng.normal(size=(len(sel), 3)), cfg.correspondence_weight)
    E = _sweeps(rest, cfg, corr, rest.vertices + 0.1 * rng.normal(size=rest.vertices.shape), 8)
    assert np.all(np.diff(E) <= 1e-9 * np.abs(E[:-1]))


def _clustered_target(seed):
    """Sphere samples snapped to a coarse lattice: dense clusters, empty gaps."""
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(4000, 3))
    p /= np.linalg.norm(p, axis=1)[:, None]
    g = np.unique(np.round(0.6 * p / 0.1) * 0.1, axis=0)
    return g + 0.001 * rng.normal(size=g.shape)


def test_unregularized_instability_signature():
    cfg = RegistrationConfig(regularization_alpha=0.0, schedule=(("m2p", 20),))
    try:
        _, log = register(icosphere(3, 0.5), _clustered_target(0), cfg)
    except RegistrationError as exc:
        assert exc.iteration is not None and exc.iteration < 10
        return
    early = log[:10]
    assert any(r.unstable or not np.isfinite(r.max_edge_distortion) for r in early)
    assert max(r.max_edge_distortion for r in early) > 10


def test_regularized_stable_on_same_case():
    cfg = RegistrationConfig(regularization_alpha=1e6, schedule=(("m2p", 20),))
    out, log = register(icosphere(3, 0.5), _clustered_target(0), cfg)
    assert len(log) == 20
    assert np.all(np.isfinite(out.vertices))
    assert not any(r.unstable for r in log)
    assert max(r.max_edge_distortion for r in log) < 10


def test_self_registration():
    m = icosphere(3, 0.4)
    dense = icosphere(5, 0.4)
    out, log = register(m, dense.vertices)
    diag = np.linalg.norm(np.ptp(m.vertices, axis=0))
    assert np.linalg.norm(out.vertices - m.vertices, axis=1).mean() < 1e-3 * diag
    assert len(log) == 20


def test_register_keeps_connectivity(sphere2):
    lab = sphere2.with_labels(np.arange(sphere2.n_vertices) % 4)
    out, _ = register(lab, LabeledPointCloud(sphere2.vertices * 1.1), RegistrationConfig(schedule=(("p2m", 2),)))
    assert np.array_equal(out.faces, lab.faces) and np.array_equal(out.labels, lab.labels)


def test_register_empty_cloud(sphere2):
    with pytest.raises(ValueError):
        register(sphere2, np.zeros((0, 3)))


def test_estimator_and_energy_csv(tmp_path, sphere2):
    est = ARAPRegistration(template=sphere2, schedule=(("m2p", 2), ("p2m", 1))).fit(sphere2.vertices * 1.2)
    assert est.n_iter_ == 3
    path = tmp_path / "energy.csv"
    write_energy_csv(path, est.energy_log_)
    rows = list(csv.DictReader(open(path)))
    assert [r["phase"] for r in rows] == ["m2p", "m2p", "p2m"]
    assert float(rows[-1]["objective"]) == est.energy_log_[-1].objective


def test_edge_distortion_rest_is_one(sphere2):
    assert ArapSystem(sphere2).edge_distortion(sphere2.vertices) == pytest.approx(1.0)
    assert len(unique_edges(sphere2.faces)) == len(ArapSystem(sphere2).edges)


def test_register_translation_equivariant():
    m = icosphere(2, 0.4)
    # random samples: no equidistant neighbours that rounding could flip
    p = np.random.default_rng(0).normal(size=(3000, 3))
    cloud = 0.45 * p / np.linalg.norm(p, axis=1)[:, None] * [1.0, 0.8, 1.2]
    t = np.array([1.5, -0.7, 2.0])
    a, _ = register(m, cloud)
    b, _ = register(m.transformed(None, t), cloud + t)
    assert np.abs(b.vertices - (a.vertices + t)).max() < 1e-6
