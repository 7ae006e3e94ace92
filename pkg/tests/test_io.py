import numpy as np
import pytest

from bsv.io import (FormatError, load_cloud, load_depth, load_label_grid, load_landmarks, load_mesh,
                    load_transform, read_obj, save_cloud, save_depth, save_label_grid,
                    save_landmarks, save_mesh, save_transform, write_obj)
from bsv.mesh import box
from bsv.pointcloud import LabeledPointCloud, RigidTransform
from bsv.scan import VirtualCamera


@pytest.mark.parametrize("binary", [True, False])
def test_mesh_roundtrip(tmp_path, binary):
    m = box((1, 2, 3), 2).with_labels(np.arange(26) % 14)
    save_mesh(tmp_path / "m.ply", m, binary=binary)
    back = load_mesh(tmp_path / "m.ply")
    assert np.array_equal(back.faces, m.faces) and np.array_equal(back.labels, m.labels)
    assert np.allclose(back.vertices, m.vertices)


def test_cloud_roundtrip(tmp_path, rng):
    pc = LabeledPointCloud(rng.normal(size=(40, 3)), rng.integers(0, 14, 40))
    save_cloud(tmp_path / "c.ply", pc)
    back = load_cloud(tmp_path / "c.ply")
    assert np.array_equal(back.points, pc.points) and np.array_equal(back.labels, pc.labels)


def test_obj_roundtrip(tmp_path):
    m = box()
    write_obj(tmp_path / "m.obj", m.vertices, m.faces)
    v, f = read_obj(tmp_path / "m.obj")
    assert np.array_equal(f, m.faces) and np.allclose(v, m.vertices)


def test_grids(tmp_path, rng):
    d = rng.uniform(0, 3, size=(6, 8)).astype(np.float32)
    save_depth(tmp_path / "d.bin", d, VirtualCamera())
    back, meta = load_depth(tmp_path / "d.bin")
    assert np.array_equal(back, d) and meta["fx"] == 735.0
    lab = rng.integers(0, 256, size=(5, 7)).astype(np.uint8)
    save_label_grid(tmp_path / "l.bin", lab)
    assert np.array_equal(load_label_grid(tmp_path / "l.bin"), lab)


def test_grid_bad_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"nope\n")
    with pytest.raises(FormatError):
        load_depth(tmp_path / "x.bin")


def test_json_files(tmp_path):
    T = RigidTransform.from_euler([1, 2, 3], [0.1, 0.2, 0.3])
    save_transform(tmp_path / "t.json", T)
    assert np.allclose(load_transform(tmp_path / "t.json").as_matrix(), T.as_matrix())
    save_landmarks(tmp_path / "lm.json", {"left_hip": (1.0, 2.0, 0.9)})
    assert load_landmarks(tmp_path / "lm.json") == {"left_hip": (1.0, 2.0, 0.9)}
