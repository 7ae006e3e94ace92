import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from bsv.cli import BOXES, EXIT_CODES, main
from bsv.io import load_cloud, load_mesh, load_transform, save_mesh
from bsv.mesh import box, submesh
from bsv.metrics import read_report_json
from bsv.pointcloud import merge
from bsv.scan import CALIBRATION_MEANS, rig_cameras

FILES = ("front_cloud.ply", "back_cloud.ply", "front_depth.bin", "back_depth.bin",
         "front_transform.json", "back_transform.json", "capture.json")


@pytest.fixture(scope="module")
def box1(tmp_path_factory):
    d = tmp_path_factory.mktemp("gen")
    assert main(["generate", "box1", "--out", str(d)]) == 0
    return str(d / "box1.ply")


@pytest.fixture(scope="module")
def box1_capture(tmp_path_factory, box1):
    d = tmp_path_factory.mktemp("cap")
    assert main(["simulate", "--mesh", box1, "--seed", "0", "--condition", "noer", "--out", str(d)]) == 0
    return str(d)


def _read(d, name):
    with open(os.path.join(d, name), "rb") as fh:
        return fh.read()


def test_version():
    out = subprocess.run([sys.executable, "-m", "bsv.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "bsv.volume_report/1" in out.stdout and "bsv.capture/1" in out.stdout


def test_simulate_writes_artifacts(box1_capture):
    for f in FILES:
        assert os.path.isfile(os.path.join(box1_capture, f)), f
    meta = json.loads(_read(box1_capture, "capture.json"))
    assert meta["synthetic"] is True and meta["condition"] == "NoEr"


def test_simulate_points_on_box(box1_capture):
    f, b = (load_cloud(os.path.join(box1_capture, n + "_cloud.ply")) for n in ("front", "back"))
    tf, tb = (load_transform(os.path.join(box1_capture, n + "_transform.json")) for n in ("front", "back"))
    p = merge(f, b, tf, tb).points
    # undo the 45 degree yaw and the lift onto the floor
    half = np.array(BOXES["box1"]) / 2
    q = (p - [0, 0, half[2]]) @ Rotation.from_euler("z", 45, degrees=True).as_matrix()
    gap = (half - np.abs(q)).min(axis=1)
    assert len(p) > 10000
    # depth files are 32-bit, so the bound covers float rounding at 2 m
    assert np.abs(gap).max() < 1e-5


def test_simulate_byte_identical(tmp_path, box1, box1_capture):
    assert main(["simulate", "--mesh", box1, "--seed", "0", "--condition", "noer", "--out", str(tmp_path)]) == 0
    for f in FILES:
        assert _read(tmp_path, f) == _read(box1_capture, f), f


def test_simulate_l5ca_offsets(tmp_path, box1):
    assert main(["simulate", "--mesh", box1, "--seed", "3", "--condition", "l5ca", "--out", str(tmp_path)]) == 0
    true = dict(zip(("front", "back"), (c.pose for c in rig_cameras())))
    for name in ("front", "back"):
        rel = true[name].inverse() @ load_transform(os.path.join(tmp_path, name + "_transform.json"))
        t = np.array(CALIBRATION_MEANS[name]["translation_cm"])[[1, 0, 2]] / 100
        assert np.allclose(rel.translation, t, atol=1e-12)


def test_register_and_volumes_box1(tmp_path, box1, box1_capture):
    fit_dir, vol_dir = tmp_path / "fit", tmp_path / "vol"
    assert main(["register", "--clouds", box1_capture, "--out", str(fit_dir)]) == 0
    for f in ("merged_cloud.ply", "aligned_template.ply", "fitted.ply", "energy.csv"):
        assert (fit_dir / f).is_file()
    rows = list(csv.DictReader(open(fit_dir / "energy.csv")))
    assert len(rows) == 20
    assert main(["volumes", "--fitted", str(fit_dir / "fitted.ply"), "--ground-truth", box1,
                 "--mass", "171", "--out", str(vol_dir)]) == 0
    rep = read_report_json(vol_dir / "volumes.json")
    assert rep.whole_body.rve < 1.0
    assert rep.rme is not None


def test_evaluate_box(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[evaluate]\nsubjects = box1\nconditions = noer, l515\nrepeats = 1\n"
                   "[run]\nseed = 5\n[registration]\nschedule = m2p:3,p2m:2,m2p:3\n")
    assert main(["evaluate", "--config", str(cfg), "--out", str(tmp_path / "ev")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "ev" / "aggregate.csv")))
    assert [r["condition"] for r in rows] == ["NoEr", "L515"]
    assert not (tmp_path / "ev" / "failures.json").exists()


def test_exit_missing_seed(tmp_path, box1):
    assert main(["simulate", "--mesh", box1, "--out", str(tmp_path)]) == EXIT_CODES["usage"]


def test_exit_missing_mesh(tmp_path):
    code = main(["simulate", "--mesh", str(tmp_path / "nope.ply"), "--seed", "1", "--out", str(tmp_path)])
    assert code == EXIT_CODES["input"]


def test_exit_open_mesh(tmp_path):
    m = box((0.5, 0.5, 0.5), 2, center=(0, 0, 1))
    save_mesh(tmp_path / "open.ply", submesh(m, np.arange(m.n_faces) > 0))
    code = main(["simulate", "--mesh", str(tmp_path / "open.ply"), "--seed", "1", "--out", str(tmp_path / "o")])
    assert code == EXIT_CODES["simulate"]


def test_exit_missing_capture(tmp_path):
    assert main(["register", "--clouds", str(tmp_path / "none"), "--out", str(tmp_path)]) == EXIT_CODES["input"]


def test_exit_bad_config_value(tmp_path, box1_capture):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[registration]\nregularization_alpha = -3\n")
    code = main(["register", "--config", str(cfg), "--clouds", box1_capture, "--out", str(tmp_path)])
    assert code == EXIT_CODES["usage"]


def test_exit_codes_distinct():
    stages = ["usage", "input", "simulate", "label", "clean", "register", "volumes", "evaluate"]
    codes = [EXIT_CODES[s] for s in stages]
    assert len(set(codes)) == len(codes) and 0 not in codes


def test_generate_template(tmp_path):
    assert main(["generate", "template", "--out", str(tmp_path)]) == 0
    assert load_mesh(tmp_path / "template.ply").labels is not None
