"""File formats: PLY/OBJ meshes and clouds, raw depth/label grids, landmarks."""
from __future__ import annotations

import json
import os

import numpy as np

from .mesh import TriangleMesh

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}

DEPTH_MAGIC = "BSVDEPTH 1"
LABEL_MAGIC = "BSVLABEL 1"


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- PLY

def _parse_ply_header(fh):
    line = fh.readline().strip()
    if line != b"ply":
        raise FormatError("not a PLY file")
    fmt = None
    elements = []
    while True:
        raw = fh.readline()
        if not raw:
            raise FormatError("PLY header not terminated")
        tok = raw.decode("ascii").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append({"name": tok[1], "count": int(tok[2]), "props": []})
        elif tok[0] == "property":
            if tok[1] == "list":
                elements[-1]["props"].append((tok[4], "list", tok[2], tok[3]))
            else:
                elements[-1]["props"].append((tok[2], tok[1]))
        elif tok[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise FormatError("unsupported PLY format %r" % fmt)
    return fmt, elements


def _read_ply_binary(fh, elements, endian):
    data = {}
    for el in elements:
        props = el["props"]
        if all(len(p) == 2 for p in props):
            dt = np.dtype([(p[0], endian + _PLY_TYPES[p[1]]) for p in props])
            buf = fh.read(dt.itemsize * el["count"])
            data[el["name"]] = np.frombuffer(buf, dtype=dt, count=el["count"])
            continue
        if len(props) == 1:
            # all-triangle fast path; fall back to row parsing otherwise
            p = props[0]
            ct = np.dtype(endian + _PLY_TYPES[p[2]])
            it = np.dtype(endian + _PLY_TYPES[p[3]])
            dt = np.dtype([("n", ct), ("idx", it, 3)])
            pos = fh.tell()
            arr = np.frombuffer(fh.read(dt.itemsize * el["count"]), dtype=dt)
            if len(arr) == el["count"] and np.all(arr["n"] == 3):
                data[el["name"]] = [{p[0]: r} for r in arr["idx"].astype(np.int64)]
                continue
            fh.seek(pos)
        rows = []
        for _ in range(el["count"]):
            row = {}
            for p in props:
                if len(p) == 2:
                    dt = np.dtype(endian + _PLY_TYPES[p[1]])
                    row[p[0]] = np.frombuffer(fh.read(dt.itemsize), dt)[0]
                else:
                    ct = np.dtype(endian + _PLY_TYPES[p[2]])
                    it = np.dtype(endian + _PLY_TYPES[p[3]])
                    k = int(np.frombuffer(fh.read(ct.itemsize), ct)[0])
                    row[p[0]] = np.frombuffer(fh.read(it.itemsize * k), it).copy()
            rows.append(row)
        data[el["name"]] = rows
    return data


def _read_ply_ascii(fh, elements):
    data = {}
    for el in elements:
        props = el["props"]
        rows = []
        for _ in range(el["count"]):
            vals = fh.readline().split()
            row, pos = {}, 0
            for p in props:
                if len(p) == 2:
                    row[p[0]] = float(vals[pos])
                    pos += 1
                else:
                    k = int(vals[pos])
                    row[p[0]] = np.array(vals[pos + 1:pos + 1 + k], dtype=np.int64)
                    pos += 1 + k
            rows.append(row)
        if all(len(p) == 2 for p in props):
            dt = np.dtype([(p[0], _PLY_TYPES[p[1]]) for p in props])
            arr = np.zeros(el["count"], dtype=dt)
            for p in props:
                arr[p[0]] = [r[p[0]] for r in rows]
            data[el["name"]] = arr
        else:
            data[el["name"]] = rows
    return data


def read_ply(path):
    """Return ``(vertex_record_array, faces_or_None)``."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh)
        if fmt == "ascii":
            data = _read_ply_ascii(fh, elements)
        else:
            data = _read_ply_binary(fh, elements, "<" if fmt == "binary_little_endian" else ">")
    vert = data.get("vertex")
    if vert is None:
        raise FormatError("PLY has no vertex element")
    faces = None
    if "face" in data:
        f = data["face"]
        key = [p for p in f[0].keys()][0] if f else "vertex_indices"
        polys = [np.asarray(r[key], dtype=np.int64) for r in f]
        tris = []
        for poly in polys:
            for k in range(1, len(poly) - 1):
                tris.append((poly[0], poly[k], poly[k + 1]))
        faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    return vert, faces


def _vertex_fields(points, labels=None, colors=None):
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    if labels is not None:
        fields += [("segment", "u1")]
    arr = np.zeros(len(points), dtype=fields)
    arr["x"], arr["y"], arr["z"] = points[:, 0], points[:, 1], points[:, 2]
    if colors is not None:
        arr["red"], arr["green"], arr["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]
    if labels is not None:
        arr["segment"] = labels
    return arr


_PLY_NAMES = {"<f8": "double", "u1": "uchar"}


def write_ply(path, points, faces=None, labels=None, colors=None, binary=True):
    points = np.asarray(points, dtype=np.float64)
    arr = _vertex_fields(points, labels, colors)
    head = ["ply", "format %s 1.0" % ("binary_little_endian" if binary else "ascii"),
            "element vertex %d" % len(points)]
    for name in arr.dtype.names:
        head.append("property %s %s" % (_PLY_NAMES[arr.dtype[name].str.lstrip("|")], name))
    if faces is not None:
        head += ["element face %d" % len(faces), "property list uchar int vertex_indices"]
    head.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode("ascii"))
        if binary:
            fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
            if faces is not None:
                fdt = np.dtype([("n", "u1"), ("idx", "<i4", 3)])
                fa = np.zeros(len(faces), dtype=fdt)
                fa["n"] = 3
                fa["idx"] = faces
                fh.write(fa.tobytes())
        else:
            for row in arr:
                fh.write((" ".join(_fmt(row[n]) for n in arr.dtype.names) + "\n").encode())
            if faces is not None:
                for f in faces:
                    fh.write(("3 %d %d %d\n" % tuple(f)).encode())


def _fmt(x):
    if isinstance(x, (np.floating, float)):
        return repr(float(x))
    return str(int(x))


def load_mesh(path) -> TriangleMesh:
    """Read a PLY or OBJ mesh and enforce outward orientation."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".obj":
        v, f = read_obj(path)
        labels = None
    else:
        vert, f = read_ply(path)
        if f is None:
            raise FormatError("%s has no faces" % path)
        v = np.stack([vert["x"], vert["y"], vert["z"]], axis=1).astype(np.float64)
        labels = np.asarray(vert["segment"], dtype=np.uint8) if "segment" in vert.dtype.names else None
    return TriangleMesh(v, f, labels).oriented_outward()


def save_mesh(path, mesh: TriangleMesh, binary=True):
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".obj":
        write_obj(path, mesh.vertices, mesh.faces)
    else:
        write_ply(path, mesh.vertices, mesh.faces, labels=mesh.labels, binary=binary)


def read_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(t) for t in tok[1:4]])
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) for t in tok[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def write_obj(path, vertices, faces):
    with open(path, "w") as fh:
        for v in vertices:
            fh.write("v %r %r %r\n" % (float(v[0]), float(v[1]), float(v[2])))
        for f in faces:
            fh.write("f %d %d %d\n" % (f[0] + 1, f[1] + 1, f[2] + 1))


def load_cloud(path):
    from .pointcloud import LabeledPointCloud
    vert, _ = read_ply(path)
    pts = np.stack([vert["x"], vert["y"], vert["z"]], axis=1).astype(np.float64)
    names = vert.dtype.names
    labels = np.asarray(vert["segment"], np.uint8) if "segment" in names else None
    colors = None
    if {"red", "green", "blue"} <= set(names):
        colors = np.stack([vert["red"], vert["green"], vert["blue"]], axis=1).astype(np.uint8)
    return LabeledPointCloud(pts, labels, colors)


def save_cloud(path, cloud, binary=True):
    write_ply(path, cloud.points, labels=cloud.labels, colors=cloud.colors, binary=binary)


# ---------------------------------------------------------------- raw grids

def _write_grid(path, magic, array, dtype, meta):
    arr = np.ascontiguousarray(array, dtype=dtype)
    h, w = arr.shape
    lines = [magic, "width %d" % w, "height %d" % h]
    lines += ["%s %r" % (k, float(v)) for k, v in meta.items()]
    lines.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(arr.tobytes())


def _read_grid(path, magic, dtype):
    with open(path, "rb") as fh:
        if fh.readline().decode("ascii").strip() != magic:
            raise FormatError("%s: expected %r header" % (path, magic))
        meta = {}
        while True:
            line = fh.readline().decode("ascii").strip()
            if line == "end_header":
                break
            if not line:
                raise FormatError("%s: truncated header" % path)
            k, v = line.split(None, 1)
            meta[k] = float(v)
        w, h = int(meta.pop("width")), int(meta.pop("height"))
        buf = fh.read()
    dt = np.dtype(dtype)
    if len(buf) != w * h * dt.itemsize:
        raise FormatError("%s: payload size does not match %dx%d" % (path, w, h))
    return np.frombuffer(buf, dtype=dt).reshape(h, w).copy(), meta


def save_depth(path, depth, camera=None):
    """32-bit little-endian float grid with a text header carrying intrinsics."""
    meta = {}
    if camera is not None:
        meta = {"fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy}
    _write_grid(path, DEPTH_MAGIC, depth, "<f4", meta)


def load_depth(path):
    return _read_grid(path, DEPTH_MAGIC, "<f4")


def save_label_grid(path, labels):
    _write_grid(path, LABEL_MAGIC, labels, "u1", {})


def load_label_grid(path):
    return _read_grid(path, LABEL_MAGIC, "u1")[0]


# ---------------------------------------------------------------- json

def save_landmarks(path, landmarks):
    with open(path, "w") as fh:
        json.dump({k: [float(x) for x in v] for k, v in landmarks.items()}, fh, indent=1, sort_keys=True)


def load_landmarks(path):
    with open(path) as fh:
        raw = json.load(fh)
    return {k: tuple(float(x) for x in v) for k, v in raw.items()}


def save_transform(path, transform):
    with open(path, "w") as fh:
        json.dump({"rotation": transform.rotation.tolist(),
                   "translation": transform.translation.tolist()}, fh, indent=1)


def load_transform(path):
    from .pointcloud import RigidTransform
    with open(path) as fh:
        d = json.load(fh)
    return RigidTransform(np.array(d["rotation"]), np.array(d["translation"]))

