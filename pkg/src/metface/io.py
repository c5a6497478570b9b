"""File formats: OBJ, binary PLY, the MTC1 tensor container, landmark JSON,
PPM (P6) images and PFM (Pf) depth maps."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .geometry import LinearShapeModel, Mesh

MAGIC = b"MTC1"
MODEL_TENSORS = ("mean", "shape_basis", "expr_basis", "landmarks", "kappa", "faces")


class FormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# MTC1

def write_mtc1(path, tensors: dict) -> None:
    """Write named tensors; insertion order is preserved so output is byte-stable."""
    out = bytearray(MAGIC)
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        key = name.encode("utf-8")
        if len(key) > 255:
            raise FormatError(f"tensor name too long: {name}")
        a = np.array(arr, dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
        out += struct.pack("<B", len(key)) + key
        out += struct.pack("<I", a.ndim)
        out += struct.pack(f"<{a.ndim}Q", *a.shape)
        out += a.tobytes(order="C")
    Path(path).write_bytes(bytes(out))


def read_mtc1(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: not an MTC1 file")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    tensors = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            size = int(np.prod(dims, dtype=np.int64))
            a = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            tensors[name] = a.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated MTC1 file") from exc
    return tensors


def save_model(path, model: LinearShapeModel) -> None:
    t = {
        "mean": model.mean,
        "shape_basis": model.shape_basis,
        "expr_basis": model.expr_basis,
        "landmarks": model.landmarks,
        "kappa": model.kappa,
        "faces": model.faces,
    }
    if model.albedo_mean is not None:
        t["albedo_mean"] = model.albedo_mean
        t["albedo_basis"] = model.albedo_basis
    write_mtc1(path, t)


def load_model(path) -> LinearShapeModel:
    t = read_mtc1(path)
    missing = [k for k in MODEL_TENSORS if k not in t]
    if missing:
        raise FormatError(f"{path}: missing tensors {missing}")
    return LinearShapeModel(
        mean=t["mean"],
        shape_basis=t["shape_basis"],
        expr_basis=t["expr_basis"],
        faces=np.rint(t["faces"]).astype(np.int64),
        landmarks=np.rint(t["landmarks"]).astype(np.int64),
        kappa=t["kappa"],
        albedo_mean=t.get("albedo_mean"),
        albedo_basis=t.get("albedo_basis"),
    )


# --------------------------------------------------------------------------
# meshes

def write_obj(path, mesh: Mesh) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> Mesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                faces.append([idx[0], idx[k], idx[k + 1]])
    return Mesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


_PLY_TYPES = {
    "char": "i1", "uchar": "u1", "short": "<i2", "ushort": "<u2", "int": "<i4",
    "uint": "<u4", "float": "<f4", "double": "<f8", "int8": "i1", "uint8": "u1",
    "int16": "<i2", "uint16": "<u2", "int32": "<i4", "uint32": "<u4",
    "float32": "<f4", "float64": "<f8",
}


def write_ply(path, vertices, faces=None, vertex_props: dict | None = None) -> None:
    """Binary little-endian PLY with float32 xyz and int32 face indices.

    ``vertex_props`` adds extra per-vertex uchar properties (e.g. a region mask).
    """
    v = np.asarray(vertices, dtype="<f4").reshape(-1, 3)
    f = np.zeros((0, 3), dtype="<i4") if faces is None else np.asarray(faces, dtype="<i4").reshape(-1, 3)
    vertex_props = vertex_props or {}
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(v)}",
              "property float x", "property float y", "property float z"]
    header += [f"property uchar {name}" for name in vertex_props]
    header += [f"element face {len(f)}", "property list uchar int vertex_indices", "end_header"]
    dt = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")] + [(n, "u1") for n in vertex_props]
    rec = np.empty(len(v), dtype=dt)
    rec["x"], rec["y"], rec["z"] = v.T
    for n, vals in vertex_props.items():
        rec[n] = np.asarray(vals, dtype="u1")
    frec = np.empty(len(f), dtype=[("n", "u1"), ("i", "<i4", (3,))])
    frec["n"] = 3
    frec["i"] = f
    Path(path).write_bytes(("\n".join(header) + "\n").encode("ascii") + rec.tobytes() + frec.tobytes())


def read_ply(path):
    """Returns ``(vertices (N,3) float64, faces (F,3) int64, extra vertex props)``."""
    buf = Path(path).read_bytes()
    end = buf.find(b"end_header")
    if not buf.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header = buf[:end].decode("ascii").splitlines()
    pos = buf.index(b"\n", end) + 1
    if "format binary_little_endian 1.0" not in header:
        raise FormatError(f"{path}: only binary_little_endian PLY is supported")
    elements = []
    for line in header:
        p = line.split()
        if p and p[0] == "element":
            elements.append([p[1], int(p[2]), []])
        elif p and p[0] == "property":
            elements[-1][2].append(p[1:])
    verts = np.zeros((0, 3))
    faces = np.zeros((0, 3), dtype=np.int64)
    props = {}
    for name, count, plist in elements:
        if any(p[0] == "list" for p in plist):
            if len(plist) != 1:
                raise FormatError(f"{path}: unsupported list element layout")
            _, ctype, itype, _ = plist[0]
            cdt, idt = np.dtype(_PLY_TYPES[ctype]), np.dtype(_PLY_TYPES[itype])
            rows = []
            for _ in range(count):
                n = int(np.frombuffer(buf, cdt, 1, pos)[0])
                pos += cdt.itemsize
                rows.append(np.frombuffer(buf, idt, n, pos))
                pos += n * idt.itemsize
            if name == "face":
                tris = []
                for r in rows:
                    tris += [[r[0], r[k], r[k + 1]] for k in range(1, len(r) - 1)]
                faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
            continue
        dt = np.dtype([(p[1], _PLY_TYPES[p[0]]) for p in plist])
        rec = np.frombuffer(buf, dt, count, pos)
        pos += count * dt.itemsize
        if name == "vertex":
            verts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
            props = {n: rec[n].copy() for n in dt.names if n not in ("x", "y", "z")}
    return verts, faces, props


def save_mesh(path, mesh: Mesh) -> None:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        write_obj(path, mesh)
    else:
        write_ply(path, mesh.vertices, mesh.faces)


def load_mesh(path) -> Mesh:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        return read_obj(path)
    v, f, _ = read_ply(path)
    return Mesh(v, f)


# --------------------------------------------------------------------------
# landmarks

def write_landmarks_3d(path, names, positions) -> None:
    data = [{"name": str(n), "position": [float(c) for c in p]} for n, p in zip(names, positions)]
    Path(path).write_text(json.dumps(data, indent=1))


def read_landmarks_3d(path) -> dict:
    """Name -> 3D position (meters)."""
    data = json.loads(Path(path).read_text())
    return {d["name"]: np.asarray(d["position"], dtype=float) for d in data}


def write_landmarks_2d(path, names, pixels, conf=None) -> None:
    conf = np.ones(len(names)) if conf is None else conf
    data = [{"name": str(n), "px": [float(u), float(v)], "conf": float(c)}
            for n, (u, v), c in zip(names, pixels, conf)]
    Path(path).write_text(json.dumps(data, indent=1))


def read_landmarks_2d(path):
    """Returns ``(names, pixels (L,2), confidences (L,))``."""
    data = json.loads(Path(path).read_text())
    names = [d["name"] for d in data]
    px = np.array([d["px"] for d in data], dtype=float).reshape(-1, 2)
    conf = np.array([d.get("conf", 1.0) for d in data], dtype=float)
    return names, px, conf


def write_landmark_map(path, mapping: dict) -> None:
    Path(path).write_text(json.dumps({k: int(v) for k, v in mapping.items()}, indent=1, sort_keys=True))


def read_landmark_map(path) -> dict:
    return {k: int(v) for k, v in json.loads(Path(path).read_text()).items()}


# --------------------------------------------------------------------------
# images

def write_ppm(path, image) -> None:
    """RGB float image in [0, 1] to 8-bit binary PPM."""
    img = np.asarray(image, dtype=float)
    h, w = img.shape[:2]
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def _read_header_tokens(buf, n):
    tokens, pos = [], 0
    while len(tokens) < n:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos].decode("ascii"))
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _read_header_tokens(buf, 4)
    if magic != "P6":
        raise FormatError(f"{path}: not a P6 image")
    w, h, maxval = int(w), int(h), int(maxval)
    dt = np.uint8 if maxval < 256 else ">u2"
    data = np.frombuffer(buf, dt, w * h * 3, pos).reshape(h, w, 3)
    return data.astype(np.float64) / maxval


def write_pfm(path, depth) -> None:
    """Single-channel little-endian PFM; rows are stored bottom-to-top."""
    d = np.asarray(depth, dtype="<f4")
    h, w = d.shape
    Path(path).write_bytes(f"Pf\n{w} {h}\n-1.0\n".encode("ascii") + np.flipud(d).tobytes())


def read_pfm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, scale), pos = _read_header_tokens(buf, 4)
    if magic != "Pf":
        raise FormatError(f"{path}: not a grayscale PFM")
    w, h, scale = int(w), int(h), float(scale)
    dt = "<f4" if scale < 0 else ">f4"
    return np.flipud(np.frombuffer(buf, dt, w * h, pos).reshape(h, w)).astype(np.float64)
