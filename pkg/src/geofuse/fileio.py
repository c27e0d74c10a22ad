"""On-disk formats: TSDF volumes, PLY/OBJ meshes, rendered views. All writes are atomic."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .camgeom import CameraIntrinsics, CameraPose
from .synth import CameraView
from .voxelvol import Mesh, TsdfVolume, VoxelGrid

TSDF_MAGIC = "geofuse-tsdf-v1"
VIEW_MAGIC = "geofuse-view-v1"


def atomic_write(path, data: bytes | str) -> Path:
    """Write to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _xfast(a: np.ndarray) -> np.ndarray:
    """(nx, ny, nz) array flattened with x varying fastest."""
    return np.asarray(a).transpose(2, 1, 0).ravel()


def _from_xfast(flat: np.ndarray, dims) -> np.ndarray:
    nx, ny, nz = dims
    return flat.reshape(nz, ny, nx).transpose(2, 1, 0).copy()


def tsdf_bytes(vol: TsdfVolume) -> bytes:
    g = vol.grid
    header = {"format": TSDF_MAGIC, "origin": [float(x) for x in g.origin],
              "voxel_size": float(g.voxel_size), "dims": list(g.dims),
              "truncation": float(vol.truncation), "endianness": "little"}
    parts = [json.dumps(header, sort_keys=True).encode() + b"\n",
             _xfast(vol.values).astype("<f4").tobytes(),
             _xfast(vol.weights).astype("<f4").tobytes(),
             np.packbits(_xfast(vol.observed).astype(np.uint8), bitorder="little").tobytes()]
    return b"".join(parts)


def write_tsdf(path, vol: TsdfVolume) -> Path:
    return atomic_write(path, tsdf_bytes(vol))


def read_tsdf(path) -> TsdfVolume:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    h = json.loads(raw[:nl])
    if h.get("format") != TSDF_MAGIC or h.get("endianness") != "little":
        raise ValueError("not a little-endian TSDF file")
    dims = tuple(h["dims"])
    n = int(np.prod(dims))
    off = nl + 1
    vals = np.frombuffer(raw, "<f4", n, off).astype(np.float64)
    wts = np.frombuffer(raw, "<f4", n, off + 4 * n).astype(np.float64)
    bits = np.frombuffer(raw, np.uint8, (n + 7) // 8, off + 8 * n)
    obs = np.unpackbits(bits, bitorder="little")[:n].astype(bool)
    grid = VoxelGrid(np.array(h["origin"]), h["voxel_size"], dims)
    return TsdfVolume(grid, _from_xfast(vals, dims), _from_xfast(wts, dims),
                      _from_xfast(obs, dims), h["truncation"])


def ply_bytes(mesh: Mesh) -> bytes:
    nv, nf = len(mesh.vertices), len(mesh.faces)
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {nv}\nproperty float x\nproperty float y\nproperty float z\n"
              "property float nx\nproperty float ny\nproperty float nz\n"
              f"element face {nf}\nproperty list uchar int vertex_indices\nend_header\n")
    vdt = np.dtype([("p", "<f4", 3), ("n", "<f4", 3)])
    v = np.empty(nv, vdt)
    v["p"] = mesh.vertices
    v["n"] = mesh.vertex_normals
    fdt = np.dtype([("k", "u1"), ("i", "<i4", 3)])
    f = np.empty(nf, fdt)
    f["k"] = 3
    f["i"] = mesh.faces
    return header.encode() + v.tobytes() + f.tobytes()


def write_ply(path, mesh: Mesh) -> Path:
    return atomic_write(path, ply_bytes(mesh))


def read_ply(path) -> Mesh:
    """Reader for binary little-endian PLY as written by ``write_ply`` (faces optional)."""
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    lines = raw[:end].decode().splitlines()
    if lines[0] != "ply" or "binary_little_endian" not in lines[1]:
        raise ValueError("expected a binary little-endian PLY")
    nv = nf = 0
    vprops = []
    elem = None
    for ln in lines:
        t = ln.split()
        if t[0] == "element":
            elem = t[1]
            if elem == "vertex":
                nv = int(t[2])
            elif elem == "face":
                nf = int(t[2])
        elif t[0] == "property" and elem == "vertex":
            if t[1] not in ("float", "float32"):
                raise ValueError("only float vertex properties are supported")
            vprops.append(t[2])
    vdt = np.dtype([(p, "<f4") for p in vprops])
    v = np.frombuffer(raw, vdt, nv, end)
    pts = np.stack([v["x"], v["y"], v["z"]], 1).astype(np.float64)
    if {"nx", "ny", "nz"} <= set(vprops):
        nrm = np.stack([v["nx"], v["ny"], v["nz"]], 1).astype(np.float64)
    else:
        nrm = np.zeros_like(pts)
    faces = np.zeros((0, 3), np.int64)
    if nf:
        fdt = np.dtype([("k", "u1"), ("i", "<i4", 3)])
        f = np.frombuffer(raw, fdt, nf, end + nv * vdt.itemsize)
        if np.any(f["k"] != 3):
            raise ValueError("only triangle faces are supported")
        faces = f["i"].astype(np.int64)
    return Mesh(pts, faces, nrm)


def obj_text(mesh: Mesh) -> str:
    out = [f"v {x:.7g} {y:.7g} {z:.7g}" for x, y, z in mesh.vertices]
    out += [f"vn {x:.7g} {y:.7g} {z:.7g}" for x, y, z in mesh.vertex_normals]
    out += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in mesh.faces + 1]
    return "\n".join(out) + "\n"


def write_obj(path, mesh: Mesh) -> Path:
    return atomic_write(path, obj_text(mesh))


def write_mesh(path, mesh: Mesh) -> Path:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return write_ply(path, mesh)
    if suffix == ".obj":
        return write_obj(path, mesh)
    raise ValueError(f"unsupported mesh format {suffix!r}")


def write_points_ply(path, points: np.ndarray, normals: np.ndarray | None = None) -> Path:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    nrm = np.zeros_like(pts) if normals is None else np.asarray(normals, dtype=np.float64)
    return write_ply(path, Mesh(pts, np.zeros((0, 3), np.int64), nrm))


def write_view(directory, name: str, view) -> Path:
    """One JSON header plus one little-endian float64 blob holding depth, normals and features."""
    directory = Path(directory)
    H, W = view.depth.shape
    header = {"format": VIEW_MAGIC, "width": W, "height": H,
              "fx": view.intrinsics.fx, "fy": view.intrinsics.fy,
              "cx": view.intrinsics.cx, "cy": view.intrinsics.cy,
              "rotation": view.pose.rotation.tolist(), "translation": view.pose.translation.tolist(),
              "channels": int(view.features.shape[0]), "blob": f"{name}.bin",
              "layout": ["depth (H, W)", "normal (H, W, 3)", "features (C, H, W)"]}
    blob = np.concatenate([view.depth.ravel(), view.normal_map.ravel(), view.features.ravel()])
    atomic_write(directory / f"{name}.bin", blob.astype("<f8").tobytes())
    return atomic_write(directory / f"{name}.json", json.dumps(header, indent=1, sort_keys=True))


def read_view(header_path):
    header_path = Path(header_path)
    h = json.loads(header_path.read_text())
    if h.get("format") != VIEW_MAGIC:
        raise ValueError(f"{header_path} is not a view header")
    H, W, C = h["height"], h["width"], h["channels"]
    blob = np.frombuffer((header_path.parent / h["blob"]).read_bytes(), "<f8")
    if blob.size != H * W * (4 + C):
        raise ValueError("view blob size does not match its header")
    depth = blob[:H * W].reshape(H, W).copy()
    normal = blob[H * W:4 * H * W].reshape(H, W, 3).copy()
    feats = blob[4 * H * W:].reshape(C, H, W).copy()
    K = CameraIntrinsics(h["fx"], h["fy"], h["cx"], h["cy"], W, H)
    P = CameraPose(np.array(h["rotation"]), np.array(h["translation"]))
    return CameraView(K, P, depth, normal, feats)
