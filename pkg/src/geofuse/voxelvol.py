"""Voxel grids, depth fusion, TSDF normals and marching cubes.

Volumes are stored as ``(nx, ny, nz)`` arrays; a flat voxel index is the
C-order index of that array. ``VoxelGrid.origin`` is the centre of voxel
``(0, 0, 0)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import camgeom
from ._mc_tables import CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE

EPS_GRAD = 1e-6


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    origin: np.ndarray
    voxel_size: float = 0.04
    dims: tuple = (2, 2, 2)

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise ValueError(f"grid needs at least 2 voxels per axis, got {self.dims}")

    @classmethod
    def covering(cls, lo, hi, voxel_size: float, margin: int = 2) -> "VoxelGrid":
        """Smallest grid whose voxel centres span [lo, hi] plus ``margin`` voxels each side."""
        lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
        n = np.ceil((hi - lo) / voxel_size - 1e-9).astype(int) + 1 + 2 * margin
        return cls(lo - margin * voxel_size, voxel_size, tuple(n))

    @property
    def num_voxels(self) -> int:
        return int(np.prod(self.dims))

    def axes(self):
        return [self.origin[a] + self.voxel_size * np.arange(self.dims[a]) for a in range(3)]

    def points(self) -> np.ndarray:
        x, y, z = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([x, y, z], axis=-1).reshape(-1, 3)

    def same_as(self, other: "VoxelGrid") -> bool:
        return (self.dims == other.dims and self.voxel_size == other.voxel_size
                and np.array_equal(self.origin, other.origin))


@dataclass
class TsdfVolume:
    grid: VoxelGrid
    values: np.ndarray
    weights: np.ndarray
    observed: np.ndarray
    truncation: float = 0.12

    def __post_init__(self):
        shape = self.grid.dims
        self.values = np.asarray(self.values, dtype=np.float64).reshape(shape)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(shape)
        self.observed = np.asarray(self.observed, dtype=bool).reshape(shape)
        if np.abs(self.values).max(initial=0.0) > 1.0:
            raise ValueError("TSDF values must lie in [-1, 1]")
        if (self.weights < 0).any():
            raise ValueError("weights must be nonnegative")

    @classmethod
    def from_sdf(cls, grid: VoxelGrid, sdf: np.ndarray, truncation: float, observed=None):
        obs = np.ones(grid.dims, bool) if observed is None else np.asarray(observed, bool).reshape(grid.dims)
        s = np.clip(np.asarray(sdf, dtype=np.float64).reshape(grid.dims) / truncation, -1.0, 1.0)
        s = np.where(obs, s, 1.0)
        return cls(grid, s, obs.astype(np.float64), obs, truncation)


@dataclass
class NormalVolume:
    grid: VoxelGrid
    normals: np.ndarray
    defined: np.ndarray


@dataclass
class Mesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))
    vertex_normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.vertex_normals = np.asarray(self.vertex_normals, dtype=np.float64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    def __len__(self):
        return len(self.faces)

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())


def default_truncation(voxel_size: float) -> float:
    return 3.0 * voxel_size


def sorted_sum(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Compensated sum over ``axis`` after sorting, so the result ignores input order."""
    xs = np.sort(x, axis=axis)
    xs = np.moveaxis(xs, axis, 0)
    s = np.zeros(xs.shape[1:])
    c = np.zeros(xs.shape[1:])
    for v in xs:
        t = s + v
        c += np.where(np.abs(s) >= np.abs(v), (s - t) + v, (v - t) + s)
        s = t
    return s + c


def fuse_depth_to_tsdf(views, grid: VoxelGrid, truncation: float | None = None) -> TsdfVolume:
    """Weighted-average fusion of per-view projective TSDFs.

    A view contributes to a voxel when the voxel projects inside its frustum
    and lies no further than one truncation distance behind the observed
    surface. Unobserved voxels keep the empty-space value +1.
    """
    views = list(views)
    if not views:
        raise ValueError("need at least one view to fuse")
    t = default_truncation(grid.voxel_size) if truncation is None else truncation
    pts = grid.points()
    vals, ws = [], []
    for view in views:
        pts_cam = view.pose.world_to_camera(pts)
        pix, z, valid = camgeom.project(pts, view.intrinsics, view.pose)
        raw = np.full(len(pts), -np.inf)
        if valid.any():
            d = view.depth.reshape(-1)[camgeom.nearest_pixel(pix[valid], view.intrinsics.width,
                                                             view.intrinsics.height)]
            raw[valid] = (d - pts_cam[valid, 2]) / t
        use = valid & np.isfinite(raw) & (raw >= -1.0)
        vals.append(np.where(use, np.clip(raw, -1.0, 1.0), 0.0))
        ws.append(use.astype(np.float64))
    W = np.stack(ws)
    wsum = W.sum(axis=0)
    ssum = sorted_sum(np.stack(vals) * W, axis=0)
    observed = wsum > 0
    S = np.where(observed, ssum / np.maximum(wsum, 1.0), 1.0)
    return TsdfVolume(grid, np.clip(S, -1.0, 1.0).reshape(grid.dims), wsum.reshape(grid.dims),
                      observed.reshape(grid.dims), t)


def prewitt_gradient(S: torch.Tensor, voxel_size: float = 1.0) -> torch.Tensor:
    """3D Prewitt gradient of an (nx, ny, nz) tensor on its interior.

    Returns a (3, nx-2, ny-2, nz-2) tensor; each component is a central
    difference averaged over the 3x3 cross-section, divided by ``2 * h * 9``.
    """
    nx, ny, nz = S.shape
    out = []
    for axis in range(3):
        fwd = S.narrow(axis, 2, S.shape[axis] - 2)
        bwd = S.narrow(axis, 0, S.shape[axis] - 2)
        d = fwd - bwd
        for other in range(3):
            if other == axis:
                continue
            n = d.shape[other]
            d = d.narrow(other, 0, n - 2) + d.narrow(other, 1, n - 2) + d.narrow(other, 2, n - 2)
        out.append(d / (18.0 * voxel_size))
    return torch.stack(out)


def _interior_pad(x: np.ndarray, fill) -> np.ndarray:
    out = np.full((x.shape[0],) + tuple(d + 2 for d in x.shape[1:]), fill, dtype=x.dtype)
    out[:, 1:-1, 1:-1, 1:-1] = x
    return out


def stencil_complete(observed: np.ndarray) -> np.ndarray:
    """Voxels away from the grid border whose full 3x3x3 neighbourhood is observed."""
    obs = np.asarray(observed, bool)
    ok = np.zeros_like(obs)
    nx, ny, nz = obs.shape
    inner = np.ones((nx - 2, ny - 2, nz - 2), bool)
    for dx in range(3):
        for dy in range(3):
            for dz in range(3):
                inner &= obs[dx:dx + nx - 2, dy:dy + ny - 2, dz:dz + nz - 2]
    ok[1:-1, 1:-1, 1:-1] = inner
    return ok


def tsdf_normals(vol: TsdfVolume, eps: float = EPS_GRAD) -> NormalVolume:
    """Unit normals ``grad S / |grad S|`` from the Prewitt gradient of the TSDF."""
    if min(vol.grid.dims) < 3:
        raise ValueError("normals need at least 3 voxels per axis")
    g = prewitt_gradient(torch.from_numpy(vol.values), vol.grid.voxel_size).numpy()
    g = _interior_pad(g, 0.0)
    norm = np.linalg.norm(g, axis=0)
    defined = stencil_complete(vol.observed) & (norm >= eps)
    N = np.zeros(vol.grid.dims + (3,))
    N[defined] = (g[:, defined] / norm[defined]).T
    return NormalVolume(vol.grid, N, defined)


_EDGE_AXIS = []
_EDGE_START = []
for a, b in EDGE_CORNERS:
    ca, cb = np.array(CORNER_OFFSETS[a]), np.array(CORNER_OFFSETS[b])
    _EDGE_AXIS.append(int(np.flatnonzero(ca != cb)[0]))
    _EDGE_START.append(np.minimum(ca, cb))
_EDGE_AXIS = np.array(_EDGE_AXIS)
_EDGE_START = np.array(_EDGE_START)
_CORNERS = np.array(CORNER_OFFSETS)
_TRI = [np.array(t, dtype=np.int64).reshape(-1, 3) for t in TRI_TABLE]


def marching_cubes(vol: TsdfVolume, iso: float = 0.0, observed=None) -> Mesh:
    """Extract the ``iso`` level set as a triangle mesh.

    Only cubes whose eight corners are observed are polygonised, so every
    vertex sits on an edge between two observed voxels. Shared edges are
    merged; faces are wound so their normals follow the TSDF gradient.
    """
    S = vol.values
    obs = vol.observed if observed is None else np.asarray(observed, bool)
    nx, ny, nz = S.shape
    corner_vals = np.stack([S[dx:dx + nx - 1, dy:dy + ny - 1, dz:dz + nz - 1]
                            for dx, dy, dz in CORNER_OFFSETS], axis=-1)
    corner_obs = np.stack([obs[dx:dx + nx - 1, dy:dy + ny - 1, dz:dz + nz - 1]
                           for dx, dy, dz in CORNER_OFFSETS], axis=-1)
    case = ((corner_vals < iso) * (1 << np.arange(8))).sum(-1)
    active = corner_obs.all(-1) & (case > 0) & (case < 255)
    cubes = np.argwhere(active)
    if len(cubes) == 0:
        return Mesh()
    cases = case[active]

    tri_cube, tri_edges = [], []
    for c in np.unique(cases):
        tris = _TRI[c]
        sel = np.flatnonzero(cases == c)
        tri_cube.append(np.repeat(sel, len(tris)))
        tri_edges.append(np.tile(tris, (len(sel), 1)))
    tri_cube = np.concatenate(tri_cube)
    tri_edges = np.concatenate(tri_edges)
    order = np.lexsort((np.arange(len(tri_cube)), tri_cube))
    tri_cube, tri_edges = tri_cube[order], tri_edges[order]

    # global edge key: (start voxel, axis)
    start = cubes[tri_cube][:, None, :] + _EDGE_START[tri_edges]
    axis = _EDGE_AXIS[tri_edges]
    key = ((start[..., 0] * ny + start[..., 1]) * nz + start[..., 2]) * 3 + axis
    uniq, inv = np.unique(key.ravel(), return_inverse=True)
    faces = inv.reshape(-1, 3)

    axis_u = uniq % 3
    lin = uniq // 3
    p0 = np.stack(np.unravel_index(lin, (nx, ny, nz)), axis=1)
    p1 = p0 + np.eye(3, dtype=np.int64)[axis_u]
    v0 = S[p0[:, 0], p0[:, 1], p0[:, 2]]
    v1 = S[p1[:, 0], p1[:, 1], p1[:, 2]]
    denom = v1 - v0
    alpha = np.where(np.abs(denom) > 0, (iso - v0) / np.where(denom == 0, 1.0, denom), 0.5)
    alpha = np.clip(alpha, 0.0, 1.0)
    h = vol.grid.voxel_size
    verts = vol.grid.origin + h * (p0 + alpha[:, None] * (p1 - p0))

    g = np.stack(np.gradient(S, h), axis=-1)
    g0 = g[p0[:, 0], p0[:, 1], p0[:, 2]]
    g1 = g[p1[:, 0], p1[:, 1], p1[:, 2]]
    vn = (1 - alpha)[:, None] * g0 + alpha[:, None] * g1

    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    fn = np.cross(b - a, c - a)
    # the table winds faces towards the negative side; flip to follow the gradient
    faces = faces[:, ::-1].copy()
    fn = -fn
    vn = _safe_vertex_normals(vn, faces, fn)
    return Mesh(verts, faces, vn)


def _safe_vertex_normals(vn, faces, face_normals):
    n = np.linalg.norm(vn, axis=1)
    bad = n < 1e-12
    if bad.any():
        acc = np.zeros_like(vn)
        for i in range(3):
            np.add.at(acc, faces[:, i], face_normals)
        vn = np.where(bad[:, None], acc, vn)
        n = np.linalg.norm(vn, axis=1)
        still = n < 1e-12
        vn[still] = (0.0, 0.0, 1.0)
        n[still] = 1.0
    return vn / n[:, None]


def mesh_edges_shared(mesh: Mesh):
    """Map each undirected edge to the number of faces using it."""
    e = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return uniq, counts
