"""Pinhole cameras, projection and the per-view geometric priors.

Poses are camera-to-world: ``x_world = R @ x_cam + t``. Pixel coordinates
put pixel centres on integers, ``u = fx * x / z + cx``; a projection is
valid when ``0 <= u < width``, ``0 <= v < height`` and ``0 < z <= D_MAX``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

D_MAX = 3.0
ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float = 90.0) -> "CameraIntrinsics":
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        check_rotation(R)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "CameraPose":
        """Camera at ``eye`` with its +z axis pointing at ``target`` (y down in image)."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return cls(np.stack([right, down, fwd], axis=1), eye)

    def world_to_camera(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts) - self.translation) @ self.rotation

    def camera_to_world(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def transformed(self, R: np.ndarray, t: np.ndarray) -> "CameraPose":
        """Apply the rigid motion ``x -> R x + t`` to the camera."""
        return CameraPose(R @ self.rotation, R @ self.translation + t)


def as_points(grid_or_points) -> np.ndarray:
    """Voxel centres of a grid, or an (N, 3) point array passed through."""
    if hasattr(grid_or_points, "points"):
        return grid_or_points.points()
    return np.asarray(grid_or_points, dtype=np.float64).reshape(-1, 3)


def check_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> None:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ValueError("rotation must be a finite 3x3 matrix")
    if np.abs(R.T @ R - np.eye(3)).max() >= tol:
        raise ValueError("rotation is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) >= tol:
        raise ValueError("rotation has det != +1")


def project(points, K: CameraIntrinsics, P: CameraPose, d_max: float = D_MAX):
    """Project world points. Returns ``(pixels [...,2], depth [...], valid [...])``."""
    pts = np.asarray(points, dtype=np.float64)
    cam = P.world_to_camera(pts)
    z = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * cam[..., 0] / z + K.cx
        v = K.fy * cam[..., 1] / z + K.cy
    pix = np.stack([u, v], axis=-1)
    valid = (z > 0) & (z <= d_max) & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    return pix, z, valid


def backproject(pixels, depth, K: CameraIntrinsics, P: CameraPose) -> np.ndarray:
    """Lift pixels at the given camera-frame depth back into world space."""
    pix = np.asarray(pixels, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    x = (pix[..., 0] - K.cx) / K.fx * z
    y = (pix[..., 1] - K.cy) / K.fy * z
    return P.camera_to_world(np.stack([x, y, z], axis=-1))


def pixel_rays(K: CameraIntrinsics) -> np.ndarray:
    """Unnormalised camera-frame ray directions (H, W, 3) with unit z."""
    v, u = np.meshgrid(np.arange(K.height, dtype=np.float64),
                       np.arange(K.width, dtype=np.float64), indexing="ij")
    return np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)


def bilinear_taps(pix: np.ndarray, width: int, height: int):
    """Four flat pixel indices and weights for bilinear sampling at ``pix`` (N, 2).

    Samples outside the pixel-centre lattice are clamped to the border.
    """
    u = np.clip(pix[:, 0], 0.0, width - 1.0)
    v = np.clip(pix[:, 1], 0.0, height - 1.0)
    u0 = np.minimum(np.floor(u).astype(np.int64), width - 2) if width > 1 else np.zeros(len(u), np.int64)
    v0 = np.minimum(np.floor(v).astype(np.int64), height - 2) if height > 1 else np.zeros(len(v), np.int64)
    au, av = u - u0, v - v0
    u1 = np.minimum(u0 + 1, width - 1)
    v1 = np.minimum(v0 + 1, height - 1)
    idx = np.stack([v0 * width + u0, v0 * width + u1, v1 * width + u0, v1 * width + u1], axis=1)
    w = np.stack([(1 - au) * (1 - av), au * (1 - av), (1 - au) * av, au * av], axis=1)
    return idx, w


def nearest_pixel(pix: np.ndarray, width: int, height: int) -> np.ndarray:
    u = np.clip(np.rint(pix[:, 0]), 0, width - 1).astype(np.int64)
    v = np.clip(np.rint(pix[:, 1]), 0, height - 1).astype(np.int64)
    return v * width + u


def sample_bilinear(image: np.ndarray, pix: np.ndarray) -> np.ndarray:
    """Sample an (H, W, C) or (H, W) image at pixel positions (N, 2)."""
    H, W = image.shape[:2]
    idx, w = bilinear_taps(pix, W, H)
    flat = image.reshape(H * W, -1)
    out = np.einsum("nk,nkc->nc", w, flat[idx])
    return out if image.ndim == 3 else out[:, 0]


@dataclass
class GeoPriors:
    """Per-voxel priors of one view. Arrays are (N, 3) or (N,); invalid rows are zero."""

    view_dir: np.ndarray
    proj_depth: np.ndarray
    view_angle: np.ndarray
    proj_normal: np.ndarray
    valid: np.ndarray


def compute_geo_priors(points: np.ndarray, view, d_max: float = D_MAX) -> GeoPriors:
    """Viewing direction, normalised depth, viewing angle and projected normal per voxel.

    ``points`` is a VoxelGrid or world voxel centres (N, 3); ``view`` needs ``intrinsics``,
    ``pose`` and a camera-frame ``normal_map`` (H, W, 3).
    """
    K, P = view.intrinsics, view.pose
    pts = as_points(points)
    pix, z, valid = project(pts, K, P, d_max)
    cam = P.world_to_camera(pts)
    n = len(pts)
    v_world = np.zeros((n, 3))
    v_cam = np.zeros((n, 3))
    normals = np.zeros((n, 3))
    if valid.any():
        vc = cam[valid]
        vc = vc / np.linalg.norm(vc, axis=1, keepdims=True)
        v_cam[valid] = vc
        v_world[valid] = vc @ P.rotation.T
        nm = sample_bilinear(view.normal_map, pix[valid])
        nn = np.linalg.norm(nm, axis=1)
        ok = nn > 1e-9
        nm[ok] /= nn[ok, None]
        nm[~ok] = 0.0
        normals[valid] = nm
        sub = np.flatnonzero(valid)[~ok]
        valid[sub] = False
        v_world[sub] = 0.0
        v_cam[sub] = 0.0
    angle = np.abs(np.einsum("nc,nc->n", normals, v_cam))
    depth = np.where(valid, z / d_max, 0.0)
    return GeoPriors(v_world, depth, np.clip(angle, 0.0, 1.0), normals, valid)


def positional_encode(x, L: int) -> np.ndarray:
    """Sinusoidal encoding, 2L entries per input dimension, dimension-major.

    For a trailing dimension of size D the output has 2*L*D entries:
    ``sin(2^0 pi x_0), cos(2^0 pi x_0), ..., cos(2^(L-1) pi x_0), sin(2^0 pi x_1), ...``.
    A scalar input is treated as a single dimension.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = x[None]
    freq = np.pi * 2.0 ** np.arange(L)
    ang = x[..., None] * freq
    enc = np.stack([np.sin(ang), np.cos(ang)], axis=-1)
    return enc.reshape(*x.shape[:-1], x.shape[-1] * 2 * L)


@dataclass
class RelPoseDistances:
    rot: np.ndarray
    trans: np.ndarray
    overall: np.ndarray


def relative_pose_distance(poses) -> RelPoseDistances:
    """Pairwise rotation, translation and combined pose distances (T x T each)."""
    if len(poses) < 1:
        raise ValueError("need at least one pose")
    Rs = np.stack([np.asarray(p.rotation, dtype=np.float64) for p in poses])
    ts = np.stack([np.asarray(p.translation, dtype=np.float64) for p in poses])
    for R in Rs:
        check_rotation(R)
    # tr(R_j^T R_k) as an elementwise product so the (j, k) and (k, j) entries match bitwise
    tr = np.einsum("jab,kab->jk", Rs, Rs)
    rot2 = np.maximum((2.0 / 3.0) * (3.0 - tr), 0.0)
    # |R_j^T (t_k - t_j)| == |t_k - t_j|
    diff = ts[None, :, :] - ts[:, None, :]
    trans2 = np.einsum("jkc,jkc->jk", diff, diff)
    np.fill_diagonal(rot2, 0.0)
    np.fill_diagonal(trans2, 0.0)
    return RelPoseDistances(np.sqrt(rot2), np.sqrt(trans2), np.sqrt(rot2 + trans2))


def projective_tsdf(points: np.ndarray, view, truncation: float, d_max: float = D_MAX):
    """Projective TSDF ``clamp((D(pi(p)) - z(p)) / t, -1, 1)`` of one view.

    Depth is read with nearest-pixel lookup so samples never blend across
    depth discontinuities. Returns ``(sdf, valid)``; invalid entries are 1.
    """
    if truncation <= 0:
        raise ValueError("truncation must be positive")
    K, P = view.intrinsics, view.pose
    pts = as_points(points)
    pix, z, valid = project(pts, K, P, d_max)
    out = np.ones(len(pts))
    if valid.any():
        d = view.depth.reshape(-1)[nearest_pixel(pix[valid], K.width, K.height)]
        finite = np.isfinite(d)
        sub = np.flatnonzero(valid)
        valid[sub[~finite]] = False
        out[sub[finite]] = np.clip((d[finite] - z[sub[finite]]) / truncation, -1.0, 1.0)
    return out, valid


def projective_occupancy_and_visibility(sp: np.ndarray, band: float = 1.0):
    """Projective occupancy ``|S_p| < band`` and visibility ``S_p >= 0``.

    ``sp`` is already normalised by the truncation distance, so the metric
    truncation band corresponds to ``band = 1``.
    """
    sp = np.asarray(sp)
    return (np.abs(sp) < band).astype(np.uint8), (sp >= 0).astype(np.uint8)
