"""Synthetic rooms built from analytic primitives, and an exact ray caster.

A scene is a closed box room (six inward-facing planes) with a few boxes
and spheres inside. The signed distance is positive in free space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import camgeom
from .camgeom import CameraIntrinsics, CameraPose

ROOM_LO = (-1.2, -1.2, 0.0)
ROOM_HI = (1.2, 1.2, 1.6)
ORBIT_RADIUS = 0.85
ORBIT_HEIGHT = 0.8
MIN_COVERAGE = 0.2  # per-primitive share of exposed area seen by >= 2 orbit views
MAX_DRAWS = 50
LIGHT_DIR = np.array([0.3, 0.5, 1.0]) / np.linalg.norm([0.3, 0.5, 1.0])


@dataclass
class Plane:
    point: np.ndarray
    normal: np.ndarray  # points into free space
    kind: str = "plane"

    def sdf(self, p):
        return (p - self.point) @ self.normal

    def intersect(self, o, d):
        denom = d @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.point - o) @ self.normal) / denom
        t = np.where((denom < 0) & (t > 0), t, np.inf)
        return t, np.broadcast_to(self.normal, d.shape)

    def to_dict(self):
        return {"type": "plane", "point": list(map(float, self.point)), "normal": list(map(float, self.normal))}


@dataclass
class Box:
    center: np.ndarray
    half: np.ndarray
    kind: str = "box"

    def sdf(self, p):
        q = np.abs(p - self.center) - self.half
        return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(-1), 0.0)

    def intersect(self, o, d):
        lo, hi = self.center - self.half, self.center + self.half
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (lo - o) * inv
            t1 = (hi - o) * inv
        tmin = np.minimum(t0, t1)
        tmax = np.maximum(t0, t1)
        tmin = np.where(np.isnan(tmin), -np.inf, tmin)
        tmax = np.where(np.isnan(tmax), np.inf, tmax)
        tn = tmin.max(-1)
        tf = tmax.min(-1)
        hit = (tn <= tf) & (tn > 0)
        axis = tmin.argmax(-1)
        n = np.zeros(d.shape)
        rows = np.arange(len(d))
        n[rows, axis] = -np.sign(d[rows, axis])
        return np.where(hit, tn, np.inf), n

    def to_dict(self):
        return {"type": "box", "center": list(map(float, self.center)), "half": list(map(float, self.half))}


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    kind: str = "sphere"

    def sdf(self, p):
        return np.linalg.norm(p - self.center, axis=-1) - self.radius

    def intersect(self, o, d):
        oc = o - self.center
        b = d @ oc if oc.ndim == 1 else np.einsum("nc,nc->n", d, oc)
        c = oc @ oc - self.radius ** 2 if oc.ndim == 1 else np.einsum("nc,nc->n", oc, oc) - self.radius ** 2
        disc = b * b - c
        with np.errstate(invalid="ignore"):
            t = -b - np.sqrt(disc)
        hit = (disc >= 0) & (t > 0)
        t = np.where(hit, t, np.inf)
        tt = np.where(hit, t, 0.0)
        n = (o + tt[:, None] * d - self.center) / self.radius
        return t, n

    def to_dict(self):
        return {"type": "sphere", "center": list(map(float, self.center)), "radius": float(self.radius)}


def primitive_from_dict(d):
    if d["type"] == "plane":
        return Plane(np.array(d["point"], float), np.array(d["normal"], float))
    if d["type"] == "box":
        return Box(np.array(d["center"], float), np.array(d["half"], float))
    if d["type"] == "sphere":
        return Sphere(np.array(d["center"], float), float(d["radius"]))
    raise ValueError(f"unknown primitive type {d['type']!r}")


@dataclass
class Scene:
    primitives: list
    room_lo: np.ndarray = field(default_factory=lambda: np.array(ROOM_LO))
    room_hi: np.ndarray = field(default_factory=lambda: np.array(ROOM_HI))
    seed: int = 0

    def __post_init__(self):
        self.room_lo = np.asarray(self.room_lo, float)
        self.room_hi = np.asarray(self.room_hi, float)
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")

    def sdf(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return np.min(np.stack([prim.sdf(p) for prim in self.primitives]), axis=0)

    def cast(self, origins, dirs):
        """First hit along unit rays: ``(t, normal, primitive index)``; t is inf on a miss."""
        dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
        best = np.full(len(dirs), np.inf)
        normal = np.zeros_like(dirs)
        which = np.full(len(dirs), -1)
        for i, prim in enumerate(self.primitives):
            t, n = prim.intersect(origins, dirs)
            closer = t < best
            best = np.where(closer, t, best)
            normal[closer] = np.broadcast_to(n, dirs.shape)[closer]
            which[closer] = i
        return best, normal, which

    def to_dict(self):
        return {"seed": int(self.seed), "room_lo": list(map(float, self.room_lo)),
                "room_hi": list(map(float, self.room_hi)),
                "primitives": [p.to_dict() for p in self.primitives]}

    @classmethod
    def from_dict(cls, d):
        return cls([primitive_from_dict(p) for p in d["primitives"]], np.array(d["room_lo"]),
                   np.array(d["room_hi"]), int(d.get("seed", 0)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def room_planes(lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    planes = []
    for a in range(3):
        e = np.zeros(3)
        e[a] = 1.0
        planes.append(Plane(lo.copy(), e.copy()))
        planes.append(Plane(hi.copy(), -e))
    return planes


def _orbit_clearance(center_xy, extent, orbit_r=ORBIT_RADIUS, margin=0.12):
    r = np.linalg.norm(center_xy)
    return abs(r - orbit_r) > extent + margin


def generate_scene(seed: int, empty_room: bool = False, occluder: bool = False,
                   n_objects: tuple = (1, 4)) -> Scene:
    """Room plus 1-4 random boxes/spheres kept clear of the camera orbit.

    Object sets leaving some primitive poorly covered by the default orbit
    (see ``MIN_COVERAGE``) are redrawn from the same generator.
    """
    rng = np.random.default_rng(seed)
    lo, hi = np.array(ROOM_LO), np.array(ROOM_HI)
    for _ in range(MAX_DRAWS):
        prims = room_planes(lo, hi)
        if not empty_room:
            prims += _draw_objects(rng, lo, hi, n_objects)
        if occluder:
            prims.append(Box(np.array([0.42, 0.0, 0.6]), np.array([0.08, 0.25, 0.6])))
        scene = Scene(prims, lo, hi, seed)
        if min(primitive_coverage(scene)) >= MIN_COVERAGE:
            return scene
    raise RuntimeError(f"no adequately covered object set for seed {seed}")


def _draw_objects(rng, lo, hi, n_objects):
    k = int(rng.integers(n_objects[0], n_objects[1] + 1))
    prims = []
    while len(prims) < k:
        if rng.random() < 0.5:
            half = rng.uniform([0.12, 0.12, 0.1], [0.3, 0.3, 0.45])
            extent = np.linalg.norm(half[:2])
            xy = rng.uniform(lo[:2] + half[:2] + 0.02, hi[:2] - half[:2] - 0.02)
            if not _orbit_clearance(xy, extent):
                continue
            prims.append(Box(np.array([xy[0], xy[1], lo[2] + half[2]]), half))
        else:
            r = rng.uniform(0.12, 0.26)
            xy = rng.uniform(lo[:2] + r + 0.02, hi[:2] - r - 0.02)
            if not _orbit_clearance(xy, r):
                continue
            z = lo[2] + r if rng.random() < 0.5 else rng.uniform(lo[2] + r + 0.1, hi[2] - r - 0.05)
            prims.append(Sphere(np.array([xy[0], xy[1], z]), r))
    return prims


@dataclass
class _Cam:
    intrinsics: CameraIntrinsics
    pose: CameraPose


def primitive_coverage(scene: Scene, n_views: int = 9, density: float = 100.0) -> list:
    """Per primitive, the fraction of its exposed surface seen by at least two orbit views."""
    K = CameraIntrinsics.from_fov(64, 64, 90.0)
    cams = [_Cam(K, P) for P in orbit_poses(n_views)]
    out = []
    for i, prim in enumerate(scene.primitives):
        p, n = sample_surface(Scene([prim], scene.room_lo, scene.room_hi), density, i)
        exposed = (np.abs(scene.sdf(p)) < 1e-9) & (scene.sdf(p + 1e-4 * n) > 0)
        p = p[exposed]
        out.append(float(np.mean(visible_count(scene, p, cams) >= 2)) if len(p) else 0.0)
    return out


def orbit_poses(n_views: int = 9, radius: float = ORBIT_RADIUS, height: float = ORBIT_HEIGHT,
                phase: float = 0.0):
    """Cameras on a horizontal circle looking across the room, pitching alternately down and up."""
    poses = []
    for k in range(n_views):
        a = phase + 2 * np.pi * k / n_views
        eye = np.array([radius * np.cos(a), radius * np.sin(a), height])
        tz = height - 0.45 if k % 2 == 0 else height + 0.45
        target = np.array([-0.3 * np.cos(a), -0.3 * np.sin(a), tz])
        poses.append(CameraPose.look_at(eye, target))
    return poses


@dataclass
class CameraView:
    intrinsics: CameraIntrinsics
    pose: CameraPose
    depth: np.ndarray  # (H, W), inf on a miss
    normal_map: np.ndarray  # (H, W, 3) camera frame, zero on a miss
    features: np.ndarray  # (C_px, H, W)


def render_view(scene: Scene, K: CameraIntrinsics, P: CameraPose) -> CameraView:
    """Exact depth and normals by ray casting; pixel features are
    [Lambertian intensity, normal (3), 1/depth]."""
    rays_cam = camgeom.pixel_rays(K).reshape(-1, 3)
    rays_cam = rays_cam / np.linalg.norm(rays_cam, axis=1, keepdims=True)
    dirs = rays_cam @ P.rotation.T
    t, n_world, _ = scene.cast(P.translation, dirs)
    hit = np.isfinite(t)
    depth = np.where(hit, t * rays_cam[:, 2], np.inf)
    n_cam = np.where(hit[:, None], n_world @ P.rotation, 0.0)
    shade = np.where(hit, 0.2 + 0.8 * np.maximum(n_world @ LIGHT_DIR, 0.0), 0.0)
    inv_d = np.where(hit, 1.0 / np.where(hit, depth, 1.0), 0.0)
    H, W = K.height, K.width
    feats = np.concatenate([shade[:, None], n_cam, inv_d[:, None]], axis=1).T.reshape(5, H, W)
    return CameraView(K, P, depth.reshape(H, W), n_cam.reshape(H, W, 3), feats)


def render_orbit(scene: Scene, n_views: int = 9, image_size: int = 64, fov_deg: float = 90.0):
    K = CameraIntrinsics.from_fov(image_size, image_size, fov_deg)
    return [render_view(scene, K, P) for P in orbit_poses(n_views)]


def sample_surface(scene: Scene, density: float, seed: int = 0):
    """Area-uniform samples of the free-space boundary with outward normals."""
    rng = np.random.default_rng(seed)
    pts, nrm = [], []
    lo, hi = scene.room_lo, scene.room_hi
    for prim in scene.primitives:
        if prim.kind == "plane":
            a = int(np.flatnonzero(prim.normal)[0])
            u, v = [i for i in range(3) if i != a]
            area = (hi[u] - lo[u]) * (hi[v] - lo[v])
            m = rng.poisson(density * area)
            p = np.empty((m, 3))
            p[:, a] = prim.point[a]
            p[:, u] = rng.uniform(lo[u], hi[u], m)
            p[:, v] = rng.uniform(lo[v], hi[v], m)
            pts.append(p)
            nrm.append(np.broadcast_to(prim.normal, (m, 3)))
        elif prim.kind == "box":
            for a in range(3):
                u, v = [i for i in range(3) if i != a]
                area = 4 * prim.half[u] * prim.half[v]
                for sgn in (-1.0, 1.0):
                    m = rng.poisson(density * area)
                    p = np.empty((m, 3))
                    p[:, a] = prim.center[a] + sgn * prim.half[a]
                    p[:, u] = prim.center[u] + rng.uniform(-prim.half[u], prim.half[u], m)
                    p[:, v] = prim.center[v] + rng.uniform(-prim.half[v], prim.half[v], m)
                    n = np.zeros((m, 3))
                    n[:, a] = sgn
                    pts.append(p)
                    nrm.append(n)
        else:
            m = rng.poisson(density * 4 * np.pi * prim.radius ** 2)
            d = rng.normal(size=(m, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            pts.append(prim.center + prim.radius * d)
            nrm.append(d)
    P = np.concatenate(pts)
    N = np.concatenate(nrm)
    delta = 1e-4
    on_boundary = (np.abs(scene.sdf(P)) < 1e-9) & (scene.sdf(P + delta * N) > 0.5 * delta)
    return P[on_boundary], N[on_boundary]


def visible_count(scene: Scene, points: np.ndarray, views, d_max: float = camgeom.D_MAX) -> np.ndarray:
    """Number of views that see each surface point unoccluded."""
    count = np.zeros(len(points), int)
    for view in views:
        _, z, valid = camgeom.project(points, view.intrinsics, view.pose, d_max)
        if not valid.any():
            continue
        o = view.pose.translation
        d = points[valid] - o
        dist = np.linalg.norm(d, axis=1)
        t, _, _ = scene.cast(o, d / dist[:, None])
        seen = t >= dist - 1e-6
        count[np.flatnonzero(valid)[seen]] += 1
    return count


def sphere_trace(scene: Scene, origin, dirs, tol: float = 1e-13, max_iter: int = 200000):
    """Independent first-hit distances by sphere tracing the analytic SDF."""
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    t = np.zeros(len(dirs))
    active = np.ones(len(dirs), bool)
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        d = scene.sdf(origin + t[idx, None] * dirs[idx])
        t[idx] += d
        active[idx] = (d > tol) & (t[idx] < 50.0)
    t[t >= 50.0] = np.inf
    return t
