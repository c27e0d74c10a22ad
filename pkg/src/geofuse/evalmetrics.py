"""Point-cloud accuracy/completeness metrics and normal precision/recall."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .voxelvol import Mesh

DEFAULT_DENSITY = 1e4
NORMAL_TAUS = (11.25, 22.5, 30.0)
TABLE_COLUMNS = ("comp", "acc", "recall", "prec", "fscore")
TABLE_HEADER = ("Comp", "Acc", "Recall", "Prec", "F-score")


@dataclass
class PointSet:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise ValueError("point coordinates must be finite")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise ValueError("normals and points differ in length")
            if len(self.normals) and np.abs(np.linalg.norm(self.normals, axis=1) - 1.0).max() > 1e-4:
                raise ValueError("normals must be unit length")

    def __len__(self):
        return len(self.points)


def sample_mesh(mesh: Mesh, density: float = DEFAULT_DENSITY, seed: int = 0) -> PointSet:
    """Area-uniform surface samples, ``round(density * area)`` of them, with interpolated normals."""
    if len(mesh.faces) == 0:
        return PointSet(np.zeros((0, 3)), np.zeros((0, 3)))
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    total = areas.sum()
    n = int(round(density * total))
    if n == 0 or total <= 0:
        return PointSet(np.zeros((0, 3)), np.zeros((0, 3)))
    tri = rng.choice(len(areas), size=n, p=areas / total)
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    bary = np.stack([1.0 - u - v, u, v], axis=1)
    f = mesh.faces[tri]
    V = mesh.vertices
    pts = np.einsum("nk,nkc->nc", bary, V[f])
    nrm = np.einsum("nk,nkc->nc", bary, mesh.vertex_normals[f])
    fn = np.cross(V[f[:, 1]] - V[f[:, 0]], V[f[:, 2]] - V[f[:, 0]])
    ln = np.linalg.norm(nrm, axis=1)
    bad = ln < 1e-12
    nrm[bad] = fn[bad]
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointSet(pts, nrm)


class GridIndex:
    """Exact nearest neighbours through uniform-grid bucketing.

    Queries search cells in growing Chebyshev rings and stop once the best
    distance found is covered by the searched radius. The few queries still
    open after ``max_ring`` rings (points far from the other cloud) go to an
    exact k-d tree.
    """

    def __init__(self, points: np.ndarray, cell: float, max_ring: int = 3):
        self.points = np.asarray(points, dtype=np.float64)
        if len(self.points) == 0:
            raise ValueError("cannot index an empty point set")
        if cell <= 0:
            raise ValueError("cell size must be positive")
        self.cell = float(cell)
        self.max_ring = max_ring
        self.lo = self.points.min(0)
        c = self._cells(self.points)
        self.span = c.max(0) + 1
        keys = self._key(c)
        order = np.argsort(keys, kind="stable")
        self.sorted_idx = order
        self.keys, self.start, self.count = np.unique(keys[order], return_index=True, return_counts=True)
        self._tree = None

    def _cells(self, p):
        return np.floor((p - self.lo) / self.cell).astype(np.int64)

    def _key(self, c):
        return (c[:, 0] * self.span[1] + c[:, 1]) * self.span[2] + c[:, 2]

    def _lookup(self, c):
        inside = np.all((c >= 0) & (c < self.span), axis=1)
        k = np.where(inside, self._key(np.clip(c, 0, self.span - 1)), -1)
        pos = np.clip(np.searchsorted(self.keys, k), 0, len(self.keys) - 1)
        hit = inside & (self.keys[pos] == k)
        return np.where(hit, self.start[pos], 0), np.where(hit, self.count[pos], 0)

    @staticmethod
    def _ring(r):
        rng_ = np.arange(-r, r + 1)
        o = np.stack(np.meshgrid(rng_, rng_, rng_, indexing="ij"), -1).reshape(-1, 3)
        return o[np.abs(o).max(1) == r]

    def query(self, q: np.ndarray):
        """Return ``(dist, index)`` of the nearest indexed point for each query row."""
        q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
        best = np.full(len(q), np.inf)
        arg = np.full(len(q), -1, dtype=np.int64)
        qc = self._cells(q)
        open_ = np.arange(len(q))
        for r in range(self.max_ring + 1):
            if len(open_) == 0:
                break
            for off in self._ring(r):
                start, cnt = self._lookup(qc[open_] + off)
                has = cnt > 0
                if not has.any():
                    continue
                qi = np.repeat(open_[has], cnt[has])
                base = np.repeat(start[has], cnt[has])
                within = np.arange(len(qi)) - np.repeat(np.cumsum(cnt[has]) - cnt[has], cnt[has])
                pi = self.sorted_idx[base + within]
                d = _dist(q[qi], self.points[pi])
                # per-query minimum, ties broken by lowest point index
                o = np.lexsort((pi, d, qi))
                qi, d, pi = qi[o], d[o], pi[o]
                first = np.ones(len(qi), bool)
                first[1:] = qi[1:] != qi[:-1]
                qi, d, pi = qi[first], d[first], pi[first]
                better = (d < best[qi]) | ((d == best[qi]) & (pi < arg[qi]))
                best[qi[better]] = d[better]
                arg[qi[better]] = pi[better]
            open_ = open_[~(best[open_] <= r * self.cell)]
        if len(open_):
            if self._tree is None:
                self._tree = cKDTree(self.points)
            _, i = self._tree.query(q[open_])
            best[open_], arg[open_] = _dist(q[open_], self.points[i]), i
        return best, arg


def _dist(a, b):
    diff = a - b
    return np.sqrt(np.einsum("nc,nc->n", diff, diff))


def brute_force_nn(q: np.ndarray, ref: np.ndarray, chunk: int | None = None):
    """Quadratic nearest-neighbour scan (lowest index wins ties)."""
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1, 3)
    chunk = chunk or max(1, 2_000_000 // max(len(ref), 1))
    dist = np.empty(len(q))
    idx = np.empty(len(q), dtype=np.int64)
    for s in range(0, len(q), chunk):
        diff = q[s:s + chunk, None, :] - ref[None, :, :]
        d = np.sqrt(np.einsum("abc,abc->ab", diff, diff))
        idx[s:s + chunk] = d.argmin(1)
        dist[s:s + chunk] = d[np.arange(len(d)), idx[s:s + chunk]]
    return dist, idx


def nearest(query: PointSet, ref: PointSet, cell: float):
    return GridIndex(ref.points, cell).query(query.points)


@dataclass
class MeshMetrics:
    acc: float
    comp: float
    prec: float
    recall: float
    fscore: float
    threshold: float = 0.05

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def row(self) -> list:
        return [getattr(self, k) for k in TABLE_COLUMNS]


def fscore(prec: float, recall: float) -> float:
    return 2 * prec * recall / (prec + recall) if prec + recall > 0 else 0.0


def mesh_metrics(pred: PointSet, gt: PointSet, threshold: float = 0.05, cell: float | None = None) -> MeshMetrics:
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("metrics need nonempty point sets")
    cell = cell or threshold
    d_pred, _ = nearest(pred, gt, cell)
    d_gt, _ = nearest(gt, pred, cell)
    return metrics_from_distances(d_pred, d_gt, threshold)


def metrics_from_distances(d_pred, d_gt, threshold: float) -> MeshMetrics:
    prec = float(np.mean(d_pred < threshold))
    recall = float(np.mean(d_gt < threshold))
    return MeshMetrics(float(np.mean(d_pred)), float(np.mean(d_gt)), prec, recall,
                       fscore(prec, recall), threshold)


@dataclass
class NormalMetrics:
    taus: tuple = NORMAL_TAUS
    precision: list = field(default_factory=list)
    recall: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def normal_angles(a: np.ndarray, b: np.ndarray, signed: bool = False) -> np.ndarray:
    c = np.einsum("nc,nc->n", a, b)
    if not signed:
        c = np.abs(c)
    return np.degrees(np.arccos(np.clip(c, -1.0, 1.0)))


def normal_metrics(pred: PointSet, gt: PointSet, taus=NORMAL_TAUS, signed: bool = False,
                   cell: float = 0.05) -> NormalMetrics:
    """Fraction of points whose nearest counterpart's normal lies within each angle threshold.

    Angles are unsigned (normals compared as axes) unless ``signed`` is set.
    """
    if pred.normals is None or gt.normals is None:
        raise ValueError("normal metrics need normals on both sets")
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("metrics need nonempty point sets")
    _, i_pred = nearest(pred, gt, cell)
    _, i_gt = nearest(gt, pred, cell)
    a_p = normal_angles(pred.normals, gt.normals[i_pred], signed)
    a_g = normal_angles(gt.normals, pred.normals[i_gt], signed)
    taus = tuple(float(t) for t in taus)
    return NormalMetrics(taus, [float(np.mean(a_p < t)) for t in taus],
                         [float(np.mean(a_g < t)) for t in taus])


def format_table(rows: dict) -> str:
    """Aligned text table of ``{name: MeshMetrics}`` in Comp/Acc/Recall/Prec/F-score order."""
    width = max([len(n) for n in rows] + [4])
    lines = [" ".join([f"{'':<{width}}"] + [f"{h:>8}" for h in TABLE_HEADER])]
    for name, m in rows.items():
        lines.append(" ".join([f"{name:<{width}}"] + [f"{v:8.4f}" for v in m.row()]))
    return "\n".join(lines)
