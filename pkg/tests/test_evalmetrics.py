import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from geofuse import evalmetrics as em
from geofuse.voxelvol import Mesh, marching_cubes

from conftest import seeds
from test_voxelvol import sphere_volume


def unit_square():
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0.0]])
    return Mesh(v, [[0, 1, 2], [0, 2, 3]], np.tile([0, 0, 1.0], (4, 1)))


def cloud(rng, k=200, normals=True):
    p = rng.uniform(0, 0.5, (k, 3))
    n = rng.normal(size=(k, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return em.PointSet(p, n if normals else None)


def brute_metrics(pred, gt, thr):
    d_p = np.linalg.norm(pred[:, None] - gt[None], axis=2).min(1)
    d_g = np.linalg.norm(gt[:, None] - pred[None], axis=2).min(1)
    p, r = np.mean(d_p < thr), np.mean(d_g < thr)
    return d_p.mean(), d_g.mean(), p, r, (2 * p * r / (p + r) if p + r else 0.0)


class TestPointSet:
    def test_validation(self):
        with pytest.raises(ValueError):
            em.PointSet([[0, 0, np.nan]])
        with pytest.raises(ValueError):
            em.PointSet(np.zeros((2, 3)), np.zeros((3, 3)))
        with pytest.raises(ValueError):
            em.PointSet(np.zeros((1, 3)), [[0, 0, 1.001]])
        em.PointSet(np.zeros((1, 3)), [[0, 0, 1.00005]])


class TestSampling:
    def test_unit_square(self):
        ps = em.sample_mesh(unit_square(), 100, seed=3)
        assert len(ps) == 100
        assert np.all(ps.points[:, 2] == 0.0)
        assert ps.points[:, :2].min() >= 0 and ps.points[:, :2].max() <= 1
        assert np.allclose(ps.normals, [0, 0, 1])

    def test_degenerate_triangle(self):
        m = unit_square()
        v = np.vstack([m.vertices, [[5, 5, 5], [6, 6, 6], [7, 7, 7]]])
        m2 = Mesh(v, np.vstack([m.faces, [[4, 5, 6]]]), np.vstack([m.vertex_normals, np.tile([0, 0, 1.0], (3, 1))]))
        ps = em.sample_mesh(m2, 500, seed=0)
        assert ps.points.max() <= 1.0

    def test_empty(self):
        assert len(em.sample_mesh(Mesh(), 100)) == 0

    def test_reproducible(self):
        a, b = em.sample_mesh(unit_square(), 50, 7), em.sample_mesh(unit_square(), 50, 7)
        assert np.array_equal(a.points, b.points)

    def test_sphere_density(self):
        mesh = marching_cubes(sphere_volume(40, 0.025, 0.35, 0.1))
        ps = em.sample_mesh(mesh, 2000, seed=1)
        assert abs(len(ps) / mesh.area() - 2000) / 2000 < 0.05
        assert np.allclose(np.linalg.norm(ps.normals, axis=1), 1.0)


class TestMeshMetrics:
    def test_identical(self):
        ps = cloud(np.random.default_rng(0))
        m = em.mesh_metrics(ps, ps)
        assert (m.acc, m.comp, m.prec, m.recall, m.fscore) == (0.0, 0.0, 1.0, 1.0, 1.0)

    def test_offset_plane(self):
        gt = em.sample_mesh(unit_square(), 400, 0)
        pred = em.PointSet(gt.points + [0, 0, 0.1])
        m = em.mesh_metrics(pred, gt, 0.05)
        assert m.prec == m.recall == m.fscore == 0.0
        assert m.acc == pytest.approx(0.1, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            em.mesh_metrics(em.PointSet(np.zeros((0, 3))), cloud(np.random.default_rng(0)))

    @given(seeds, st.floats(0.01, 0.2))
    def test_brute_force_oracle(self, seed, thr):
        rng = np.random.default_rng(seed)
        a, b = cloud(rng, normals=False), cloud(rng, normals=False)
        m = em.mesh_metrics(a, b, thr)
        ref = brute_metrics(a.points, b.points, thr)
        assert np.allclose([m.acc, m.comp, m.prec, m.recall, m.fscore], ref, atol=1e-12, rtol=0)

    @given(seeds)
    def test_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        a, b = cloud(rng, 150), cloud(rng, 120)
        m, r = em.mesh_metrics(a, b), em.mesh_metrics(b, a)
        assert (m.acc, m.prec) == (r.comp, r.recall) and (m.comp, m.recall) == (r.acc, r.prec)

    @given(seeds, st.floats(0.005, 0.1), st.floats(0.005, 0.1))
    def test_threshold_monotone(self, seed, t1, t2):
        lo, hi = sorted((t1, t2))
        rng = np.random.default_rng(seed)
        a, b = cloud(rng, 100), cloud(rng, 100)
        m1, m2 = em.mesh_metrics(a, b, lo), em.mesh_metrics(a, b, hi)
        assert m1.prec <= m2.prec and m1.recall <= m2.recall

    def test_fscore_definition(self):
        assert em.fscore(0.5, 0.25) == pytest.approx(1 / 3)
        assert em.fscore(0.0, 0.0) == 0.0


class TestGridIndex:
    @given(seeds, st.floats(0.01, 0.3))
    def test_matches_quadratic_scan(self, seed, cell):
        rng = np.random.default_rng(seed)
        ref = rng.uniform(-1, 1, (300, 3))
        q = rng.uniform(-1.5, 1.5, (200, 3))
        d, i = em.GridIndex(ref, cell).query(q)
        db, ib = em.brute_force_nn(q, ref)
        assert np.allclose(d, db, atol=1e-15, rtol=0) and np.array_equal(i, ib)

    def test_ties_take_lowest_index(self):
        ref = np.array([[1.0, 0, 0], [-1.0, 0, 0], [1.0, 0, 0]])
        d, i = em.GridIndex(ref, 0.5).query(np.zeros((1, 3)))
        assert d[0] == 1.0 and i[0] == 0

    def test_validation(self):
        with pytest.raises(ValueError):
            em.GridIndex(np.zeros((0, 3)), 0.1)
        with pytest.raises(ValueError):
            em.GridIndex(np.zeros((1, 3)), 0.0)


class TestNormalMetrics:
    def test_identical(self):
        ps = cloud(np.random.default_rng(1))
        nm = em.normal_metrics(ps, ps)
        assert nm.precision == [1.0] * 3 and nm.recall == [1.0] * 3

    def test_flipped(self):
        ps = cloud(np.random.default_rng(2))
        flip = em.PointSet(ps.points, -ps.normals)
        assert em.normal_metrics(flip, ps, signed=True).precision == [0.0] * 3
        # the default compares normals as unoriented axes
        assert em.normal_metrics(flip, ps).precision == [1.0] * 3

    def test_missing_normals(self):
        rng = np.random.default_rng(3)
        with pytest.raises(ValueError):
            em.normal_metrics(cloud(rng, normals=False), cloud(rng))

    @given(seeds, st.booleans())
    def test_brute_force_oracle(self, seed, signed):
        rng = np.random.default_rng(seed)
        a, b = cloud(rng), cloud(rng, 150)
        nm = em.normal_metrics(a, b, signed=signed)
        for src, dst, got in ((a, b, nm.precision), (b, a, nm.recall)):
            j = np.linalg.norm(src.points[:, None] - dst.points[None], axis=2).argmin(1)
            c = np.sum(src.normals * dst.normals[j], 1)
            ang = np.degrees(np.arccos(np.clip(c if signed else np.abs(c), -1, 1)))
            assert got == [float(np.mean(ang < t)) for t in em.NORMAL_TAUS]

    @given(seeds)
    def test_monotone_in_tau(self, seed):
        rng = np.random.default_rng(seed)
        nm = em.normal_metrics(cloud(rng), cloud(rng), signed=True)
        assert nm.precision == sorted(nm.precision) and nm.recall == sorted(nm.recall)
        assert all(0 <= x <= 1 for x in nm.precision + nm.recall)


class TestOutput:
    def test_json_and_table(self):
        m = em.MeshMetrics(0.01, 0.02, 0.9, 0.8, em.fscore(0.9, 0.8))
        d = json.loads(m.to_json())
        assert d["threshold"] == 0.05 and d["prec"] == 0.9
        table = em.format_table({"full": m, "priors_off": m})
        head, row = table.splitlines()[:2]
        assert head.split() == ["Comp", "Acc", "Recall", "Prec", "F-score"]
        assert [float(x) for x in row.split()[1:]] == pytest.approx([0.02, 0.01, 0.8, 0.9, m.fscore], abs=1e-4)
        nm = em.NormalMetrics(em.NORMAL_TAUS, [1.0, 1.0, 1.0], [0.5, 0.5, 0.5])
        assert json.loads(nm.to_json())["taus"] == [11.25, 22.5, 30.0]
