import json

import numpy as np
import pytest

from geofuse import fileio, synth
from geofuse.voxelvol import Mesh, TsdfVolume, VoxelGrid, marching_cubes

from test_voxelvol import sphere_volume


def random_volume(rng, dims=(5, 4, 3)):
    g = VoxelGrid(rng.normal(size=3), 0.07, dims)
    obs = rng.random(dims) < 0.7
    vals = np.where(obs, rng.uniform(-1, 1, dims), 1.0)
    return TsdfVolume(g, vals, obs * rng.uniform(0.5, 3, dims), obs, 0.21)


class TestAtomic:
    def test_no_leftovers(self, tmp_path):
        p = fileio.atomic_write(tmp_path / "sub" / "a.txt", "hello")
        assert p.read_text() == "hello"
        assert [f.name for f in p.parent.iterdir()] == ["a.txt"]

    def test_failed_write_keeps_old_content(self, tmp_path):
        p = fileio.atomic_write(tmp_path / "a.bin", b"old")
        with pytest.raises(TypeError):
            fileio.atomic_write(p, 12345)
        assert p.read_bytes() == b"old" and len(list(tmp_path.iterdir())) == 1


class TestTsdf:
    def test_round_trip(self, tmp_path):
        vol = random_volume(np.random.default_rng(0))
        back = fileio.read_tsdf(fileio.write_tsdf(tmp_path / "v.tsdf", vol))
        assert back.grid.dims == vol.grid.dims and np.array_equal(back.grid.origin, vol.grid.origin)
        assert back.truncation == vol.truncation
        assert np.array_equal(back.observed, vol.observed)
        assert np.array_equal(back.values, vol.values.astype(np.float32).astype(np.float64))
        assert np.abs(back.weights - vol.weights).max() < 1e-6

    def test_x_fastest_layout(self):
        g = VoxelGrid(np.zeros(3), 1.0, (3, 2, 2))
        vals = np.arange(12, dtype=float).reshape(3, 2, 2) / 12
        raw = fileio.tsdf_bytes(TsdfVolume(g, vals, np.ones((3, 2, 2)), np.ones((3, 2, 2), bool), 1.0))
        nl = raw.index(b"\n")
        header = json.loads(raw[:nl])
        assert header["dims"] == [3, 2, 2] and header["endianness"] == "little"
        flat = np.frombuffer(raw, "<f4", 12, nl + 1)
        expect = [vals[i, j, k] for k in range(2) for j in range(2) for i in range(3)]
        assert np.array_equal(flat, np.float32(expect))

    def test_rejects_foreign(self, tmp_path):
        p = tmp_path / "x.tsdf"
        p.write_bytes(b'{"format": "other"}\n')
        with pytest.raises(ValueError):
            fileio.read_tsdf(p)


class TestMeshFiles:
    def test_ply_round_trip(self, tmp_path):
        mesh = marching_cubes(sphere_volume(16, 0.1, 0.5, 0.3))
        back = fileio.read_ply(fileio.write_ply(tmp_path / "m.ply", mesh))
        assert np.array_equal(back.faces, mesh.faces)
        assert np.array_equal(back.vertices, mesh.vertices.astype(np.float32).astype(np.float64))
        assert np.abs(back.vertex_normals - mesh.vertex_normals).max() < 1e-6

    def test_empty_and_points(self, tmp_path):
        back = fileio.read_ply(fileio.write_ply(tmp_path / "e.ply", Mesh()))
        assert len(back.vertices) == 0 and len(back.faces) == 0
        pts = np.random.default_rng(0).normal(size=(7, 3))
        back = fileio.read_ply(fileio.write_points_ply(tmp_path / "p.ply", pts))
        assert len(back.faces) == 0 and np.allclose(back.vertices, pts, atol=1e-6)

    def test_obj(self, tmp_path):
        m = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]], [[0, 1, 2]], [[0, 0, 1.0]] * 3)
        text = fileio.write_mesh(tmp_path / "t.obj", m).read_text().splitlines()
        assert text[0] == "v 0 0 0" and text[-1] == "f 1//1 2//2 3//3"
        assert sum(l.startswith("vn ") for l in text) == 3

    def test_unknown_suffix(self, tmp_path):
        with pytest.raises(ValueError):
            fileio.write_mesh(tmp_path / "m.stl", Mesh())

    def test_rejects_ascii_ply(self, tmp_path):
        p = tmp_path / "a.ply"
        p.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
        with pytest.raises(ValueError):
            fileio.read_ply(p)


class TestViews:
    def test_round_trip_exact(self, tmp_path):
        v = synth.render_orbit(synth.generate_scene(1), 3, 10)[1]
        back = fileio.read_view(fileio.write_view(tmp_path, "view_01", v))
        assert np.array_equal(back.depth, v.depth) and np.array_equal(back.normal_map, v.normal_map)
        assert np.array_equal(back.features, v.features)
        assert np.array_equal(back.pose.rotation, v.pose.rotation)
        assert back.intrinsics == v.intrinsics

    def test_truncated_blob(self, tmp_path):
        v = synth.render_orbit(synth.generate_scene(1), 3, 10)[0]
        h = fileio.write_view(tmp_path, "v", v)
        (tmp_path / "v.bin").write_bytes((tmp_path / "v.bin").read_bytes()[:-8])
        with pytest.raises(ValueError, match="size"):
            fileio.read_view(h)
