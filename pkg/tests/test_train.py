import json

import numpy as np
import pytest
import torch

from geofuse import g2pipeline as gp
from geofuse import train as tr
from geofuse.tensornn import ParamSet
from geofuse.config import LossConfig, PipelineConfig, TrainConfig, ablation


def tiny(**kw):
    base = dict(epochs=1, n_train_scenes=2, n_eval_scenes=1, image_size=12, voxel_size=0.3, batch=2,
                eval_density=300.0, pipeline=PipelineConfig(c_v=4, n_views=3))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def cache():
    return tr.SceneCache(tiny())


def read_log(path):
    return [json.loads(l) for l in path.read_text().splitlines()]


class TestTrain:
    def test_smoke(self, tmp_path, cache):
        res = tr.train(tiny(), tmp_path, cache)
        log = read_log(res.log_path)
        assert res.steps == len(log) == 1
        assert all(np.isfinite(r["total"]) for r in log)
        assert (tmp_path / "checkpoints" / "epoch_001").exists()
        assert TrainConfig.load(tmp_path / "config.json") == tiny()

    def test_normal_term_gate(self, tmp_path, cache):
        cfg = tiny(epochs=6, n_train_scenes=1, batch=1)
        log = read_log(tr.train(cfg, tmp_path, cache).log_path)
        w = cfg.loss.weights
        for r in log:
            base = w[0] * r["occupancy"] + w[1] * r["tsdf"] + w[2] * r["proj_occ"]
            expect = base + (w[3] * r["normal"] if r["epoch"] > 5 else 0.0)
            assert r["total"] == pytest.approx(expect, rel=1e-12)
            assert r["normal"] > 0
        assert {r["epoch"] for r in log} == set(range(1, 7))

    def test_deterministic(self, tmp_path, cache):
        cfg = tiny(epochs=2, crops=(2, 1, 1))
        a = tr.train(cfg, tmp_path / "a", cache)
        b = tr.train(cfg, tmp_path / "b", tr.SceneCache(cfg))
        assert a.log_path.read_bytes() == b.log_path.read_bytes()
        for ep in ("epoch_001", "epoch_002"):
            fa = sorted((tmp_path / "a" / "checkpoints" / ep).rglob("*"))
            fb = sorted((tmp_path / "b" / "checkpoints" / ep).rglob("*"))
            assert [f.name for f in fa] == [f.name for f in fb]
            assert all(x.read_bytes() == y.read_bytes() for x, y in zip(fa, fb) if x.is_file())

    def test_divergence_logged(self, tmp_path, cache):
        cfg = tiny(lr=1e300)
        with pytest.raises(tr.TrainingDiverged):
            tr.train(tiny(epochs=3, lr=1e300), tmp_path, cache)
        last = read_log(tmp_path / "train_log.jsonl")[-1]
        assert last["diverged"] and "step" in last and "scene" in last

    def test_batch_means_scenes_per_step(self, tmp_path, cache):
        res = tr.train(tiny(batch=1), tmp_path, cache)
        assert res.steps == 2


class TestCrops:
    def test_tiles_exactly(self):
        dims = (13, 11, 9)
        cover = np.zeros(dims, int)
        for lo, hi, clo, chi in tr.crop_bounds(dims, (3, 2, 2)):
            assert np.all(lo <= clo) and np.all(chi <= hi)
            assert np.all(clo - lo <= tr.CROP_HALO) and np.all(hi - chi <= tr.CROP_HALO)
            cover[tuple(slice(a, b) for a, b in zip(clo, chi))] += 1
        assert (cover == 1).all()

    def test_core_predictions_match_full_scene(self, cache):
        cfg = tiny()
        full = cache.get(0)
        ps = gp.init_params(cfg.pipeline, 3)
        with torch.no_grad():
            ref = gp.forward(ps, full.prepared, cfg.pipeline).tsdf.numpy().reshape(full.gt.grid.dims)
            for (lo, hi, clo, chi), c in zip(tr.crop_bounds(full.gt.grid.dims, (2, 2, 2)), cache.crops(0, (2, 2, 2))):
                got = gp.forward(ps, c.prepared, cfg.pipeline).tsdf.numpy().reshape(c.gt.grid.dims)
                core = c.core.reshape(c.gt.grid.dims)
                sub = ref[tuple(slice(a, b) for a, b in zip(lo, hi))]
                assert np.abs(got[core] - sub[core]).max() < 1e-12

    def test_crop_losses_cover_scene(self, cache):
        cfg = tiny()
        crops = cache.crops(0, (2, 2, 2))
        assert sum(int(c.core.sum()) for c in crops) == cache.get(0).gt.grid.num_voxels


class TestReconstruct:
    def test_untrained_finite_and_deterministic(self, cache):
        cfg = tiny()
        d = cache.get(1000)
        ps = gp.init_params(cfg.pipeline, 0)
        m1, v1 = tr.reconstruct(ps, d.views, d.prepared.grid, cfg)
        m2, v2 = tr.reconstruct(ps, d.views, d.prepared.grid, cfg)
        assert np.isfinite(v1.values).all()
        assert np.array_equal(m1.vertices, m2.vertices) and np.array_equal(m1.faces, m2.faces)

    def test_checkpoint_validation(self, tmp_path, cache):
        res = tr.train(tiny(), tmp_path, cache)
        ps = tr.load_checkpoint(res.checkpoint, tiny().pipeline)
        assert set(ps.names()) == set(res.params.names())
        with pytest.raises(ValueError, match="shape mismatch"):
            tr.load_checkpoint(res.checkpoint, PipelineConfig(c_v=6, n_views=3))
        other = ParamSet(0)
        other.add("stem.weight", np.zeros((4, 5)))
        other.save(tmp_path / "foreign", 0, {})
        with pytest.raises(ValueError, match="do not match"):
            tr.load_checkpoint(tmp_path / "foreign", tiny().pipeline)
        with pytest.raises(ValueError):
            tr.load_checkpoint(res.checkpoint, PipelineConfig(c_v=4, n_views=5))

    def test_evaluate_and_experiment(self, tmp_path, cache):
        cfg = tiny()
        res = tr.run_experiment(cfg, tmp_path, ("full", "average_fusion"), cache)
        assert set(res) == {"full", "average_fusion"}
        saved = json.loads((tmp_path / "results.json").read_text())
        assert 0.0 <= saved["full"]["mean"]["fscore"] <= 1.0
        assert (tmp_path / "full" / "eval" / "scene_1000.ply").exists()


class TestConfig:
    def test_round_trip(self):
        cfg = tiny(loss=LossConfig(consistency="gaussian"))
        assert TrainConfig.from_dict(json.loads(cfg.to_json())) == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"epochz": 3})

    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(batch=0), dict(lr=-1.0), dict(crops=(1, 0, 1)),
                                    dict(voxel_size=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            tiny(**kw)

    def test_ablations(self):
        cfg = tiny()
        assert not any([ablation(cfg, "priors_off").pipeline.use_depth,
                        ablation(cfg, "priors_off").pipeline.use_normal])
        assert ablation(cfg, "average_fusion").pipeline.fusion_mode == "average"
        assert not ablation(cfg, "normal_loss_off").loss.normal_loss
        assert ablation(cfg, "full") == cfg
        with pytest.raises(ValueError):
            ablation(cfg, "bogus")
