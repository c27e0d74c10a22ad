"""Training, reconstruction and evaluation on synthetic rooms."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import camgeom, evalmetrics, fileio, g2pipeline as gp, supervision as sup, synth
from .config import PipelineConfig, TrainConfig, ablation
from .tensornn import ParamSet
from .voxelvol import Mesh, NormalVolume, TsdfVolume, VoxelGrid, marching_cubes, tsdf_normals

log = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 1000
RMS_EPS = 1e-8
CROP_HALO = 2  # two 3x3x3 convolutions: core predictions match the full grid


class TrainingDiverged(RuntimeError):
    pass


def scene_grid(scene: synth.Scene, cfg: TrainConfig) -> VoxelGrid:
    return VoxelGrid.covering(scene.room_lo, scene.room_hi, cfg.voxel_size, cfg.grid_margin)


def frustum_observed(points: np.ndarray, views) -> np.ndarray:
    obs = np.zeros(len(points), bool)
    for v in views:
        obs |= camgeom.project(points, v.intrinsics, v.pose)[2]
    return obs


def ground_truth_volumes(scene: synth.Scene, grid: VoxelGrid, truncation: float, views=None):
    """Analytic TSDF ``clamp(sdf / t, -1, 1)`` and occupancy ``|S| < 1``.

    With ``views`` the volume is observed only inside at least one camera frustum.
    """
    pts = grid.points()
    obs = None if views is None else frustum_observed(pts, views)
    vol = TsdfVolume.from_sdf(grid, scene.sdf(pts), truncation, obs)
    occ = (np.abs(vol.values) < 1.0) & vol.observed
    return vol, occ


@dataclass
class SceneData:
    """Everything about one scene that does not depend on the parameters."""

    scene: synth.Scene
    views: list
    prepared: gp.PreparedScene
    gt: TsdfVolume
    gt_normals: NormalVolume
    mask3d: np.ndarray
    terms: sup.ConsistencyTerms
    proj_occ: np.ndarray  # (N, T) canonical order
    core: np.ndarray | None = None  # (N,) voxels that carry loss; None means all


def build_scene_data(scene: synth.Scene, cfg: TrainConfig) -> SceneData:
    views = synth.render_orbit(scene, cfg.pipeline.n_views, cfg.image_size)
    grid = scene_grid(scene, cfg)
    prepared = gp.prepare_scene(views, grid, cfg.pipeline)
    gt, _ = ground_truth_volumes(scene, grid, cfg.truncation, views)
    normals = tsdf_normals(gt)
    ordered = [views[i] for i in prepared.order]
    masks = [sup.boundary_mask_2d(v.normal_map, cfg.loss.boundary_threshold) for v in ordered]
    pts = grid.points()
    mask3d = sup.backproject_mask(masks, pts, ordered)
    terms = sup.consistency_terms(normals, prepared.priors, prepared.rotations,
                                  cfg.loss.consistency, cfg.loss.gaussian_sigma2)
    proj = np.zeros((grid.num_voxels, len(views)))
    for j, v in enumerate(ordered):
        sp, _ = camgeom.projective_tsdf(pts, v, cfg.truncation)
        proj[:, j] = camgeom.projective_occupancy_and_visibility(sp)[0]
    return SceneData(scene, views, prepared, gt, normals, mask3d, terms, proj)


def crop_bounds(dims, splits, halo: int = CROP_HALO):
    """Per-crop ``(lo, hi, core_lo, core_hi)`` index boxes tiling ``dims`` into ``splits`` blocks."""
    edges = [np.linspace(0, n, k + 1).round().astype(int) for n, k in zip(dims, splits)]
    out = []
    for i in range(splits[0]):
        for j in range(splits[1]):
            for k in range(splits[2]):
                c_lo = np.array([edges[0][i], edges[1][j], edges[2][k]])
                c_hi = np.array([edges[0][i + 1], edges[1][j + 1], edges[2][k + 1]])
                lo = np.maximum(c_lo - halo, 0)
                hi = np.minimum(c_hi + halo, dims)
                out.append((lo, hi, c_lo, c_hi))
    return out


def crop_scene_data(data: SceneData, lo, hi, core_lo, core_hi, cfg: TrainConfig) -> SceneData:
    """Sub-volume ``[lo, hi)`` of a scene; losses are restricted to ``[core_lo, core_hi)``."""
    g = data.gt.grid
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    dims = tuple(int(b - a) for a, b in zip(lo, hi))
    sub = VoxelGrid(g.origin + g.voxel_size * np.asarray(lo), g.voxel_size, dims)
    T = data.proj_occ.shape[1]

    def cut(a, *tail):
        return np.ascontiguousarray(np.asarray(a).reshape(*g.dims, *tail)[sl].reshape(-1, *tail))

    core = np.zeros(g.dims, bool)
    core[tuple(slice(a, b) for a, b in zip(core_lo, core_hi))] = True
    gt = TsdfVolume(sub, data.gt.values[sl], data.gt.weights[sl], data.gt.observed[sl], data.gt.truncation)
    normals = NormalVolume(sub, data.gt_normals.normals[sl], data.gt_normals.defined[sl])
    t = data.terms
    terms = sup.ConsistencyTerms(cut(t.projected, 3), cut(t.similarity), cut(t.weight), cut(t.defined))
    prepared = gp.prepare_scene(data.views, sub, cfg.pipeline)
    return SceneData(data.scene, data.views, prepared, gt, normals, cut(data.mask3d), terms,
                     cut(data.proj_occ, T), core[sl].ravel())


def scene_seeds(cfg: TrainConfig):
    train = [cfg.scene_seed + i for i in range(cfg.n_train_scenes)]
    held = [cfg.scene_seed + EVAL_SEED_OFFSET + i for i in range(cfg.n_eval_scenes)]
    return train, held


class SceneCache:
    """Scene data keyed by seed; reused across runs that share geometry settings."""

    def __init__(self, cfg: TrainConfig):
        self.key = (cfg.voxel_size, cfg.grid_margin, cfg.truncation, cfg.image_size,
                    cfg.pipeline.n_views, cfg.pipeline.pe_levels, cfg.loss.boundary_threshold,
                    cfg.loss.consistency, cfg.loss.gaussian_sigma2)
        self.cfg = cfg
        self._data: dict[int, SceneData] = {}
        self._crops: dict[tuple, list] = {}

    def compatible(self, cfg: TrainConfig) -> bool:
        return SceneCache(cfg).key == self.key

    def get(self, seed: int) -> SceneData:
        if seed not in self._data:
            self._data[seed] = build_scene_data(synth.generate_scene(seed), self.cfg)
        return self._data[seed]

    def crops(self, seed: int, splits) -> list:
        """Training crops of one scene; a single (1, 1, 1) split is the whole scene."""
        splits = tuple(int(k) for k in splits)
        if splits == (1, 1, 1):
            return [self.get(seed)]
        key = (seed, splits)
        if key not in self._crops:
            d = self.get(seed)
            self._crops[key] = [crop_scene_data(d, *b, self.cfg)
                                for b in crop_bounds(d.gt.grid.dims, splits)]
        return self._crops[key]


class RmsUpdate:
    """Per-parameter step ``lr * g / (sqrt(mean g^2) + eps)`` with bias-corrected running mean, no momentum."""

    def __init__(self, ps: ParamSet, lr: float, beta: float = 0.99, eps: float = RMS_EPS):
        self.ps, self.lr, self.beta, self.eps = ps, lr, beta, eps
        self.sq = {k: torch.zeros_like(p) for k, p in ps.items()}
        self.t = 0

    @torch.no_grad()
    def step(self, grads: dict):
        self.t += 1
        corr = 1.0 - self.beta ** self.t
        for k, p in self.ps.items():
            g = grads.get(k)
            if g is None:
                continue
            self.sq[k].mul_(self.beta).addcmul_(g, g, value=1.0 - self.beta)
            p.sub_(self.lr * g / (torch.sqrt(self.sq[k] / corr) + self.eps))


def scene_losses(ps: ParamSet, data: SceneData, cfg: TrainConfig, epoch: int):
    out = gp.forward(ps, data.prepared, cfg.pipeline)
    gt, valid, mask3d = data.gt, data.prepared.valid, data.mask3d
    if data.core is not None:
        core = data.core.reshape(gt.grid.dims)
        gt = TsdfVolume(gt.grid, gt.values, gt.weights, gt.observed & core, gt.truncation)
        valid = valid & torch.from_numpy(data.core)[:, None]
        mask3d = mask3d & data.core
    L_o, L_t, L_p = sup.occupancy_and_tsdf_losses(out.tsdf, out.occupancy, out.proj_occ_logits, gt,
                                                  data.proj_occ, valid, cfg.loss.tsdf_log_transform)
    # normals need the full observed stencil, so they use the uncropped observation mask
    if sup.normal_active(epoch, cfg.loss):
        L_n, n = sup.normal_loss(out.tsdf, data.gt, mask3d, data.terms, data.gt_normals)
    else:
        with torch.no_grad():
            L_n, n = sup.normal_loss(out.tsdf.detach(), data.gt, mask3d, data.terms, data.gt_normals)
    total = sup.total_loss(L_o, L_t, L_p, L_n, epoch, cfg.loss)
    return total, (L_o, L_t, L_p, L_n, n)


@dataclass
class TrainResult:
    params: ParamSet
    log_path: Path
    checkpoint: Path
    steps: int
    seconds: float


def train(cfg: TrainConfig, out_dir, cache: SceneCache | None = None, seeds=None) -> TrainResult:
    """Train from scratch; writes ``train_log.jsonl``, ``config.json`` and one checkpoint per epoch."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(cfg.threads)
    cache = cache if cache is not None and cache.compatible(cfg) else SceneCache(cfg)
    train_seeds = seeds if seeds is not None else scene_seeds(cfg)[0]
    fileio.atomic_write(out_dir / "config.json", cfg.to_json())
    ps = gp.init_params(cfg.pipeline, cfg.seed)
    opt = RmsUpdate(ps, cfg.lr, cfg.rms_beta)
    rng = np.random.default_rng(cfg.seed)
    log_lines = []
    log_path = out_dir / "train_log.jsonl"
    step = 0
    t0 = time.perf_counter()
    ckpt = out_dir / "checkpoints"
    units = [(s, c) for s in train_seeds for c in range(int(np.prod(cfg.crops)))]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(units))
        for b in range(0, len(order), cfg.batch):
            batch = [units[i] for i in order[b:b + cfg.batch]]
            ps.zero_grad()
            parts = np.zeros(6)
            for seed, c in batch:
                data = cache.crops(seed, cfg.crops)[c]
                total, (L_o, L_t, L_p, L_n, n) = scene_losses(ps, data, cfg, epoch)
                vals = [float(x.detach()) for x in (total, L_o, L_t, L_p, L_n)]
                if not all(np.isfinite(vals)):
                    rec = {"step": step, "epoch": epoch, "scene": seed, "crop": c, "diverged": True}
                    log_lines.append(json.dumps(rec))
                    fileio.atomic_write(log_path, "\n".join(log_lines) + "\n")
                    raise TrainingDiverged(f"non-finite loss at step {step} (epoch {epoch}, scene {seed})")
                (total / len(batch)).backward()
                parts += np.array(vals + [n]) / len(batch)
            grads = {k: p.grad for k, p in ps.items()}
            opt.step(grads)
            ps.assert_finite()
            rep = sup.LossReport(parts[0], parts[1], parts[2], parts[3], parts[4], int(round(parts[5])), step, epoch)
            log_lines.append(rep.to_json())
            step += 1
        opt.lr *= cfg.lr_decay
        fileio.atomic_write(log_path, "\n".join(log_lines) + "\n")
        ps.save(ckpt / f"epoch_{epoch:03d}", step, {"epoch": epoch})
        log.info("epoch %d done, loss %.4f", epoch, parts[0])
    final = ckpt / f"epoch_{cfg.epochs:03d}"
    return TrainResult(ps, log_path, final, step, time.perf_counter() - t0)


def load_checkpoint(path, cfg: PipelineConfig) -> ParamSet:
    """Load parameters and check every name and shape against a fresh initialisation."""
    ps, _ = ParamSet.load(path)
    ref = gp.init_params(cfg, 0)
    if set(ps.names()) != set(ref.names()):
        missing = sorted(set(ref.names()) ^ set(ps.names()))
        raise ValueError(f"checkpoint parameters do not match the config: {missing[:5]}")
    for k, p in ref.items():
        if tuple(ps[k].shape) != tuple(p.shape):
            raise ValueError(f"checkpoint shape mismatch for {k}: {tuple(ps[k].shape)} vs {tuple(p.shape)}")
    return ps


@torch.no_grad()
def reconstruct(ps: ParamSet, views, grid: VoxelGrid, cfg: TrainConfig, prepared=None):
    """Predicted TSDF restricted to voxels predicted occupied, and its zero-level mesh."""
    prepared = prepared or gp.prepare_scene(views, grid, cfg.pipeline)
    out = gp.forward(ps, prepared, cfg.pipeline)
    s = out.tsdf.numpy().reshape(grid.dims)
    keep = (out.occupancy.numpy() > 0.5).reshape(grid.dims) & ~out.unseen.numpy().reshape(grid.dims)
    vol = TsdfVolume(grid, np.where(keep, s, 1.0), keep.astype(np.float64), keep, cfg.truncation)
    return marching_cubes(vol), vol


def gt_points(scene: synth.Scene, views, density: float, seed: int = 0) -> evalmetrics.PointSet:
    """Analytic surface samples seen by at least one view."""
    p, n = synth.sample_surface(scene, density, seed)
    seen = synth.visible_count(scene, p, views) >= 1
    return evalmetrics.PointSet(p[seen], n[seen])


def evaluate_mesh(mesh: Mesh, scene: synth.Scene, views, cfg: TrainConfig, seed: int = 0):
    gt = gt_points(scene, views, cfg.eval_density, seed)
    pred = evalmetrics.sample_mesh(mesh, cfg.eval_density, seed)
    if len(pred) == 0:
        return evalmetrics.MeshMetrics(np.inf, np.inf, 0.0, 0.0, 0.0, cfg.eval_threshold)
    return evalmetrics.mesh_metrics(pred, gt, cfg.eval_threshold)


def mean_metrics(ms) -> evalmetrics.MeshMetrics:
    f = lambda k: float(np.mean([getattr(m, k) for m in ms]))
    return evalmetrics.MeshMetrics(f("acc"), f("comp"), f("prec"), f("recall"), f("fscore"), ms[0].threshold)


def evaluate(ps: ParamSet, cfg: TrainConfig, cache: SceneCache, out_dir=None, seeds=None):
    """Reconstruct and score the held-out rooms; optionally write meshes and per-scene metrics."""
    seeds = seeds if seeds is not None else scene_seeds(cfg)[1]
    per = {}
    for seed in seeds:
        d = cache.get(seed)
        mesh, vol = reconstruct(ps, d.views, d.prepared.grid, cfg, d.prepared)
        m = evaluate_mesh(mesh, d.scene, d.views, cfg)
        per[seed] = m
        if out_dir is not None:
            out_dir = Path(out_dir)
            fileio.write_ply(out_dir / f"scene_{seed}.ply", mesh)
            fileio.write_tsdf(out_dir / f"scene_{seed}.tsdf", vol)
    return mean_metrics(list(per.values())), per


ABLATIONS = ("full", "priors_off", "average_fusion", "normal_loss_off")


def run_experiment(cfg: TrainConfig, out_dir, names=ABLATIONS, cache: SceneCache | None = None) -> dict:
    """Train and evaluate the full model and its single ablations on identical data and seeds."""
    out_dir = Path(out_dir)
    cache = cache or SceneCache(cfg)
    results = {}
    for name in names:
        c = ablation(cfg, name)
        res = train(c, out_dir / name, cache)
        mean, per = evaluate(res.params, c, cache, out_dir / name / "eval")
        results[name] = {"mean": dataclasses.asdict(mean),
                         "per_scene": {str(k): dataclasses.asdict(v) for k, v in per.items()},
                         "train_seconds": round(res.seconds, 1)}
        log.info("%s: F=%.4f", name, mean.fscore)
    summary = {k: {kk: vv for kk, vv in v.items() if kk != "train_seconds"} for k, v in results.items()}
    fileio.atomic_write(out_dir / "results.json", json.dumps(summary, indent=1, sort_keys=True))
    return results
