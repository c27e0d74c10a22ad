"""Finite-difference gradient suite over the primitives and composed graphs."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from . import g2pipeline as gp, supervision as sup, synth, tensornn as nn
from .config import PipelineConfig
from .tensornn import DTYPE, ParamSet
from .voxelvol import TsdfVolume, VoxelGrid, tsdf_normals

PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3
KINK_TOL = 1e-3  # one-sided slope mismatch marking a rectifier switching inside the stencil
MODULES = ("tensornn", "g2pipeline", "supervision")


@dataclass
class Check:
    module: str
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.module}.{self.name} rel_err={self.error:.2e} tol={self.tol:.0e}"


def _rand(rng, *shape, scale=1.0):
    return torch.tensor(rng.normal(size=shape) * scale, dtype=DTYPE, requires_grad=True)


def _proj(rng, shape):
    return torch.tensor(rng.normal(size=shape), dtype=DTYPE)


def _check(module, name, fn, inputs, tol, rng, max_entries=None, kink_tol=None) -> Check:
    errs = nn.finite_difference_check(fn, inputs, max_entries=max_entries, rng=rng, kink_tol=kink_tol)
    return Check(module, name, max(errs.values()), tol)


def primitive_checks(seed: int = 0):
    rng = np.random.default_rng(seed)
    out = []
    x, W, b = _rand(rng, 4, 3, 5), _rand(rng, 6, 5), _rand(rng, 6)
    R = _proj(rng, (4, 3, 6))
    out.append(_check("tensornn", "linear", lambda: (nn.linear(x, W, b) * R).sum(),
                      {"x": x, "W": W, "b": b}, PRIMITIVE_TOL, rng))
    a = _rand(rng, 7, 5)
    with torch.no_grad():  # keep entries away from the kink
        a += torch.sign(a) * 0.05
    Ra = _proj(rng, (7, 5))
    out.append(_check("tensornn", "relu", lambda: (nn.relu(a) * Ra).sum(), {"x": a}, PRIMITIVE_TOL, rng))
    s = _rand(rng, 7, 5, scale=2.0)
    out.append(_check("tensornn", "sigmoid", lambda: (nn.sigmoid(s) * Ra).sum(), {"x": s}, PRIMITIVE_TOL, rng))
    h, g, be = _rand(rng, 3, 4, 8), _rand(rng, 8), _rand(rng, 8)
    Rh = _proj(rng, (3, 4, 8))
    out.append(_check("tensornn", "layernorm", lambda: (nn.layernorm(h, g, be) * Rh).sum(),
                      {"x": h, "gamma": g, "beta": be}, PRIMITIVE_TOL, rng))
    lg = _rand(rng, 5, 6, scale=2.0)
    mask = torch.from_numpy(rng.random((5, 6)) < 0.7)
    mask[0] = False
    Rs = _proj(rng, (5, 6))
    out.append(_check("tensornn", "masked_softmax", lambda: (nn.masked_softmax(lg, mask) * Rs).sum(),
                      {"x": lg}, PRIMITIVE_TOL, rng))
    out.append(_check("tensornn", "softmax", lambda: (nn.masked_softmax(lg) * Rs).sum(),
                      {"x": lg}, PRIMITIVE_TOL, rng))
    q = torch.tensor(rng.uniform(0.1, 2.0, (6,)), dtype=DTYPE, requires_grad=True)
    out.append(_check("tensornn", "safe_sqrt", lambda: (nn.safe_sqrt(q) * Rs[0]).sum(), {"x": q},
                      PRIMITIVE_TOL, rng))
    ps = ParamSet(seed)
    nn.add_mlp(ps, "m", [5, 7, 3], rng)
    xm = _rand(rng, 6, 5)
    Rm = _proj(rng, (6, 3))
    out.append(_check("tensornn", "mlp", lambda: (nn.mlp(xm, ps, "m", 2) * Rm).sum(),
                      dict(ps.items(), x=xm), PRIMITIVE_TOL, rng))
    ps = ParamSet(seed)
    nn.add_transformer(ps, "tf", 8, rng)
    xt = _rand(rng, 3, 5, 8)
    valid = torch.from_numpy(rng.random((3, 5)) < 0.75)
    valid[:, 0] = True
    Rt = _proj(rng, (3, 5, 8))
    RA = _proj(rng, (5, 3, 3))

    def tf():
        y, rec = nn.transformer_block(xt, ps, "tf", valid, 2)
        return (y * Rt).sum() + (rec.A * RA).sum()
    out.append(_check("tensornn", "transformer_block", tf, dict(ps.items(), x=xt), PRIMITIVE_TOL, rng))
    xc, Wc, bc = _rand(rng, 2, 4, 3, 3), _rand(rng, 2, 2, 3, 3, 3), _rand(rng, 2)
    Rc = _proj(rng, (2, 4, 3, 3))
    out.append(_check("tensornn", "conv3d", lambda: (nn.conv3d(xc, Wc, bc) * Rc).sum(),
                      {"x": xc, "W": Wc, "b": bc}, PRIMITIVE_TOL, rng))
    return out


def tiny_scene(T: int = 3, n: int = 6, image: int = 8, seed: int = 3):
    """A real rendered room on an n^3 grid, small enough for exhaustive differencing."""
    scene = synth.generate_scene(seed)
    views = synth.render_orbit(scene, T, image)
    vs = (np.asarray(scene.room_hi) - np.asarray(scene.room_lo)).max() / (n - 1)
    grid = VoxelGrid(np.asarray(scene.room_lo), vs, (n, n, n))
    return scene, views, grid


def pipeline_checks(seed: int = 0, max_entries: int = 4):
    rng = np.random.default_rng(seed)
    cfg = PipelineConfig(c_v=8, n_views=3)
    _, views, grid = tiny_scene(3, 6)
    sc = gp.prepare_scene(views, grid, cfg)
    ps = gp.init_params(cfg, seed)
    N, T, C = sc.n_voxels, 3, cfg.c_v
    P = dict(ps.items())
    out = []

    V = _rand(rng, N, T, C)
    R1 = _proj(rng, (N, T, C))
    RA = _proj(rng, (N, T, T))

    def t1():
        phi, rec = gp.g2fl_stage1(V, sc.geometry, sc.valid, ps, cfg)
        return (phi * R1).sum() + (rec.A * RA).sum()
    out.append(_check("g2pipeline", "t1", t1, dict(P, V=V), COMPOSITE_TOL, rng, max_entries,
                      kink_tol=KINK_TOL))

    phi = _rand(rng, N, T, C)

    def t2():
        phi2, rec = gp.g2fl_stage2(phi, sc.normals, sc.valid, ps, cfg)
        return (phi2 * R1).sum() + (rec.A * RA).sum()
    out.append(_check("g2pipeline", "t2", t2, dict(P, phi=phi), COMPOSITE_TOL, rng, max_entries,
                      kink_tol=KINK_TOL))

    A = torch.softmax(_proj(rng, (N, T, T)), -1).requires_grad_(True)
    occ = torch.tensor(rng.uniform(0.05, 0.95, (N, T)), dtype=DTYPE, requires_grad=True)
    feats = _rand(rng, N, T, C)
    Rf = _proj(rng, (N, C))

    def fusion():
        fin = gp.build_fusion_inputs(nn.AttentionRecord(A), sc.rp_stats, occ, sc.valid)
        fused, w = gp.fuse_volumes(feats, fin, sc.valid, ps, cfg)
        return (fused * Rf).sum()
    out.append(_check("g2pipeline", "fusion", fusion, dict(P, A=A, occ=occ, feats=feats),
                      COMPOSITE_TOL, rng, max_entries, kink_tol=KINK_TOL))

    fused = _rand(rng, N, C)
    Rs, Ro = _proj(rng, (N,)), _proj(rng, (N,))

    def head():
        s, o = gp.tsdf_head(fused, grid.dims, ps)
        return (s * Rs).sum() + (o * Ro).sum()
    out.append(_check("g2pipeline", "head", head, dict(P, fused=fused), COMPOSITE_TOL, rng, max_entries,
                      kink_tol=KINK_TOL))

    Rl = _proj(rng, (N, T))

    def end_to_end():
        o = gp.forward(ps, sc, cfg)
        return (o.tsdf * Rs).sum() + (o.occupancy * Ro).sum() + (o.proj_occ_logits * Rl).sum()
    out.append(_check("g2pipeline", "end_to_end", end_to_end, P, COMPOSITE_TOL, rng, max_entries,
                      kink_tol=KINK_TOL))
    return out


def supervision_checks(seed: int = 0):
    """Normal loss gradient with respect to the predicted TSDF on an 8^3 volume."""
    rng = np.random.default_rng(seed)
    n = 8
    grid = VoxelGrid(np.zeros(3), 0.05, (n, n, n))
    p = grid.points() - 0.175
    sdf = np.linalg.norm(p, axis=1) - 0.1
    gt = TsdfVolume.from_sdf(grid, sdf, 0.15)
    normals = tsdf_normals(gt)
    terms = sup.ConsistencyTerms(normals.normals.reshape(-1, 3), np.ones(grid.num_voxels),
                                 np.ones(grid.num_voxels), normals.defined.ravel())
    pred = torch.tensor(gt.values.ravel() + 0.2 * rng.normal(size=grid.num_voxels), dtype=DTYPE,
                        requires_grad=True)
    mask = np.ones(grid.num_voxels, bool)
    fn = lambda: sup.normal_loss(pred, gt, mask, terms, normals)[0]
    return [_check("supervision", "normal_loss", fn, {"S_pred": pred}, COMPOSITE_TOL, rng)]


def run(module: str = "all", seed: int = 0):
    if module not in MODULES + ("all",):
        raise ValueError(f"unknown module {module!r}; choose from {MODULES + ('all',)}")
    t0 = time.perf_counter()
    checks = []
    if module in ("tensornn", "all"):
        checks += primitive_checks(seed)
    if module in ("g2pipeline", "all"):
        checks += pipeline_checks(seed)
    if module in ("supervision", "all"):
        checks += supervision_checks(seed)
    return checks, time.perf_counter() - t0
