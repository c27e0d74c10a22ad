"""Geometry-guided feature learning, adaptive view fusion and the TSDF head.

Data flow for one scene with T views and N voxels::

    pixel features --stem--> back-projection V (N, T, C)
    [encoded priors] --MLP--> concat V --linear--> transformer      (stage 1)
    [projected normal, phi] --linear--> transformer --> phi2, A     (stage 2)
    phi2 --linear+sigmoid--> projective occupancy O (N, T)
    [mean/std of A, mean/std of pose distances, O] --MLP--> softmax w
    sum_i w_i phi2_i --> dense 3D conv head --> TSDF, occupancy

Views are processed in a canonical order (sorted by pose), so permuting
the input views permutes the per-view outputs and leaves fused results
bit-identical even though the fusion MLP sees views positionally.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from . import camgeom, tensornn as nn
from .config import PipelineConfig
from .tensornn import DTYPE, AttentionRecord, ParamSet
from .voxelvol import VoxelGrid

FUSION_HIDDEN = 32
GEO_HIDDEN = 32
GEO_OUT_BIAS = 1.0  # the single rectified geometry channel must start active


def init_params(cfg: PipelineConfig, seed: int = 0) -> ParamSet:
    rng = np.random.default_rng(seed)
    c, T = cfg.c_v, cfg.n_views
    ps = ParamSet(seed)
    ps.add_linear("stem", cfg.c_px, c, rng)
    nn.add_mlp(ps, "t1.mlp", [cfg.geo_channels, GEO_HIDDEN, 1], rng)
    with torch.no_grad():
        ps["t1.mlp.1.bias"].fill_(GEO_OUT_BIAS)
    ps.add_linear("t1.linear", c + 1, c, rng)
    nn.add_transformer(ps, "t1.tf", c, rng)
    ps.add_linear("t2.linear", c + 3, c, rng)
    nn.add_transformer(ps, "t2.tf", c, rng)
    ps.add_linear("occ", c, 1, rng)
    nn.add_mlp(ps, "fusion.mlp", [fusion_channels(T), FUSION_HIDDEN, FUSION_HIDDEN, T], rng)
    bound = 1.0 / np.sqrt(27 * c)
    for i in range(2):
        ps.add(f"head.conv{i}.weight", rng.uniform(-bound, bound, (c, c, 3, 3, 3)))
        ps.add(f"head.conv{i}.bias", rng.uniform(-bound, bound, c))
    ps.add_linear("head.tsdf", c, 1, rng)
    ps.add_linear("head.occ", c, 1, rng)
    return ps


def fusion_channels(T: int) -> int:
    return 2 * T + 6 * T + T


def canonical_view_order(poses) -> np.ndarray:
    """Permutation sorting views by camera position, then rotation entries."""
    keys = np.stack([np.concatenate([p.translation, p.rotation.ravel()]) for p in poses])
    return np.lexsort(keys.T[::-1])


def encode_geometry(pri: camgeom.GeoPriors, L: int = 4) -> np.ndarray:
    """[enc(v) (6L), enc(z) (2L), v (3), z (1), theta (1)] per voxel."""
    z = pri.proj_depth[:, None]
    g = np.concatenate([camgeom.positional_encode(pri.view_dir, L), camgeom.positional_encode(z, L),
                        pri.view_dir, z, pri.view_angle[:, None]], axis=1)
    return np.where(pri.valid[:, None], g, 0.0)


def geometry_channel_mask(cfg: PipelineConfig) -> np.ndarray:
    L = cfg.pe_levels
    m = np.ones(cfg.geo_channels)
    dir_ch = list(range(0, 6 * L)) + list(range(8 * L, 8 * L + 3))
    depth_ch = list(range(6 * L, 8 * L)) + [8 * L + 3]
    if not cfg.use_view_dir:
        m[dir_ch] = 0.0
    if not cfg.use_depth:
        m[depth_ch] = 0.0
    if not cfg.use_angle:
        m[8 * L + 4] = 0.0
    return m


@dataclass
class PreparedScene:
    """Parameter-independent inputs of one scene, in canonical view order.

    Per-view voxel arrays are voxel-major, (N, T, ...), which keeps the
    attention across views free of layout copies.
    """

    grid: VoxelGrid
    order: np.ndarray  # canonical slot j holds input view order[j]
    valid: torch.Tensor  # (N, T) bool
    sampler: torch.Tensor  # sparse (N*T, T*P) bilinear back-projection operator
    geometry: torch.Tensor  # (N, T, geo_channels)
    normals: torch.Tensor  # (N, T, 3) camera frame
    rotations: np.ndarray  # (T, 3, 3)
    rp_stats: torch.Tensor  # (6T,)
    pixels: torch.Tensor  # (T*P, C_px)
    priors: list  # GeoPriors per canonical slot

    @property
    def n_views(self) -> int:
        return self.valid.shape[1]

    @property
    def n_voxels(self) -> int:
        return self.valid.shape[0]

    def to_input_order(self, x, axis: int = 0):
        """Reorder canonical views along ``axis`` back to the caller's view order."""
        inv = np.argsort(self.order)
        if isinstance(x, torch.Tensor):
            return x.index_select(axis, torch.as_tensor(inv))
        return np.take(x, inv, axis=axis)


def pose_distance_stats(poses) -> np.ndarray:
    """Per-view mean and population std of rot/trans/overall distance to the other views.

    Layout: [mean rot (T), mean trans (T), mean overall (T), std rot, std trans, std overall].
    """
    rp = camgeom.relative_pose_distance(poses)
    T = len(poses)
    means, stds = [], []
    for mat in (rp.rot, rp.trans, rp.overall):
        if T == 1:
            means.append(np.zeros(1))
            stds.append(np.zeros(1))
            continue
        off = ~np.eye(T, dtype=bool)
        vals = mat[off].reshape(T, T - 1)
        means.append(vals.mean(1))
        stds.append(vals.std(1))
    return np.concatenate(means + stds)


def sampling_operator(taps_idx: np.ndarray, taps_w: np.ndarray, n_pixels: int) -> torch.Tensor:
    """Sparse matrix mapping stacked pixel features (T*P, C) to voxel samples (N*T, C).

    ``taps_idx``/``taps_w`` are (N, T, 4) flat pixel indices and bilinear weights.
    """
    N, T, _ = taps_idx.shape
    rows = np.repeat(np.arange(N * T), 4)
    cols = (taps_idx + (np.arange(T) * n_pixels)[None, :, None]).ravel()
    w = taps_w.ravel()
    keep = w != 0
    idx = torch.from_numpy(np.stack([rows[keep], cols[keep]]))
    op = torch.sparse_coo_tensor(idx, torch.from_numpy(w[keep].astype(np.float64)),
                                 (N * T, T * n_pixels), check_invariants=False)
    with warnings.catch_warnings():  # CSR support is flagged beta; sparse.mm on it is stable
        warnings.simplefilter("ignore", UserWarning)
        return op.coalesce().to_sparse_csr()


def prepare_scene(views, grid: VoxelGrid, cfg: PipelineConfig) -> PreparedScene:
    T = len(views)
    if T != cfg.n_views:
        raise ValueError(f"pipeline configured for {cfg.n_views} views, got {T}")
    order = canonical_view_order([v.pose for v in views])
    views = [views[i] for i in order]
    pts = grid.points()
    valid, idx, wts, geo, nrm, pri_list = [], [], [], [], [], []
    for v in views:
        pri = camgeom.compute_geo_priors(pts, v)
        pix, _, _ = camgeom.project(pts, v.intrinsics, v.pose)
        pix = np.where(np.isfinite(pix), pix, 0.0)
        i4, w4 = camgeom.bilinear_taps(pix, v.intrinsics.width, v.intrinsics.height)
        w4 = np.where(pri.valid[:, None], w4, 0.0)
        valid.append(pri.valid)
        idx.append(i4)
        wts.append(w4)
        geo.append(encode_geometry(pri, cfg.pe_levels))
        nrm.append(pri.proj_normal)
        pri_list.append(pri)
    n_pix = views[0].features.shape[1] * views[0].features.shape[2]
    if any(v.features.shape[1] * v.features.shape[2] != n_pix for v in views):
        raise ValueError("all views must share one image size")
    pixels = np.concatenate([v.features.reshape(v.features.shape[0], -1).T for v in views])
    return PreparedScene(
        grid=grid, order=order,
        valid=torch.from_numpy(np.stack(valid, 1)),
        sampler=sampling_operator(np.stack(idx, 1), np.stack(wts, 1), n_pix),
        geometry=torch.from_numpy(np.ascontiguousarray(np.stack(geo, 1))),
        normals=torch.from_numpy(np.ascontiguousarray(np.stack(nrm, 1))),
        rotations=np.stack([v.pose.rotation for v in views]),
        rp_stats=torch.from_numpy(pose_distance_stats([v.pose for v in views])),
        pixels=torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float64)),
        priors=pri_list,
    )


def feature_stem(pixels: torch.Tensor, ps: ParamSet) -> torch.Tensor:
    """Per-pixel linear + ReLU on stacked (T*P, C_px) pixels -> (T*P, C)."""
    return nn.relu(nn.linear(pixels, ps["stem.weight"], ps["stem.bias"]))


def backproject_features(pixel_feats: torch.Tensor, sampler: torch.Tensor, n_views: int) -> torch.Tensor:
    """Bilinear back-projection to voxel features (N, T, C); zero where a view is invalid."""
    out = torch.sparse.mm(sampler, pixel_feats)
    return out.reshape(-1, n_views, pixel_feats.shape[1])


def _uniform_attention(valid: torch.Tensor) -> AttentionRecord:
    vm = valid.to(DTYPE)  # N, T
    pair = vm[:, :, None] * vm[:, None, :]
    s = pair.sum(-1, keepdim=True)
    return AttentionRecord(pair / torch.where(s > 0, s, torch.ones((), dtype=DTYPE)))


def _temporal(x, ps, prefix, valid, cfg):
    if cfg.use_transformer:
        return nn.transformer_block(x, ps, prefix, valid, cfg.heads, views_first=False)
    return x, _uniform_attention(valid)


def g2fl_stage1(V, geometry, valid, ps: ParamSet, cfg: PipelineConfig):
    """Geometry-weighted features. All per-view tensors are (N, T, ...)."""
    if geometry.shape[-1] != cfg.geo_channels:
        raise ValueError(f"geometry has {geometry.shape[-1]} channels, expected {cfg.geo_channels}")
    mask = geometry_channel_mask(cfg)
    if not mask.all():
        geometry = geometry * torch.from_numpy(mask)
    gfeat = nn.mlp(geometry, ps, "t1.mlp", 2, final_relu=True)
    g = nn.linear(torch.cat([gfeat, V], dim=-1), ps["t1.linear.weight"], ps["t1.linear.bias"])
    g = g * valid[..., None].to(g.dtype)
    return _temporal(g, ps, "t1.tf", valid, cfg)


def g2fl_stage2(phi, normals, valid, ps: ParamSet, cfg: PipelineConfig):
    n = normals if cfg.use_normal else torch.zeros_like(normals)
    h = nn.linear(torch.cat([n, phi], dim=-1), ps["t2.linear.weight"], ps["t2.linear.bias"])
    h = h * valid[..., None].to(h.dtype)
    return _temporal(h, ps, "t2.tf", valid, cfg)


def predict_projective_occupancy(phi2, ps: ParamSet):
    """Per-view logits (N, T); probabilities are their sigmoid."""
    return nn.linear(phi2, ps["occ.weight"], ps["occ.bias"])[..., 0]


@dataclass
class FusionInputs:
    attn_mean: torch.Tensor  # (N, T)
    attn_std: torch.Tensor  # (N, T)
    rp_mean: torch.Tensor  # (N, 3T)
    rp_std: torch.Tensor  # (N, 3T)
    occ: torch.Tensor  # (N, T)

    def stacked(self) -> torch.Tensor:
        """(N, 9T) in the order [mean A, std A, mean rp, std rp, O]."""
        return torch.cat([self.attn_mean, self.attn_std, self.rp_mean, self.rp_std, self.occ], 1)


def build_fusion_inputs(attn: AttentionRecord, rp_stats: torch.Tensor, occ: torch.Tensor,
                        valid: torch.Tensor) -> FusionInputs:
    """Row statistics of the attention over valid views plus broadcast pose statistics."""
    A = attn.A  # N, T, T
    vm = valid.to(DTYPE)  # N, T
    cnt = vm.sum(-1, keepdim=True)
    safe = torch.where(cnt > 0, cnt, torch.ones((), dtype=DTYPE))
    mean = (A * vm[:, None, :]).sum(-1) / safe
    dev = (A - mean[..., None]) * vm[:, None, :]
    std = nn.safe_sqrt((dev * dev).sum(-1) / safe)
    mean, std = mean * vm, std * vm
    N, T = valid.shape
    rp = rp_stats.reshape(2, 3 * T)
    return FusionInputs(mean, std, rp[0][None].expand(N, 3 * T), rp[1][None].expand(N, 3 * T), occ)


def fuse_volumes(feats, fin: FusionInputs, valid, ps: ParamSet, cfg: PipelineConfig):
    """Softmax-weighted sum of per-view (N, T, C) features. Returns ``(fused (N, C), w (N, T))``."""
    T = valid.shape[1]
    x = fin.stacked()
    if x.shape[1] != fusion_channels(T):
        raise ValueError(f"fusion input has {x.shape[1]} channels, expected {fusion_channels(T)}")
    if cfg.fusion_mode == "adaptive":
        logits = nn.mlp(x, ps, "fusion.mlp", 3)
    else:
        logits = torch.zeros(valid.shape, dtype=DTYPE)
    w = nn.masked_softmax(logits, valid, dim=-1)
    fused = torch.bmm(w[:, None, :], feats)[:, 0]
    return fused, w


def tsdf_head(fused: torch.Tensor, dims, ps: ParamSet):
    """Two 3x3x3 conv + ReLU layers, then tanh TSDF and sigmoid occupancy heads."""
    C = fused.shape[1]
    h = fused.T.reshape(C, *dims)
    for i in range(2):
        h = nn.relu(nn.conv3d(h, ps[f"head.conv{i}.weight"], ps[f"head.conv{i}.bias"]))
    h = h.reshape(C, -1).T
    W = torch.cat([ps["head.tsdf.weight"], ps["head.occ.weight"]])
    b = torch.cat([ps["head.tsdf.bias"], ps["head.occ.bias"]])
    out = nn.linear(h, W, b)
    return torch.tanh(out[:, 0]), nn.sigmoid(out[:, 1])


@dataclass
class PipelineOutput:
    fused: torch.Tensor  # (N, C)
    weights: torch.Tensor  # (T, N), input view order
    tsdf: torch.Tensor  # (N,)
    occupancy: torch.Tensor  # (N,)
    proj_occ_logits: torch.Tensor  # (N, T), canonical order, for the losses
    unseen: torch.Tensor  # (N,) voxels with no valid view
    attn1: AttentionRecord
    attn2: AttentionRecord
    fusion_inputs: FusionInputs


def forward(ps: ParamSet, scene: PreparedScene, cfg: PipelineConfig) -> PipelineOutput:
    valid = scene.valid
    pf = feature_stem(scene.pixels, ps)
    V = backproject_features(pf, scene.sampler, scene.n_views)
    phi, attn1 = g2fl_stage1(V, scene.geometry, valid, ps, cfg)
    phi2, attn2 = g2fl_stage2(phi, scene.normals, valid, ps, cfg)
    logits = predict_projective_occupancy(phi2, ps)
    occ = nn.sigmoid(logits) * valid.to(DTYPE)
    fin = build_fusion_inputs(attn2, scene.rp_stats, occ, valid)
    fused, w = fuse_volumes(V if cfg.fuse_raw_features else phi2, fin, valid, ps, cfg)
    s, o = tsdf_head(fused, scene.grid.dims, ps)
    return PipelineOutput(fused, scene.to_input_order(w.T), s, o, logits,
                          ~valid.any(1), attn1, attn2, fin)
