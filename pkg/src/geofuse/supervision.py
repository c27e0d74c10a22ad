"""Training losses: consistent 3D normal loss, occupancy and TSDF terms.

All per-view arrays follow the pipeline's canonical view order and are
voxel-major, (N, T).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy import ndimage

from . import camgeom
from .config import LossConfig
from .voxelvol import (EPS_GRAD, NormalVolume, TsdfVolume, prewitt_gradient, stencil_complete,
                       tsdf_normals)

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


def boundary_mask_2d(normal_map: np.ndarray, threshold: float = 0.3) -> np.ndarray:
    """Kept (planar) pixels of an (H, W, 3) normal image.

    Each channel gets a Sobel gradient scaled to units per pixel; a pixel is a
    raw boundary when the per-channel gradient magnitudes sum above
    ``threshold``. Raw boundaries grow by one 8-connected ring before the
    complement is taken.
    """
    nm = np.asarray(normal_map, dtype=np.float64)
    mag = np.zeros(nm.shape[:2])
    for c in range(nm.shape[2]):
        gx = ndimage.sobel(nm[..., c], axis=1, mode="nearest") / 8.0
        gy = ndimage.sobel(nm[..., c], axis=0, mode="nearest") / 8.0
        mag += np.hypot(gx, gy)
    raw = mag > threshold
    grown = ndimage.binary_dilation(raw, structure=np.ones((3, 3), bool))
    return ~grown


def backproject_mask(masks, points, views) -> np.ndarray:
    """Voxel kept iff some view sees it and every view that sees it samples a kept pixel."""
    pts = camgeom.as_points(points)
    seen = np.zeros(len(pts), bool)
    keep = np.ones(len(pts), bool)
    for m, v in zip(masks, views):
        K = v.intrinsics
        pix, _, valid = camgeom.project(pts, K, v.pose)
        idx = camgeom.nearest_pixel(np.where(valid[:, None], pix, 0.0), K.width, K.height)
        ok = np.asarray(m, bool).ravel()[idx]
        seen |= valid
        keep &= ~valid | ok
    return seen & keep


@dataclass
class ConsistencyTerms:
    projected: np.ndarray  # (N, 3) world-frame view-averaged 2D normal
    similarity: np.ndarray  # (N,)
    weight: np.ndarray  # (N,)
    defined: np.ndarray  # (N,) both normals available


def consistency_terms(normals: NormalVolume, priors, rotations, mode: str = "indicator",
                      sigma2: float = 0.5) -> ConsistencyTerms:
    """Agreement between 3D normals and the rotated 2D normals of the views seeing each voxel."""
    N3 = normals.normals.reshape(-1, 3)
    acc = np.zeros_like(N3)
    count = np.zeros(len(N3))
    for pri, R in zip(priors, rotations):
        acc += np.where(pri.valid[:, None], pri.proj_normal @ np.asarray(R).T, 0.0)
        count += pri.valid
    nrm = np.linalg.norm(acc, axis=1)
    has = (count > 0) & (nrm > 1e-12)
    proj = np.zeros_like(acc)
    proj[has] = acc[has] / nrm[has, None]
    defined = has & normals.defined.ravel()
    s = np.where(defined, np.clip(np.einsum("nc,nc->n", N3, proj), -1.0, 1.0), 0.0)
    if mode == "indicator":
        w = (s > 0).astype(np.float64)
    elif mode == "gaussian":
        w = np.exp(-((s - 1.0) ** 2) / sigma2)
    else:
        raise ValueError(f"unknown consistency mode {mode!r}")
    return ConsistencyTerms(proj, s, np.where(defined, w, 0.0), defined)


def normal_loss(S_pred: torch.Tensor, S_gt: TsdfVolume, mask3d: np.ndarray, terms: ConsistencyTerms,
                gt_normals: NormalVolume | None = None):
    """``1 - mean(W * cos(N_gt, N_pred))`` over contributing near-surface voxels.

    Returns ``(loss, count)``; ``loss`` is a differentiable scalar through ``S_pred``.
    """
    grid = S_gt.grid
    dims = grid.dims
    S = S_pred.reshape(dims)
    gt_normals = gt_normals or tsdf_normals(S_gt)
    g = prewitt_gradient(S, grid.voxel_size)  # 3, nx-2, ny-2, nz-2
    gnorm = torch.linalg.vector_norm(g.detach(), dim=0).numpy()
    pred_def = np.zeros(dims, bool)
    pred_def[1:-1, 1:-1, 1:-1] = gnorm >= EPS_GRAD
    pred_def &= stencil_complete(S_gt.observed)
    support = (pred_def & gt_normals.defined & np.asarray(mask3d, bool).reshape(dims)
               & (terms.weight.reshape(dims) > 0) & (np.abs(S_gt.values) < 1.0))
    n = int(support.sum())
    if n == 0:
        log.warning("normal loss has no contributing voxels; using 0")
        return S_pred.sum() * 0.0, 0
    inner = torch.from_numpy(support[1:-1, 1:-1, 1:-1])
    gp = g[:, inner]  # 3, n
    ngt = torch.from_numpy(gt_normals.normals[support].T.copy())
    w = torch.from_numpy(terms.weight.reshape(dims)[support])
    cos = (gp * ngt).sum(0) / torch.linalg.vector_norm(gp, dim=0)
    return 1.0 - (w * cos).sum() / n, n


def bce(p: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Elementwise binary cross-entropy on probabilities clamped to [eps, 1 - eps]."""
    p = p.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p))


def log_transform(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.log1p(torch.abs(x))


def _masked_mean(x: torch.Tensor, mask: torch.Tensor, what: str) -> torch.Tensor:
    n = int(mask.sum())
    if n == 0:
        log.warning("%s loss has an empty supervision set; using 0", what)
        return x.sum() * 0.0
    return x[mask].sum() / n


def occupancy_and_tsdf_losses(tsdf_pred, occ_pred, proj_logits, gt_tsdf: TsdfVolume,
                              gt_proj_occ: np.ndarray, view_valid, log_tsdf: bool = False):
    """``(L_o, L_tsdf, L_proj_occ)``.

    ``gt_proj_occ`` and ``view_valid`` are (N, T). Occupancy supervision covers
    observed voxels; the TSDF term covers observed voxels that are predicted
    occupied or truly near the surface.
    """
    observed = torch.from_numpy(gt_tsdf.observed.ravel())
    s_gt = torch.from_numpy(gt_tsdf.values.ravel())
    occ_gt = ((s_gt.abs() < 1.0) & observed).to(s_gt.dtype)
    L_o = _masked_mean(bce(occ_pred, occ_gt), observed, "occupancy")

    support = observed & ((occ_pred.detach() > 0.5) | (occ_gt > 0))
    a, b = (log_transform(tsdf_pred), log_transform(s_gt)) if log_tsdf else (tsdf_pred, s_gt)
    L_t = _masked_mean(torch.abs(a - b), support, "tsdf")

    vv = torch.as_tensor(np.asarray(view_valid, bool))
    target = torch.from_numpy(np.asarray(gt_proj_occ, dtype=np.float64))
    L_p = _masked_mean(bce(torch.sigmoid(proj_logits), target), vv, "projective occupancy")
    return L_o, L_t, L_p


@dataclass
class LossReport:
    total: float
    occupancy: float
    tsdf: float
    proj_occ: float
    normal: float
    normal_count: int
    step: int = 0
    epoch: int = 0

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps({k: d[k] for k in ("step", "epoch", "total", "occupancy", "tsdf",
                                             "proj_occ", "normal", "normal_count")})


def normal_active(epoch: int, cfg: LossConfig) -> bool:
    """Epochs count from 1; the normal term joins once ``normal_after_epoch`` epochs are done."""
    return cfg.normal_loss and epoch > cfg.normal_after_epoch


def total_loss(L_o, L_t, L_p, L_n, epoch: int, cfg: LossConfig | None = None):
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    cfg = cfg or LossConfig()
    w = cfg.weights
    total = w[0] * L_o + w[1] * L_t + w[2] * L_p
    if normal_active(epoch, cfg):
        total = total + w[3] * L_n
    return total
