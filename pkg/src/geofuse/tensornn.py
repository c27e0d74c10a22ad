"""Float64 neural building blocks on top of torch autograd.

Parameters live in a flat, named ``ParamSet``; every block is a plain
function of its inputs and the parameters it reads by name, which keeps
the gradient checks simple to drive.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64
Tensor = torch.Tensor


def tensor(x, requires_grad: bool = False) -> Tensor:
    return torch.tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE, requires_grad=requires_grad)


class ParamSet:
    """Ordered name -> tensor mapping of trainable parameters."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._params: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = value.detach().clone() if isinstance(value, Tensor) else tensor(value)
        t = t.to(DTYPE).requires_grad_(True)
        self._params[name] = t
        return t

    def add_linear(self, prefix: str, c_in: int, c_out: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(c_in)
        self.add(f"{prefix}.weight", rng.uniform(-bound, bound, (c_out, c_in)))
        self.add(f"{prefix}.bias", rng.uniform(-bound, bound, c_out))

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def count(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def assert_finite(self):
        for name, p in self._params.items():
            if not torch.isfinite(p).all():
                raise FloatingPointError(f"parameter {name} is not finite")

    def copy(self) -> "ParamSet":
        out = ParamSet(self.seed)
        for k, v in self._params.items():
            out.add(k, v)
        return out

    def save(self, directory, step: int = 0, extra: dict | None = None) -> Path:
        """Write ``manifest.json`` plus one little-endian float64 blob per parameter."""
        directory = Path(directory)
        tmp = directory.with_name(directory.name + ".tmp")
        tmp.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, (name, p) in enumerate(self._params.items()):
            fname = f"{i:03d}.bin"
            (tmp / fname).write_bytes(p.detach().numpy().astype("<f8").tobytes())
            entries.append({"name": name, "shape": list(p.shape), "file": fname})
        manifest = {"format": "geofuse-params-v1", "dtype": "<f8", "seed": self.seed,
                    "step": step, "params": entries}
        if extra:
            manifest.update(extra)
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        if directory.exists():
            for f in directory.iterdir():
                f.unlink()
            directory.rmdir()
        os.replace(tmp, directory)
        return directory

    @classmethod
    def load(cls, directory) -> tuple["ParamSet", dict]:
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        ps = cls(manifest.get("seed", 0))
        for e in manifest["params"]:
            raw = np.frombuffer((directory / e["file"]).read_bytes(), dtype="<f8")
            if raw.size != int(np.prod(e["shape"])):
                raise ValueError(f"blob size mismatch for {e['name']}")
            ps.add(e["name"], raw.reshape(e["shape"]).astype(np.float64))
        return ps, manifest


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W.T + b`` over the last axis."""
    if W.dim() != 2 or x.shape[-1] != W.shape[1]:
        raise ValueError(f"linear: input channels {x.shape[-1]} do not match weight {tuple(W.shape)}")
    if b is not None and b.shape != (W.shape[0],):
        raise ValueError(f"linear: bias shape {tuple(b.shape)} does not match weight {tuple(W.shape)}")
    return F.linear(x, W, b)


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the channel (last) axis with learned scale and shift."""
    return F.layer_norm(x, (x.shape[-1],), gamma, beta, eps)


def masked_softmax(logits: Tensor, mask: Tensor | None = None, dim: int = -1) -> Tensor:
    """Softmax over ``dim`` ignoring entries where ``mask`` is False.

    Masked entries come out exactly 0; a slice with nothing unmasked is all 0.
    """
    if mask is None:
        return torch.softmax(logits, dim=dim)
    mask = mask.to(torch.bool).expand_as(logits)
    z = torch.where(mask, logits, torch.zeros((), dtype=logits.dtype))
    m = torch.where(mask, logits, torch.full((), -math.inf, dtype=logits.dtype)).amax(dim, keepdim=True)
    m = torch.where(torch.isfinite(m), m, torch.zeros((), dtype=logits.dtype)).detach()
    e = torch.exp(z - m) * mask
    s = e.sum(dim, keepdim=True)
    return e / torch.where(s > 0, s, torch.ones((), dtype=logits.dtype))


def safe_sqrt(x: Tensor) -> Tensor:
    """sqrt with a zero (not infinite) derivative at 0."""
    pos = x > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, x, torch.ones((), dtype=x.dtype))),
                       torch.zeros((), dtype=x.dtype))


def add_mlp(ps: ParamSet, prefix: str, channels, rng: np.random.Generator):
    for i, (a, b) in enumerate(zip(channels[:-1], channels[1:])):
        ps.add_linear(f"{prefix}.{i}", a, b, rng)


def mlp(x: Tensor, ps: ParamSet, prefix: str, n_layers: int, final_relu: bool = False) -> Tensor:
    """Stacked linear layers with ReLU between them (and after the last if asked)."""
    for i in range(n_layers):
        x = linear(x, ps[f"{prefix}.{i}.weight"], ps[f"{prefix}.{i}.bias"])
        if i < n_layers - 1 or final_relu:
            x = relu(x)
    return x


@dataclass
class AttentionRecord:
    """Per-voxel attention over views: ``A`` is (N, T, T) averaged over heads."""

    A: Tensor
    per_head: Tensor | None = None


def add_transformer(ps: ParamSet, prefix: str, c: int, rng: np.random.Generator, ffn_mult: int = 2):
    ps.add(f"{prefix}.ln1.weight", np.ones(c))
    ps.add(f"{prefix}.ln1.bias", np.zeros(c))
    for name in ("q", "k", "v", "o"):
        ps.add_linear(f"{prefix}.{name}", c, c, rng)
    ps.add(f"{prefix}.ln2.weight", np.ones(c))
    ps.add(f"{prefix}.ln2.bias", np.zeros(c))
    ps.add_linear(f"{prefix}.ff0", c, ffn_mult * c, rng)
    ps.add_linear(f"{prefix}.ff1", ffn_mult * c, c, rng)


def transformer_block(x: Tensor, ps: ParamSet, prefix: str, valid: Tensor, heads: int = 2,
                      views_first: bool = True):
    """Pre-norm self-attention across views, independently per voxel.

    ``x`` is (T, N, C) with ``valid`` (T, N); pass ``views_first=False`` for
    (N, T, C) / (N, T) inputs, in which case the output keeps that layout.
    Invalid views are masked out as keys and pass through unchanged as queries.
    """
    if views_first:
        x, valid = x.transpose(0, 1), valid.T
    N, T, C = x.shape
    if C % heads:
        raise ValueError(f"channels {C} not divisible by {heads} heads")
    d = C // heads
    vm = valid.to(torch.bool)
    # voxels without any valid view attend uniformly; their outputs are discarded below
    keys = vm | ~vm.any(-1, keepdim=True)
    vmf = vm.to(x.dtype)[..., None]

    h = layernorm(x, ps[f"{prefix}.ln1.weight"], ps[f"{prefix}.ln1.bias"])

    def heads_view(name):  # (N, H, T, d)
        t = linear(h, ps[f"{prefix}.{name}.weight"], ps[f"{prefix}.{name}.bias"])
        return t.reshape(N, T, heads, d).transpose(1, 2)

    q, k, v = heads_view("q"), heads_view("k"), heads_view("v")
    scores = (q @ k.transpose(-1, -2)) * (1.0 / math.sqrt(d))  # N, H, T, T
    scores = scores.masked_fill(~keys[:, None, None, :], -math.inf)
    attn = torch.softmax(scores, dim=-1)
    ctx = (attn @ v).transpose(1, 2).reshape(N, T, C)
    y = x + vmf * linear(ctx, ps[f"{prefix}.o.weight"], ps[f"{prefix}.o.bias"])

    h2 = layernorm(y, ps[f"{prefix}.ln2.weight"], ps[f"{prefix}.ln2.bias"])
    f = relu(linear(h2, ps[f"{prefix}.ff0.weight"], ps[f"{prefix}.ff0.bias"]))
    y = y + vmf * linear(f, ps[f"{prefix}.ff1.weight"], ps[f"{prefix}.ff1.bias"])
    row = vm.to(x.dtype)[:, None, :, None]
    attn = attn * row
    rec = AttentionRecord(attn.mean(1), attn)
    return (y.transpose(0, 1) if views_first else y), rec


def conv3d(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """3x3x3 convolution of a (C, nx, ny, nz) field with replicate padding."""
    xp = torch.nn.functional.pad(x[None], (1, 1, 1, 1, 1, 1), mode="replicate")
    return torch.nn.functional.conv3d(xp, W, b)[0]


def backward(loss: Tensor) -> None:
    if loss.dim() != 0 and loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss):
        raise FloatingPointError("loss is not finite")
    loss.reshape(()).backward()


def finite_difference_check(fn, inputs: dict, step: float = 1e-5, max_entries: int | None = None,
                            rng: np.random.Generator | None = None, floor: float = 1e-5,
                            kink_tol: float | None = None) -> dict:
    """Compare autograd gradients of scalar ``fn()`` with central differences.

    ``inputs`` maps names to leaf tensors that ``fn`` reads. For each tensor
    up to ``max_entries`` randomly chosen entries are perturbed. Returns the
    per-tensor error ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, floor)`` over the
    checked entries. The floor keeps structurally zero gradients (a key bias
    under softmax, say) from turning rounding noise into a relative error of 1.

    With ``kink_tol`` set, an entry whose forward and backward one-sided
    slopes differ by more than ``kink_tol`` relative is taken to straddle a
    kink (a rectifier switching inside the stencil) and is replaced by
    another entry; this test looks only at ``fn``, never at autograd.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs.values():
        t.grad = None
    out = fn()
    backward(out)
    auto = {k: (t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t))
            for k, t in inputs.items()}
    errors = {}
    with torch.no_grad():
        f0 = fn().item()
        for name, t in inputs.items():
            flat = t.view(-1)
            n = flat.numel()
            want = n if max_entries is None else min(n, max_entries)
            cand = np.arange(n) if want == n else rng.permutation(n)
            idx, fd = [], []
            for i in cand:
                if len(idx) == want:
                    break
                orig = flat[i].item()
                flat[i] = orig + step
                fp = fn().item()
                flat[i] = orig - step
                fm = fn().item()
                flat[i] = orig
                if kink_tol is not None:
                    sp, sm = (fp - f0) / step, (f0 - fm) / step
                    if abs(sp - sm) > kink_tol * max(abs(sp), abs(sm), floor):
                        continue
                idx.append(int(i))
                fd.append((fp - fm) / (2 * step))
            if not idx:
                errors[name] = 0.0
                continue
            order = np.argsort(idx)
            idx, fd = np.asarray(idx)[order], np.asarray(fd)[order]
            ad = auto[name].view(-1).numpy()[idx]
            scale = max(np.linalg.norm(ad), np.linalg.norm(fd), floor)
            errors[name] = float(np.linalg.norm(ad - fd) / scale)
    return errors
