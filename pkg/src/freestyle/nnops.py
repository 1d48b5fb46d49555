"""Numeric kernels used by the toy U-Net and the style classifier.

Every kernel is a thin, shape-checked wrapper over ``torch.nn.functional``;
reverse-mode gradients come from torch autograd and are verified against
central finite differences by :func:`grad_check`.

Tensors are ``torch.float32`` in NCHW layout ("Tensor4"). Parameters are
plain leaf tensors with ``requires_grad=True`` kept in name-keyed dicts.
"""
from __future__ import annotations

import math
import os
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, NumericError

DEBUG = os.environ.get("FREESTYLE_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Toggle finiteness checks on every kernel output."""
    global DEBUG
    DEBUG = bool(flag)


def check_tensor4(x: torch.Tensor, name: str = "x") -> torch.Tensor:
    if not isinstance(x, torch.Tensor):
        raise DimensionError(f"{name}: expected a torch.Tensor, got {type(x).__name__}")
    if x.dim() != 4:
        raise DimensionError(f"{name}: expected 4 axes (batch, channels, height, width), got shape {tuple(x.shape)}")
    if min(x.shape) < 1:
        raise DimensionError(f"{name}: every axis must be >= 1, got shape {tuple(x.shape)}")
    return x


def check_finite(x: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")
    return x


def _out(x: torch.Tensor, what: str) -> torch.Tensor:
    if DEBUG:
        check_finite(x, what)
    return x


def same_shape(a: torch.Tensor, b: torch.Tensor, names: str = "a, b") -> None:
    if a.shape != b.shape:
        axes = ["batch", "channels", "height", "width"]
        bad = [axes[i] if i < 4 else str(i) for i, (p, q) in enumerate(zip(a.shape, b.shape)) if p != q]
        raise DimensionError(f"shape mismatch between {names}: {tuple(a.shape)} vs {tuple(b.shape)} (axes: {', '.join(bad) or 'rank'})")


def conv2d(x, w, bias=None, stride: int = 1, pad: int = 0):
    check_tensor4(x)
    if w.dim() != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv weight must be (out_ch, in_ch, k, k), got {tuple(w.shape)}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv channels: input has {x.shape[1]}, weight expects in_ch={w.shape[1]}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise DimensionError(f"conv bias: expected ({w.shape[0]},), got {tuple(bias.shape)}")
    k = w.shape[2]
    for axis, size in (("height", x.shape[2]), ("width", x.shape[3])):
        if (size + 2 * pad - k) // stride + 1 < 1:
            raise DimensionError(f"conv {axis}: size {size} with kernel {k}, pad {pad} gives empty output")
    return _out(F.conv2d(x, w, bias, stride=stride, padding=pad), "conv2d")


def group_norm(x, groups: int, gamma, beta, eps: float = 1e-5):
    check_tensor4(x)
    if groups < 1 or x.shape[1] % groups:
        raise ConfigError(f"group_norm: {x.shape[1]} channels not divisible by {groups} groups")
    if eps <= 0:
        raise ConfigError("group_norm: eps must be > 0")
    return _out(F.group_norm(x, groups, gamma, beta, eps), "group_norm")


def silu(x):
    return _out(F.silu(x), "silu")


def upsample2x(x):
    """Nearest-neighbour 2x upsampling."""
    check_tensor4(x)
    return x.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)


def avgpool2x(x):
    check_tensor4(x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"avgpool2x: spatial size {tuple(x.shape[2:])} is not even")
    return F.avg_pool2d(x, 2)


def dense(x, w, bias=None):
    """``x @ w.T + bias`` for ``x`` of shape (batch, in)."""
    if x.dim() != 2 or w.dim() != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"dense: input {tuple(x.shape)} incompatible with weight {tuple(w.shape)}")
    return _out(F.linear(x, w, bias), "dense")


def concat(xs: Sequence[torch.Tensor]):
    ref = xs[0]
    for x in xs[1:]:
        if x.shape[0] != ref.shape[0] or x.shape[2:] != ref.shape[2:]:
            raise DimensionError(f"concat: {tuple(ref.shape)} vs {tuple(x.shape)} differ outside the channel axis")
    return torch.cat(list(xs), dim=1)


def split(x, sizes: Sequence[int]):
    if sum(sizes) != x.shape[1]:
        raise DimensionError(f"split: sizes {list(sizes)} do not sum to {x.shape[1]} channels")
    return list(torch.split(x, list(sizes), dim=1))


def add(a, b):
    same_shape(a, b)
    return a + b


def scale(x, c: float):
    return x * c


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of one or more timesteps.

    Returns shape (dim,) for a scalar ``t`` and (len(t), dim) otherwise; the
    first half holds sines, the second cosines, at geometric frequencies
    ``max_period ** (-i / (dim / 2))``.
    """
    if dim % 2:
        raise ConfigError(f"timestep_embedding: dim must be even, got {dim}")
    scalar = not isinstance(t, torch.Tensor) or t.dim() == 0
    tt = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    if (tt < 0).any():
        raise ConfigError("timestep_embedding: t must be >= 0")
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = tt[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1).to(torch.float32)
    return emb[0] if scalar else emb


def grad_check(
    op_closure: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    probe_count: int = 32,
    h: float = 1e-3,
    seed: int = 0,
    abs_floor: float = 1e-7,
) -> float:
    """Max relative error between autograd and central-difference gradients.

    ``op_closure`` receives a dict of float64 copies of ``params`` and must
    return a scalar loss; it is responsible for casting any captured inputs
    to the parameters' dtype. ``probe_count`` coordinates are drawn uniformly
    over all parameter entries.
    """
    if not 1e-4 <= h <= 1e-2:
        raise ConfigError(f"grad_check: step h={h} outside [1e-4, 1e-2]")
    p64 = {k: v.detach().to(torch.float64).clone().requires_grad_(True) for k, v in params.items()}
    loss = op_closure(p64)
    if not torch.isfinite(loss):
        raise NumericError(f"grad_check: non-finite loss at parameters {sorted(p64)}")
    grads = torch.autograd.grad(loss, list(p64.values()), allow_unused=True)
    grads = {k: (torch.zeros_like(v) if g is None else g) for (k, v), g in zip(p64.items(), grads)}

    names = list(p64)
    sizes = np.array([p64[k].numel() for k in names])
    rng = np.random.default_rng(seed)
    flat_ids = rng.choice(int(sizes.sum()), size=min(probe_count, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    with torch.no_grad():
        for fid in flat_ids:
            j = int(np.searchsorted(offsets, fid, side="right") - 1)
            name, idx = names[j], int(fid - offsets[j])
            flat = p64[name].view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + h
            up = op_closure(p64)
            flat[idx] = orig - h
            down = op_closure(p64)
            flat[idx] = orig
            if not (torch.isfinite(up) and torch.isfinite(down)):
                raise NumericError(f"grad_check: non-finite loss when perturbing {name}[{idx}]")
            numeric = (up.item() - down.item()) / (2 * h)
            analytic = grads[name].view(-1)[idx].item()
            denom = max(abs(numeric), abs(analytic), abs_floor)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst
