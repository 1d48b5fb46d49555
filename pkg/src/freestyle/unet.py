"""Toy conditional U-Net noise predictor with separable encoder and decoder.

The encoder can be run twice over the same weights (a style stream on the
noisy latent, a content stream on the clean image). In dual mode the decoder
backbone starts from the content stream's bottleneck while the skip inputs
come from the style stream; at every selected level the backbone gets the
channel-prefix gain and the skip gets the radial Fourier gain.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Optional, Sequence, Union

import numpy as np
import torch

from . import nnops as nn
from .errors import ConfigError, DimensionError
from .spectral import ModulationConfig, modulate_content, modulate_style, resolve_n


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 4)
    blocks_per_level: int = 1
    time_embed_dim: int = 128
    num_style_classes: int = 4
    groupnorm_groups: int = 8

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(int(m) for m in self.channel_mults))
        if self.levels < 2:
            raise ConfigError(f"unet: need at least 2 levels, got channel_mults={self.channel_mults}")
        if self.num_style_classes < 2:
            raise ConfigError(f"unet: num_style_classes must be >= 2, got {self.num_style_classes}")
        if self.base_channels % self.groupnorm_groups:
            raise ConfigError(
                f"unet: base_channels={self.base_channels} not divisible by groupnorm_groups={self.groupnorm_groups}")
        if self.blocks_per_level < 1 or self.in_channels < 1 or self.time_embed_dim < 2:
            raise ConfigError("unet: blocks_per_level, in_channels must be >= 1 and time_embed_dim >= 2")
        if self.base_channels % 2:
            raise ConfigError("unet: base_channels must be even (it sizes the sinusoidal embedding)")

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def widths(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mults]

    @property
    def null_class(self) -> int:
        return self.num_style_classes

    def check_image_size(self, height: int, width: int) -> None:
        div = 2 ** (self.levels - 1)
        if height % div or width % div:
            raise DimensionError(f"spatial size {height}x{width} not divisible by 2^(levels-1)={div}")


def _resblock_manifest(prefix: str, cin: int, cout: int, emb: int) -> list[tuple[str, tuple]]:
    out = [
        (f"{prefix}.norm1.g", (cin,)), (f"{prefix}.norm1.b", (cin,)),
        (f"{prefix}.conv1.w", (cout, cin, 3, 3)), (f"{prefix}.conv1.b", (cout,)),
        (f"{prefix}.emb.w", (cout, emb)), (f"{prefix}.emb.b", (cout,)),
        (f"{prefix}.norm2.g", (cout,)), (f"{prefix}.norm2.b", (cout,)),
        (f"{prefix}.conv2.w", (cout, cout, 3, 3)), (f"{prefix}.conv2.b", (cout,)),
    ]
    if cin != cout:
        out += [(f"{prefix}.skip.w", (cout, cin, 1, 1)), (f"{prefix}.skip.b", (cout,))]
    return out


def manifest(cfg: UNetConfig) -> "OrderedDict[str, tuple]":
    """Parameter names and shapes, in canonical order."""
    E, C0, W = cfg.time_embed_dim, cfg.base_channels, cfg.widths
    items = [
        ("time.fc1.w", (E, C0)), ("time.fc1.b", (E,)),
        ("time.fc2.w", (E, E)), ("time.fc2.b", (E,)),
        ("class_emb", (cfg.num_style_classes + 1, E)),
        ("conv_in.w", (C0, cfg.in_channels, 3, 3)), ("conv_in.b", (C0,)),
    ]
    cin = C0
    for i, w in enumerate(W):
        for j in range(cfg.blocks_per_level):
            items += _resblock_manifest(f"enc.{i}.{j}", cin, w, E)
            cin = w
    items += _resblock_manifest("mid", W[-1], W[-1], E)
    back = W[-1]
    for i in reversed(range(cfg.levels)):
        for j in range(cfg.blocks_per_level):
            cin = back + W[i] if j == 0 else W[i]
            items += _resblock_manifest(f"dec.{i}.{j}", cin, W[i], E)
        back = W[i]
    items += [
        ("out.norm.g", (W[0],)), ("out.norm.b", (W[0],)),
        ("out.conv.w", (cfg.in_channels, W[0], 3, 3)), ("out.conv.b", (cfg.in_channels,)),
    ]
    return OrderedDict(items)


class UNetParams(Mapping):
    """Name-keyed parameter tensors validated against the config manifest."""

    def __init__(self, config: UNetConfig, tensors: Mapping[str, torch.Tensor]):
        self.config = config
        expected = manifest(config)
        missing = [k for k in expected if k not in tensors]
        extra = [k for k in tensors if k not in expected]
        if missing or extra:
            raise ConfigError(f"parameter set does not match manifest: missing={missing[:5]} extra={extra[:5]}")
        for k, shape in expected.items():
            if tuple(tensors[k].shape) != shape:
                raise DimensionError(f"parameter {k}: expected shape {shape}, got {tuple(tensors[k].shape)}")
        self._t = OrderedDict((k, tensors[k]) for k in expected)

    def __getitem__(self, k):
        return self._t[k]

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def parameters(self) -> list[torch.Tensor]:
        return list(self._t.values())

    def num_parameters(self) -> int:
        return sum(v.numel() for v in self._t.values())

    def detached(self) -> "UNetParams":
        return UNetParams(self.config, {k: v.detach().clone() for k, v in self._t.items()})

    def trainable(self) -> "UNetParams":
        return UNetParams(self.config, {k: v.detach().clone().requires_grad_(True) for k, v in self._t.items()})


def init_params(cfg: UNetConfig, seed: int = 0, zero_out: bool = True) -> UNetParams:
    """Fan-in scaled normal init; norms at (1, 0); biases at 0.

    ``zero_out`` zeroes the final projection so a fresh model predicts zero noise.
    """
    rng = np.random.Generator(np.random.Philox(key=[seed, 0x5EED]))
    tensors = {}
    for name, shape in manifest(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "class_emb":
            arr = rng.standard_normal(shape)
        elif leaf == "g":
            arr = np.ones(shape)
        elif leaf == "b" or (zero_out and name == "out.conv.w"):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            arr = rng.standard_normal(shape) / np.sqrt(fan_in)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    return UNetParams(cfg, tensors)


@dataclass(frozen=True)
class StyleCondition:
    """Style class id, ``None`` for the null condition, or one entry per batch item."""
    class_id: Union[int, None, Sequence[Optional[int]]] = None

    def indices(self, batch: int, cfg: UNetConfig) -> torch.Tensor:
        ids = self.class_id
        if ids is None or isinstance(ids, (int, np.integer)):
            ids = [ids] * batch
        ids = list(ids)
        if len(ids) != batch:
            raise DimensionError(f"condition has {len(ids)} entries for batch of {batch}")
        out = []
        for c in ids:
            if c is None:
                out.append(cfg.null_class)
            elif 0 <= int(c) < cfg.num_style_classes:
                out.append(int(c))
            else:
                raise ConfigError(f"style class {c} outside [0, {cfg.num_style_classes})")
        return torch.tensor(out, dtype=torch.long)


NULL = StyleCondition(None)


@dataclass(frozen=True)
class FeaturePyramid:
    skips: tuple
    bottleneck: torch.Tensor = field(repr=False)


def _timesteps(t, batch: int) -> torch.Tensor:
    tt = torch.as_tensor(t).reshape(-1)
    if tt.numel() == 1:
        tt = tt.expand(batch)
    if tt.numel() != batch:
        raise DimensionError(f"{tt.numel()} timesteps for batch of {batch}")
    return tt


def conditioning(t, cond: StyleCondition, batch: int, p: Mapping) -> torch.Tensor:
    cfg = p.config
    dtype = p["time.fc1.w"].dtype
    temb = nn.timestep_embedding(_timesteps(t, batch), cfg.base_channels).to(dtype)
    temb = nn.dense(nn.silu(nn.dense(temb, p["time.fc1.w"], p["time.fc1.b"])), p["time.fc2.w"], p["time.fc2.b"])
    return temb + p["class_emb"][cond.indices(batch, cfg)]


def resblock(x, emb, p: Mapping, prefix: str) -> torch.Tensor:
    g = p.config.groupnorm_groups
    h = nn.silu(nn.group_norm(x, g, p[f"{prefix}.norm1.g"], p[f"{prefix}.norm1.b"]))
    h = nn.conv2d(h, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"], pad=1)
    h = h + nn.dense(nn.silu(emb), p[f"{prefix}.emb.w"], p[f"{prefix}.emb.b"])[:, :, None, None]
    h = nn.silu(nn.group_norm(h, g, p[f"{prefix}.norm2.g"], p[f"{prefix}.norm2.b"]))
    h = nn.conv2d(h, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"], pad=1)
    if f"{prefix}.skip.w" in p:
        x = nn.conv2d(x, p[f"{prefix}.skip.w"], p[f"{prefix}.skip.b"])
    return x + h


def _check_input(x: torch.Tensor, cfg: UNetConfig, name: str = "x") -> None:
    nn.check_tensor4(x, name)
    if x.shape[1] != cfg.in_channels:
        raise DimensionError(f"{name}: {x.shape[1]} channels, model expects {cfg.in_channels}")
    cfg.check_image_size(x.shape[2], x.shape[3])


def _encode(x, emb, p: Mapping) -> FeaturePyramid:
    cfg = p.config
    h = nn.conv2d(x.to(p["conv_in.w"].dtype), p["conv_in.w"], p["conv_in.b"], pad=1)
    skips = []
    for i in range(cfg.levels):
        for j in range(cfg.blocks_per_level):
            h = resblock(h, emb, p, f"enc.{i}.{j}")
        skips.append(h)
        if i < cfg.levels - 1:
            h = nn.avgpool2x(h)
    return FeaturePyramid(tuple(skips), resblock(h, emb, p, "mid"))


def _decode(bottleneck, skips, emb, p: Mapping, mod: Optional[ModulationConfig] = None) -> torch.Tensor:
    cfg = p.config
    h = bottleneck
    for i in reversed(range(cfg.levels)):
        if i < cfg.levels - 1:
            h = nn.upsample2x(h)
        skip = skips[i]
        if mod is not None and mod.applies_to(i, cfg.levels):
            h = modulate_content(h, mod.b, resolve_n(mod.n_fraction, h.shape[1]))
            skip = modulate_style(skip, mod.s, mod.r_thresh)
        h = nn.concat([h, skip])
        for j in range(cfg.blocks_per_level):
            h = resblock(h, emb, p, f"dec.{i}.{j}")
    h = nn.silu(nn.group_norm(h, cfg.groupnorm_groups, p["out.norm.g"], p["out.norm.b"]))
    return nn.conv2d(h, p["out.conv.w"], p["out.conv.b"], pad=1)


def _check_pyramid(bottleneck, skips, cfg: UNetConfig) -> None:
    if len(skips) != cfg.levels:
        raise DimensionError(f"pyramid has {len(skips)} skips, config has {cfg.levels} levels")
    for i, (s, w) in enumerate(zip(skips, cfg.widths)):
        nn.check_tensor4(s, f"skip[{i}]")
        if s.shape[1] != w:
            raise DimensionError(f"skip[{i}]: {s.shape[1]} channels, expected {w}")
        if i and (s.shape[2] * 2 != skips[i - 1].shape[2] or s.shape[3] * 2 != skips[i - 1].shape[3]):
            raise DimensionError(f"skip[{i}]: spatial size {tuple(s.shape[2:])} is not half of level {i - 1}")
    if bottleneck.shape[1:] != skips[-1].shape[1:]:
        raise DimensionError(f"bottleneck {tuple(bottleneck.shape)} does not match deepest skip {tuple(skips[-1].shape)}")


def encode(x: torch.Tensor, t, cond: StyleCondition, params: UNetParams) -> FeaturePyramid:
    _check_input(x, params.config)
    return _encode(x, conditioning(t, cond, x.shape[0], params), params)


def decode(bottleneck: torch.Tensor, skips: Sequence[torch.Tensor], t, cond: StyleCondition,
           params: UNetParams, mod: Optional[ModulationConfig] = None) -> torch.Tensor:
    _check_pyramid(bottleneck, skips, params.config)
    return _decode(bottleneck, skips, conditioning(t, cond, bottleneck.shape[0], params), params, mod)


def predict_eps(x_t: torch.Tensor, t, cond: StyleCondition, params: UNetParams) -> torch.Tensor:
    _check_input(x_t, params.config, "x_t")
    emb = conditioning(t, cond, x_t.shape[0], params)
    pyr = _encode(x_t, emb, params)
    return _decode(pyr.bottleneck, pyr.skips, emb, params)


CONTENT_MODES = ("clean", "current_t", "alias")


def content_pyramid(x0: torch.Tensor, params: UNetParams, t_content: int = 0) -> FeaturePyramid:
    """Content-stream features: clean image, fixed timestep, null condition."""
    return encode(x0, t_content, NULL, params)


def predict_eps_dual(x_t: torch.Tensor, x0: torch.Tensor, t, cond: StyleCondition, mod: ModulationConfig,
                     params: UNetParams, cached_content: Optional[FeaturePyramid] = None,
                     content_mode: str = "clean") -> torch.Tensor:
    """Dual-stream noise prediction.

    The decoder backbone is seeded with the content bottleneck and consumes
    the style stream's skips, so full-resolution noise in ``x_t`` stays
    visible to the prediction.

    ``content_mode``: ``"clean"`` encodes ``x0`` at t=0 with the null
    condition; ``"current_t"`` uses the style stream's ``t`` instead;
    ``"alias"`` reuses the style stream itself (``x0`` ignored), which reduces
    to :func:`predict_eps` when ``mod`` is the identity.
    """
    if content_mode not in CONTENT_MODES:
        raise ConfigError(f"content_mode must be one of {CONTENT_MODES}, got {content_mode!r}")
    _check_input(x_t, params.config, "x_t")
    emb = conditioning(t, cond, x_t.shape[0], params)
    style = _encode(x_t, emb, params)
    if content_mode == "alias":
        content = style
    elif cached_content is not None:
        content = cached_content
    else:
        nn.same_shape(x_t, x0, "x_t, x0")
        content = content_pyramid(x0, params, 0 if content_mode == "clean" else t)
    _check_pyramid(content.bottleneck, style.skips, params.config)
    return _decode(content.bottleneck, style.skips, emb, params, mod)
