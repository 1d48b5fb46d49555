"""Feature modulation: channel-prefix gain on content-derived decoder features
and a radial low-frequency gain on style-stream skips, applied in the Fourier domain."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import FrozenSet, Optional

import numpy as np
import torch

from .errors import ConfigError
from .nnops import check_finite, check_tensor4


@dataclass(frozen=True)
class ModulationConfig:
    b: float = 2.5
    s: float = 1.0
    n_fraction: float = 0.25
    r_thresh: float = 1.0
    # None: the deeper half of the decoder, levels >= num_levels // 2
    apply_levels: Optional[FrozenSet[int]] = None

    def __post_init__(self):
        if not self.b > 0:
            raise ConfigError(f"modulation: b must be > 0, got {self.b}")
        if not self.s > 0:
            raise ConfigError(f"modulation: s must be > 0, got {self.s}")
        if not 0 <= self.n_fraction <= 1:
            raise ConfigError(f"modulation: n_fraction must lie in [0, 1], got {self.n_fraction}")
        if not self.r_thresh >= 0:
            raise ConfigError(f"modulation: r_thresh must be >= 0, got {self.r_thresh}")
        if self.apply_levels is not None:
            object.__setattr__(self, "apply_levels", frozenset(int(v) for v in self.apply_levels))

    def applies_to(self, level: int, num_levels: int) -> bool:
        if self.apply_levels is None:
            return level >= num_levels // 2
        return level in self.apply_levels

    @property
    def is_identity(self) -> bool:
        return self.b == 1 and self.s == 1


IDENTITY = ModulationConfig(b=1.0, s=1.0)


def center_radius(height: int, width: int) -> np.ndarray:
    """Distance of each center-shifted frequency bin from the DC bin at (H//2, W//2)."""
    u = np.arange(height) - height // 2
    v = np.arange(width) - width // 2
    return np.sqrt(u[:, None] ** 2 + v[None, :] ** 2)


@dataclass(frozen=True)
class RadialMask:
    height: int
    width: int
    gains: np.ndarray = field(repr=False)


def radial_mask(height: int, width: int, r_thresh: float, s: float) -> RadialMask:
    if height < 1 or width < 1:
        raise ConfigError(f"radial_mask: size must be >= 1, got {height}x{width}")
    r = center_radius(height, width)
    gains = np.where(r < r_thresh, s, 1.0)
    gains.setflags(write=False)
    return RadialMask(height, width, gains)


def fourier_filter(x: torch.Tensor, gains: np.ndarray) -> torch.Tensor:
    """FFT -> center shift -> multiply -> inverse shift -> IFFT -> real part, per plane."""
    spec = torch.fft.fftshift(torch.fft.fft2(x, norm="backward"), dim=(-2, -1))
    spec = spec * torch.tensor(np.asarray(gains), dtype=x.dtype)
    out = torch.fft.ifft2(torch.fft.ifftshift(spec, dim=(-2, -1)), norm="backward")
    return out.real.contiguous()


def modulate_style(f_s: torch.Tensor, s: float, r_thresh: float) -> torch.Tensor:
    check_tensor4(f_s, "f_s")
    check_finite(f_s, "modulate_style input")
    mask = radial_mask(f_s.shape[2], f_s.shape[3], r_thresh, s)
    if (mask.gains == 1.0).all():
        # all-ones mask: skip the roundtrip so identity settings stay bit-exact
        return f_s
    return fourier_filter(f_s, mask.gains)


def resolve_n(n_fraction: float, channels: int) -> int:
    return int(min(max(round(n_fraction * channels), 0), channels))


def modulate_content(f_c: torch.Tensor, b: float, n: int) -> torch.Tensor:
    check_tensor4(f_c, "f_c")
    if not 0 <= n <= f_c.shape[1]:
        raise ConfigError(f"modulate_content: n={n} outside [0, {f_c.shape[1]}] channels")
    if n == 0 or b == 1:
        return f_c
    return torch.cat([b * f_c[:, :n], f_c[:, n:]], dim=1)
