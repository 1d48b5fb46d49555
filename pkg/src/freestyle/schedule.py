"""Noise schedule and closed-form diffusion algebra.

Timesteps are one-based: ``t`` in ``[1, T]`` with a virtual ``alpha_bar(0) = 1``
so that the last deterministic step lands exactly on the clean image.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, PlanError
from .nnops import same_shape


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise PlanError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bars[t - 1])

    def coefs(self, t: int) -> tuple[float, float]:
        """``(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))``."""
        ab = self.alpha_bar(t)
        return float(np.sqrt(ab)), float(np.sqrt(1.0 - ab))


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"schedule: T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"schedule: need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(betas, alphas, alpha_bars)


def _check_t(t: int, sched: NoiseSchedule) -> None:
    if not 1 <= t <= sched.T:
        raise PlanError(f"timestep {t} outside [1, {sched.T}]")


def add_noise(x0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    same_shape(x0, eps, "x0, eps")
    _check_t(t, sched)
    a, s = sched.coefs(t)
    return a * x0 + s * eps


def predict_x0(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    same_shape(x_t, eps_hat, "x_t, eps_hat")
    _check_t(t, sched)
    a, s = sched.coefs(t)
    return (x_t - s * eps_hat) / a


def ddim_step(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int, sched: NoiseSchedule,
              clip_x0: bool = False) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM transition from ``t`` to ``t_prev``.

    With ``clip_x0`` the predicted clean image is clamped to [-1, 1] and the
    noise estimate is re-derived from it, so the step stays on the line
    between ``x_t`` and a valid image. When the prediction is already in
    range this is the plain step.
    """
    if not 0 <= t_prev < t:
        raise PlanError(f"ddim_step: need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    x0_hat = predict_x0(x_t, eps_hat, t, sched)
    if clip_x0:
        x0_hat = x0_hat.clamp(-1.0, 1.0)
        a_t, s_t = sched.coefs(t)
        eps_hat = (x_t - a_t * x0_hat) / s_t
    a, s = sched.coefs(t_prev)
    return a * x0_hat + s * eps_hat


@dataclass(frozen=True)
class TimestepPlan:
    steps: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.steps)

    def transitions(self) -> list[tuple[int, int]]:
        """``(t, t_prev)`` pairs; the last one targets ``t_prev = 0``."""
        return list(zip(self.steps, self.steps[1:] + (0,)))


def make_timestep_plan(sigma: int, num_steps: int, T: int) -> TimestepPlan:
    """``num_steps`` indices evenly spaced from ``sigma`` down to ``sigma / num_steps``."""
    if not 1 <= sigma <= T:
        raise PlanError(f"sigma={sigma} outside [1, {T}]")
    if num_steps < 1:
        raise PlanError(f"num_steps must be >= 1, got {num_steps}")
    if num_steps > sigma:
        raise PlanError(f"num_steps={num_steps} exceeds sigma={sigma}")
    spacing = sigma / num_steps
    # floor(x + .5): spacing >= 1 keeps consecutive entries distinct
    steps = tuple(int(np.floor(spacing * k + 0.5)) for k in range(num_steps, 0, -1))
    return TimestepPlan(steps)


def default_sigma(T: int, fraction: float = 0.958) -> int:
    return max(1, min(T, int(round(fraction * T))))
