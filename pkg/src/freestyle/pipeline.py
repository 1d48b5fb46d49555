"""Dual-stream DDIM stylization, the single-stream baseline, and ablation drivers."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .errors import NumericError, PlanError, RequestError
from .metrics import MetricRecord, evaluate, mean_record
from .nnops import check_tensor4
from .schedule import NoiseSchedule, add_noise, ddim_step, default_sigma, make_timestep_plan
from .spectral import ModulationConfig
from .unet import CONTENT_MODES, StyleCondition, UNetParams, content_pyramid, predict_eps, predict_eps_dual

NAIVE_DELTA = 850
INIT_NOISE_STREAM = 0
CONTENT_NOISE_STREAM = 1


def seeded_noise(seed: int, stream: int, shape: Sequence[int]) -> torch.Tensor:
    """Standard normal draws from a counter-based generator keyed by (seed, stream)."""
    rng = np.random.Generator(np.random.Philox(key=[seed, stream]))
    return torch.from_numpy(rng.standard_normal(tuple(shape)).astype(np.float32))


@dataclass(frozen=True)
class StylizeRequest:
    content_image: torch.Tensor = field(repr=False)
    style: StyleCondition
    mod: ModulationConfig = ModulationConfig()
    sigma: Optional[int] = None        # None: round(0.958 * T)
    num_steps: int = 30
    seed: int = 0
    content_mode: str = "clean"
    rho: int = 0                       # noise level applied to the content stream only
    clip_denoised: bool = True         # clamp each step's x0 prediction to the image range
    use_cache: bool = True

    def resolved_sigma(self, sched: NoiseSchedule) -> int:
        return default_sigma(sched.T) if self.sigma is None else int(self.sigma)

    def validate(self, sched: NoiseSchedule) -> None:
        x = check_tensor4(self.content_image, "content_image")
        if not torch.isfinite(x).all():
            raise RequestError("content_image has non-finite values")
        if x.abs().max() > 1 + 1e-6:
            raise RequestError("content_image must lie in [-1, 1]")
        sigma = self.resolved_sigma(sched)
        if not 1 <= sigma <= sched.T:
            raise RequestError(f"sigma={sigma} outside [1, {sched.T}]")
        if not 1 <= self.num_steps <= sigma:
            raise PlanError(f"num_steps={self.num_steps} must lie in [1, sigma={sigma}]")
        if not 0 <= self.rho <= sched.T:
            raise RequestError(f"rho={self.rho} outside [0, {sched.T}]")
        if self.content_mode not in CONTENT_MODES:
            raise RequestError(f"content_mode must be one of {CONTENT_MODES}")

    def replace(self, **kw) -> "StylizeRequest":
        return dataclasses.replace(self, **kw)


def _run_ddim(x: torch.Tensor, sigma: int, num_steps: int, sched: NoiseSchedule,
              eps_fn: Callable[[torch.Tensor, int], torch.Tensor], clip_denoised: bool) -> torch.Tensor:
    plan = make_timestep_plan(sigma, num_steps, sched.T)
    for i, (t, t_prev) in enumerate(plan.transitions()):
        eps_hat = eps_fn(x, t)
        if not torch.isfinite(eps_hat).all():
            raise NumericError(f"non-finite noise prediction at step {i} (t={t})")
        x = ddim_step(x, eps_hat, t, t_prev, sched, clip_denoised)
    return x.clamp(-1.0, 1.0)


def content_input(req: StylizeRequest, sched: NoiseSchedule) -> torch.Tensor:
    x0 = req.content_image
    if req.rho == 0:
        return x0
    return add_noise(x0, req.rho, seeded_noise(req.seed, CONTENT_NOISE_STREAM, x0.shape), sched)


def stylize(req: StylizeRequest, params: UNetParams, sched: NoiseSchedule) -> torch.Tensor:
    """Noise the content to sigma, then denoise with the dual-stream predictor."""
    req.validate(sched)
    sigma = req.resolved_sigma(sched)
    x0 = req.content_image.to(torch.float32)
    with torch.no_grad():
        x = add_noise(x0, sigma, seeded_noise(req.seed, INIT_NOISE_STREAM, x0.shape), sched)
        xc = content_input(req, sched)
        cached = None
        if req.use_cache and req.content_mode == "clean":
            cached = content_pyramid(xc, params, 0)

        def eps_fn(x_t, t):
            return predict_eps_dual(x_t, xc, t, req.style, req.mod, params, cached, req.content_mode)

        return _run_ddim(x, sigma, req.num_steps, sched, eps_fn, req.clip_denoised)


def stylize_naive(x0: torch.Tensor, style: StyleCondition, delta: int = NAIVE_DELTA, num_steps: int = 30,
                  seed: int = 0, params: Optional[UNetParams] = None, sched: Optional[NoiseSchedule] = None,
                  eps_fn: Optional[Callable[[torch.Tensor, int], torch.Tensor]] = None,
                  clip_denoised: bool = True) -> torch.Tensor:
    """Single-stream baseline: add ``delta`` steps of noise, denoise under the style condition.

    ``eps_fn(x_t, t)`` overrides the network (used with analytic oracles).
    """
    if sched is None:
        raise RequestError("stylize_naive needs a noise schedule")
    if not 1 <= delta <= sched.T:
        raise RequestError(f"delta={delta} outside [1, {sched.T}]")
    if not 1 <= num_steps <= delta:
        raise PlanError(f"num_steps={num_steps} must lie in [1, delta={delta}]")
    check_tensor4(x0, "x0")
    if eps_fn is None:
        if params is None:
            raise RequestError("stylize_naive needs params or eps_fn")

        def eps_fn(x_t, t):
            return predict_eps(x_t, t, style, params)

    x0 = x0.to(torch.float32)
    with torch.no_grad():
        x = add_noise(x0, delta, seeded_noise(seed, INIT_NOISE_STREAM, x0.shape), sched)
        return _run_ddim(x, delta, num_steps, sched, eps_fn, clip_denoised)


# --- ablations --------------------------------------------------------------

MetricsFn = Callable[[torch.Tensor, StylizeRequest], Sequence[MetricRecord]]
AXES = ("b", "s", "sigma", "apply_levels", "rho", "n_fraction")


@dataclass
class GridCell:
    value: object
    image: torch.Tensor = field(repr=False)
    records: list = field(default_factory=list)

    @property
    def summary(self) -> Optional[MetricRecord]:
        return mean_record(self.records) if self.records else None


@dataclass
class AblationGrid:
    axis: str
    values: list
    cells: list

    def metric(self, name: str) -> list[float]:
        return [getattr(c.summary, name) for c in self.cells]


def request_for(base: StylizeRequest, axis: str, value) -> StylizeRequest:
    if axis in ("b", "s", "n_fraction"):
        return base.replace(mod=dataclasses.replace(base.mod, **{axis: float(value)}))
    if axis == "apply_levels":
        return base.replace(mod=dataclasses.replace(base.mod, apply_levels=frozenset(value)))
    if axis == "sigma":
        return base.replace(sigma=int(value))
    if axis == "rho":
        return base.replace(rho=int(value))
    raise RequestError(f"unknown ablation axis {axis!r}; expected one of {AXES}")


def ablate(base_req: StylizeRequest, axis: str, values: Sequence, params: UNetParams, sched: NoiseSchedule,
           metrics_fn: Optional[MetricsFn] = None) -> AblationGrid:
    """One stylization per value, everything else (seed included) held fixed."""
    if not len(values):
        raise RequestError("ablation needs at least one value")
    reqs = [request_for(base_req, axis, v) for v in values]
    for r in reqs:
        r.validate(sched)
    cells = []
    for v, r in zip(values, reqs):
        img = stylize(r, params, sched)
        cells.append(GridCell(v, img, list(metrics_fn(img, r)) if metrics_fn else []))
    return AblationGrid(axis, list(values), cells)


def ablate_content_noise(req: StylizeRequest, rho_values: Sequence[int], params: UNetParams, sched: NoiseSchedule,
                         metrics_fn: Optional[MetricsFn] = None) -> AblationGrid:
    """Degrade only the content stream's input with rho steps of noise."""
    return ablate(req, "rho", rho_values, params, sched, metrics_fn)


def oracle_reconstruction(x0: torch.Tensor, eps: torch.Tensor, sigma: int, num_steps: int,
                          sched: NoiseSchedule) -> torch.Tensor:
    """DDIM chain driven by the true noise; reproduces ``x0`` up to roundoff."""
    x = add_noise(x0, sigma, eps, sched)
    plan = make_timestep_plan(sigma, num_steps, sched.T)
    for t, t_prev in plan.transitions():
        x = ddim_step(x, eps, t, t_prev, sched)
    return x


def stylize_grid(contents: torch.Tensor, styles: Sequence[int], base_req: StylizeRequest, params: UNetParams,
                 sched: NoiseSchedule, scorer) -> tuple[list[torch.Tensor], list[list[MetricRecord]]]:
    """Stylize every content into every target style.

    Returns per-style output batches and per-style record lists (record ``i``
    of style ``k`` belongs to content ``i``).
    """
    outs, records = [], []
    for k in styles:
        img = stylize(base_req.replace(content_image=contents, style=StyleCondition(int(k))), params, sched)
        outs.append(img)
        records.append(evaluate(img, contents, int(k), scorer))
    return outs, records
