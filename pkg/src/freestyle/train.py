"""Epsilon-prediction training of the toy backbone, and the style classifier."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import nnops as nn
from .data import SyntheticDataset
from .errors import ConfigError, NumericError
from .schedule import NoiseSchedule
from .unet import StyleCondition, UNetParams, predict_eps


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 1
    max_steps: Optional[int] = None
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    null_prob: float = 0.1
    seed: int = 0
    checkpoint_interval: int = 0
    log_interval: int = 100

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"train: lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"train: batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.null_prob <= 1:
            raise ConfigError(f"train: null_prob must lie in [0, 1], got {self.null_prob}")
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))

    def total_steps(self, n_samples: int) -> int:
        if self.max_steps is not None:
            return int(self.max_steps)
        return self.epochs * math.ceil(n_samples / self.batch_size)


def step_rng(seed: int, step: int, stream: int = 0) -> np.random.Generator:
    """Counter-keyed generator: the draws for ``step`` never depend on history."""
    return np.random.Generator(np.random.Philox(key=[seed, (stream << 40) | step]))


def diffusion_loss(params: UNetParams, x0: torch.Tensor, style_ids, t: torch.Tensor, eps: torch.Tensor,
                   sched: NoiseSchedule) -> torch.Tensor:
    ab = torch.as_tensor(sched.alpha_bars[t.numpy() - 1], dtype=x0.dtype)[:, None, None, None]
    x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
    pred = predict_eps(x_t, t, StyleCondition(list(style_ids)), params)
    return F.mse_loss(pred, eps.to(pred.dtype))


def sample_batch(ds: SyntheticDataset, cfg: TrainConfig, step: int, T: int, num_classes: int):
    rng = step_rng(cfg.seed, step)
    idx = rng.integers(0, len(ds), size=cfg.batch_size)
    t = torch.from_numpy(rng.integers(1, T + 1, size=cfg.batch_size))
    eps = torch.from_numpy(rng.standard_normal((cfg.batch_size,) + tuple(ds.images.shape[1:])).astype(np.float32))
    null = rng.random(cfg.batch_size) < cfg.null_prob
    styles = [None if z else int(s) for s, z in zip(ds.style_ids[idx], null)]
    return ds.images[torch.from_numpy(idx)], styles, t, eps


class DiffusionTrainer:
    """Adam over a :class:`UNetParams`; resumable from (params, moments, step)."""

    def __init__(self, params: UNetParams, sched: NoiseSchedule, cfg: TrainConfig,
                 optimizer_state: Optional[Mapping[str, torch.Tensor]] = None, step: int = 0):
        self.params = params.trainable()
        self.sched = sched
        self.cfg = cfg
        self.step = step
        self.opt = torch.optim.Adam(self.params.parameters(), lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps)
        if optimizer_state:
            self.load_optimizer_state(optimizer_state)

    def optimizer_state(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, p in self.params.items():
            st = self.opt.state.get(p)
            if st:
                out[f"adam.m/{name}"] = st["exp_avg"].detach().clone()
                out[f"adam.v/{name}"] = st["exp_avg_sq"].detach().clone()
        return out

    def load_optimizer_state(self, state: Mapping[str, torch.Tensor]) -> None:
        for name, p in self.params.items():
            if f"adam.m/{name}" in state:
                self.opt.state[p] = {
                    "step": torch.tensor(float(self.step)),
                    "exp_avg": state[f"adam.m/{name}"].clone(),
                    "exp_avg_sq": state[f"adam.v/{name}"].clone(),
                }

    def loss_on(self, x0, styles, t, eps) -> torch.Tensor:
        return diffusion_loss(self.params, x0, styles, t, eps, self.sched)

    def apply(self, loss: torch.Tensor) -> float:
        if not torch.isfinite(loss):
            bad = next((n for n, p in self.params.items() if not torch.isfinite(p).all()), None)
            where = f"parameter {bad}" if bad else "the batch (all parameters finite)"
            raise NumericError(f"non-finite loss at step {self.step}; first non-finite value in {where}")
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        for name, p in self.params.items():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient at step {self.step} in parameter {name}")
        self.opt.step()
        self.step += 1
        return float(loss.detach())

    def train_step(self, ds: SyntheticDataset) -> float:
        batch = sample_batch(ds, self.cfg, self.step, self.sched.T, self.params.config.num_style_classes)
        return self.apply(self.loss_on(*batch))

    def fit(self, ds: SyntheticDataset, steps: Optional[int] = None, log: Optional[Callable[[dict], None]] = None,
            on_checkpoint: Optional[Callable[["DiffusionTrainer"], None]] = None) -> list[float]:
        steps = self.cfg.total_steps(len(ds)) - self.step if steps is None else steps
        losses = []
        start = time.perf_counter()
        for _ in range(steps):
            losses.append(self.train_step(ds))
            if log and (self.step % self.cfg.log_interval == 0):
                window = losses[-self.cfg.log_interval:]
                log({"step": self.step, "loss": float(np.mean(window)), "lr": self.cfg.lr,
                     "wall_time": round(time.perf_counter() - start, 3)})
            if on_checkpoint and self.cfg.checkpoint_interval and self.step % self.cfg.checkpoint_interval == 0:
                on_checkpoint(self)
        return losses


def train_step(batch: tuple, trainer: DiffusionTrainer) -> float:
    """One optimizer step on an explicit ``(x0, styles, t, eps)`` batch."""
    return trainer.apply(trainer.loss_on(*batch))


def jsonl_logger(path) -> Callable[[dict], None]:
    def log(rec: dict) -> None:
        with open(path, "a") as fh:
            fh.write(json.dumps(rec) + "\n")
    return log


# --- style classifier -------------------------------------------------------

CLASSIFIER_WIDTHS = (16, 32, 64)


def classifier_manifest(num_classes: int, in_channels: int = 3, widths=CLASSIFIER_WIDTHS) -> dict[str, tuple]:
    items, cin = {}, in_channels
    for i, w in enumerate(widths):
        items[f"cls.conv{i}.w"] = (w, cin, 3, 3)
        items[f"cls.conv{i}.b"] = (w,)
        items[f"cls.norm{i}.g"] = (w,)
        items[f"cls.norm{i}.b"] = (w,)
        cin = w
    items["cls.head.w"] = (num_classes, cin)
    items["cls.head.b"] = (num_classes,)
    return items


def init_classifier(num_classes: int, seed: int = 0) -> dict[str, torch.Tensor]:
    rng = np.random.Generator(np.random.Philox(key=[seed, 0xC1A5]))
    out = {}
    for name, shape in classifier_manifest(num_classes).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf == "b":
            arr = np.zeros(shape)
        else:
            arr = rng.standard_normal(shape) / np.sqrt(np.prod(shape[1:]))
        out[name] = torch.from_numpy(arr.astype(np.float32))
    return out


def classifier_forward(params: Mapping[str, torch.Tensor], x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Logits and the per-stage feature maps (used for Gram statistics)."""
    nn.check_tensor4(x)
    feats, h, i = [], x, 0
    while f"cls.conv{i}.w" in params:
        h = nn.conv2d(h, params[f"cls.conv{i}.w"], params[f"cls.conv{i}.b"], pad=1)
        h = nn.silu(nn.group_norm(h, 4, params[f"cls.norm{i}.g"], params[f"cls.norm{i}.b"]))
        feats.append(h)
        h = nn.avgpool2x(h)
        i += 1
    logits = nn.dense(h.mean(dim=(2, 3)), params["cls.head.w"], params["cls.head.b"])
    return logits, feats


def classifier_accuracy(params, images: torch.Tensor, labels, batch: int = 256) -> float:
    with torch.no_grad():
        preds = torch.cat([classifier_forward(params, images[i:i + batch])[0].argmax(1)
                           for i in range(0, len(images), batch)])
    return float((preds.numpy() == np.asarray(labels)).mean())


def train_classifier(ds: SyntheticDataset, epochs: int = 8, seed: int = 0, lr: float = 2e-3, batch_size: int = 64,
                     num_classes: Optional[int] = None, holdout: float = 0.25,
                     shuffle_labels: bool = False) -> tuple[dict[str, torch.Tensor], float]:
    """Train on a stratified split; returns (params, held-out accuracy).

    Each batch is padded with pure-noise images whose target is the uniform
    distribution, so inputs carrying no texture evidence score near chance.
    """
    k = num_classes or int(ds.style_ids.max()) + 1
    train, test = ds.split(holdout, seed)
    labels = np.array(train.style_ids)
    test_labels = np.array(test.style_ids)
    if shuffle_labels:
        rng = np.random.Generator(np.random.Philox(key=[seed, 0x5A1F]))
        labels = rng.permutation(labels)
        test_labels = rng.permutation(test_labels)
    params = {n: v.requires_grad_(True) for n, v in init_classifier(k, seed).items()}
    opt = torch.optim.Adam(list(params.values()), lr=lr)
    steps = epochs * math.ceil(len(train) / batch_size)
    n_noise = max(1, batch_size // 8)
    for step in range(steps):
        rng = step_rng(seed, step, stream=1)
        idx = rng.integers(0, len(train), size=batch_size)
        x = train.images[torch.from_numpy(idx)]
        y = torch.from_numpy(labels[idx])
        noise = torch.from_numpy(rng.uniform(-1, 1, (n_noise,) + tuple(x.shape[1:])).astype(np.float32))
        logits, _ = classifier_forward(params, torch.cat([x, noise]))
        loss = F.cross_entropy(logits[:batch_size], y)
        loss = loss + 0.25 * -F.log_softmax(logits[batch_size:], dim=1).mean()
        if not torch.isfinite(loss):
            raise NumericError(f"classifier: non-finite loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    params = {n: v.detach() for n, v in params.items()}
    return params, classifier_accuracy(params, test.images, test_labels)
