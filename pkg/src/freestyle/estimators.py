"""scikit-learn style wrappers over the functional modules.

Images are ``(n, 3, H, W)`` arrays (numpy or torch) with values in [-1, 1];
labels are integer style ids.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import SyntheticDataset
from .errors import ConfigError, DimensionError
from .metrics import StyleScorer
from .pipeline import StylizeRequest, stylize
from .schedule import make_linear_schedule
from .spectral import ModulationConfig
from .train import DiffusionTrainer, TrainConfig, classifier_accuracy, diffusion_loss, step_rng, train_classifier
from .unet import StyleCondition, UNetConfig, UNetParams, init_params


def check_images(X, name: str = "X") -> torch.Tensor:
    """Coerce to a finite float32 ``(n, C, H, W)`` tensor in [-1, 1]."""
    x = torch.as_tensor(np.asarray(X) if not isinstance(X, torch.Tensor) else X).to(torch.float32)
    if x.ndim != 4:
        raise DimensionError(f"{name}: expected (n, C, H, W), got shape {tuple(x.shape)}")
    if x.shape[0] == 0:
        raise DimensionError(f"{name}: empty batch")
    if not torch.isfinite(x).all():
        raise ConfigError(f"{name}: contains non-finite values")
    if x.abs().max() > 1 + 1e-6:
        raise ConfigError(f"{name}: values must lie in [-1, 1]")
    return x.contiguous()


def check_labels(y, n: int, num_classes: Optional[int] = None) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise DimensionError(f"y: expected shape ({n},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ConfigError("y: style ids must be integers")
    if (y < 0).any() or (num_classes is not None and (y >= num_classes).any()):
        raise ConfigError(f"y: style ids must lie in [0, {num_classes})")
    return y.astype(np.int64)


def _as_dataset(x: torch.Tensor, y: np.ndarray) -> SyntheticDataset:
    # no shape labels: the stratified split falls back to style-only strata
    n, _, h, w = x.shape
    return SyntheticDataset(x, y, np.zeros(n, dtype=np.int64), np.zeros((n, h, w), dtype=bool))


class DiffusionBackbone(BaseEstimator):
    """Class-conditional noise predictor trained with the epsilon objective."""

    def __init__(self, base_channels=32, channel_mults=(1, 2, 4), time_embed_dim=None, groupnorm_groups=8,
                 num_style_classes=None, T=1000, lr=1e-3, batch_size=32, max_steps=1000, null_prob=0.1, seed=0):
        self.base_channels = base_channels
        self.channel_mults = channel_mults
        self.time_embed_dim = time_embed_dim
        self.groupnorm_groups = groupnorm_groups
        self.num_style_classes = num_style_classes
        self.T = T
        self.lr = lr
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.null_prob = null_prob
        self.seed = seed

    def _unet_config(self, k: int, in_channels: int) -> UNetConfig:
        return UNetConfig(in_channels=in_channels, base_channels=self.base_channels,
                          channel_mults=tuple(self.channel_mults),
                          time_embed_dim=self.time_embed_dim or 4 * self.base_channels,
                          num_style_classes=k, groupnorm_groups=self.groupnorm_groups)

    def fit(self, X, y):
        x = check_images(X)
        k = self.num_style_classes or int(np.max(y)) + 1
        y = check_labels(y, x.shape[0], k)
        cfg = self._unet_config(k, x.shape[1])
        cfg.check_image_size(x.shape[2], x.shape[3])
        self.schedule_ = make_linear_schedule(self.T)
        tcfg = TrainConfig(lr=self.lr, batch_size=self.batch_size, max_steps=self.max_steps,
                           null_prob=self.null_prob, seed=self.seed)
        trainer = DiffusionTrainer(init_params(cfg, self.seed), self.schedule_, tcfg)
        self.loss_curve_ = trainer.fit(_as_dataset(x, y), steps=self.max_steps)
        self.params_ = trainer.params.detached()
        self.n_classes_ = k
        return self

    @classmethod
    def from_params(cls, params: UNetParams, T: int = 1000) -> "DiffusionBackbone":
        """Wrap already-trained weights (e.g. from a checkpoint)."""
        c = params.config
        est = cls(base_channels=c.base_channels, channel_mults=c.channel_mults, time_embed_dim=c.time_embed_dim,
                  groupnorm_groups=c.groupnorm_groups, num_style_classes=c.num_style_classes, T=T)
        est.params_ = params
        est.schedule_ = make_linear_schedule(T)
        est.n_classes_ = c.num_style_classes
        est.loss_curve_ = []
        return est

    def score(self, X, y) -> float:
        """Negative epsilon-loss on a seeded draw of timesteps and noise."""
        check_is_fitted(self, "params_")
        x = check_images(X)
        y = check_labels(y, x.shape[0], self.n_classes_)
        rng = step_rng(self.seed, 0, stream=7)
        t = torch.from_numpy(rng.integers(1, self.T + 1, size=x.shape[0]))
        eps = torch.from_numpy(rng.standard_normal(tuple(x.shape)).astype(np.float32))
        with torch.no_grad():
            loss = diffusion_loss(self.params_, x, [int(v) for v in y], t, eps, self.schedule_)
        return -float(loss)


class StyleClassifier(ClassifierMixin, BaseEstimator):
    """Small convolutional style classifier; also the Gram feature extractor."""

    def __init__(self, epochs=8, lr=2e-3, batch_size=64, holdout=0.25, seed=0):
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.holdout = holdout
        self.seed = seed

    def fit(self, X, y):
        x = check_images(X)
        y = check_labels(y, x.shape[0])
        self.classes_ = np.arange(int(y.max()) + 1)
        self.params_, self.holdout_accuracy_ = train_classifier(
            _as_dataset(x, y), epochs=self.epochs, seed=self.seed, lr=self.lr, batch_size=self.batch_size,
            num_classes=len(self.classes_), holdout=self.holdout)
        return self

    @classmethod
    def from_params(cls, params) -> "StyleClassifier":
        est = cls()
        est.params_ = dict(params)
        est.classes_ = np.arange(int(est.params_["cls.head.w"].shape[0]))
        est.holdout_accuracy_ = float("nan")
        return est

    @property
    def scorer_(self) -> StyleScorer:
        check_is_fitted(self, "params_")
        return StyleScorer(self.params_)

    def predict_proba(self, X) -> np.ndarray:
        return self.scorer_.probabilities(check_images(X)).numpy()

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(1)]

    def score(self, X, y) -> float:
        x = check_images(X)
        return classifier_accuracy(self.scorer_.params, x, check_labels(y, x.shape[0]))

    def features(self, X) -> list:
        return self.scorer_.features(check_images(X))


class FreeStyleTransformer(TransformerMixin, BaseEstimator):
    """Stylize content images toward one target style with a fitted backbone."""

    def __init__(self, backbone=None, style=0, b=2.5, s=1.0, n_fraction=0.25, r_thresh=1.0, apply_levels=None,
                 sigma_fraction=0.958, num_steps=30, seed=0, content_mode="clean", rho=0,
                 clip_denoised=True):
        self.backbone = backbone
        self.style = style
        self.b = b
        self.s = s
        self.n_fraction = n_fraction
        self.r_thresh = r_thresh
        self.apply_levels = apply_levels
        self.sigma_fraction = sigma_fraction
        self.num_steps = num_steps
        self.seed = seed
        self.content_mode = content_mode
        self.clip_denoised = clip_denoised
        self.rho = rho

    def fit(self, X=None, y=None):
        if self.backbone is None:
            raise ConfigError("FreeStyleTransformer needs a fitted DiffusionBackbone")
        check_is_fitted(self.backbone, "params_")
        if not 0 < self.sigma_fraction <= 1:
            raise ConfigError(f"sigma_fraction must lie in (0, 1], got {self.sigma_fraction}")
        levels = None if self.apply_levels is None else frozenset(self.apply_levels)
        self.mod_ = ModulationConfig(b=self.b, s=self.s, n_fraction=self.n_fraction, r_thresh=self.r_thresh,
                                     apply_levels=levels)
        StyleCondition(self.style).indices(1, self.backbone.params_.config)
        return self

    def request(self, X) -> StylizeRequest:
        check_is_fitted(self, "mod_")
        T = self.backbone.schedule_.T
        return StylizeRequest(check_images(X), StyleCondition(self.style), self.mod_,
                              sigma=int(round(self.sigma_fraction * T)), num_steps=self.num_steps, seed=self.seed,
                              content_mode=self.content_mode, rho=self.rho,
                              clip_denoised=self.clip_denoised)

    def transform(self, X) -> np.ndarray:
        req = self.request(X)
        return stylize(req, self.backbone.params_, self.backbone.schedule_).numpy()
