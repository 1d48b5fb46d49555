"""Quantitative proxies: content PSNR, Gram distance, classifier style score,
and a radial high-frequency energy ratio."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .errors import RequestError
from .nnops import same_shape
from .spectral import center_radius
from .train import classifier_forward

PSNR_CAP = 99.0
PEAK = 2.0


@dataclass(frozen=True)
class MetricRecord:
    psnr_content: float
    gram_distance: float
    style_accuracy: float
    style_confidence: float
    band_energy_ratio: float

    def to_dict(self) -> dict:
        return asdict(self)


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """PSNR in dB over the [-1, 1] range; identical inputs give the 99 dB cap."""
    same_shape(a, b)
    mse = float(((a.to(torch.float64) - b.to(torch.float64)) ** 2).mean())
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(PEAK ** 2 / mse))


class StyleScorer:
    """Wraps trained classifier weights; the sole style authority."""

    def __init__(self, params: Mapping[str, torch.Tensor], trained: bool = True):
        self.params = dict(params)
        self.trained = trained
        self.num_classes = int(self.params["cls.head.w"].shape[0])

    def _require_trained(self) -> None:
        if not self.trained:
            raise RequestError("style scorer: classifier is untrained")

    def logits_and_features(self, x: torch.Tensor):
        with torch.no_grad():
            return classifier_forward(self.params, x.to(torch.float32))

    def probabilities(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits_and_features(x)[0].to(torch.float64), dim=1)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        return self.logits_and_features(x)[1]


def gram(feat: torch.Tensor) -> torch.Tensor:
    b, c, h, w = feat.shape
    f = feat.reshape(b, c, h * w).to(torch.float64)
    return f @ f.transpose(1, 2) / (c * h * w)


def gram_distance(a: torch.Tensor, b: torch.Tensor, extractor: StyleScorer) -> torch.Tensor:
    """Per-item Frobenius distance between channel Gram matrices, mean over layers."""
    extractor._require_trained()
    same_shape(a, b)
    fa, fb = extractor.features(a), extractor.features(b)
    dists = [torch.linalg.matrix_norm(gram(x) - gram(y)) for x, y in zip(fa, fb)]
    return torch.stack(dists).mean(0)


def style_score(image: torch.Tensor, target_style, scorer: StyleScorer) -> tuple[np.ndarray, np.ndarray]:
    """Per-item (argmax == target, softmax probability of target)."""
    scorer._require_trained()
    targets = np.broadcast_to(np.asarray(target_style, dtype=np.int64), (image.shape[0],))
    if (targets < 0).any() or (targets >= scorer.num_classes).any():
        raise RequestError(f"target style outside [0, {scorer.num_classes})")
    probs = scorer.probabilities(image).numpy()
    acc = (probs.argmax(1) == targets).astype(np.float64)
    return acc, probs[np.arange(len(targets)), targets]


def band_energy_ratio(image: torch.Tensor, split_radius_fraction: float = 0.25) -> torch.Tensor:
    """Per-item share of spectral energy beyond ``fraction * min(H, W) / 2`` from DC."""
    if not 0 < split_radius_fraction < 1:
        raise RequestError(f"split_radius_fraction must lie in (0, 1), got {split_radius_fraction}")
    x = image.to(torch.float64)
    power = torch.fft.fftshift(torch.fft.fft2(x), dim=(-2, -1)).abs() ** 2
    h, w = x.shape[-2:]
    outer = torch.as_tensor(center_radius(h, w) > split_radius_fraction * min(h, w) / 2)
    total = power.sum(dim=(1, 2, 3))
    high = (power * outer).sum(dim=(1, 2, 3))
    return torch.where(total > 0, high / total.clamp_min(1e-300), torch.zeros_like(total))


def evaluate(outputs: torch.Tensor, content: torch.Tensor, target_style, scorer: StyleScorer,
             split_radius_fraction: float = 0.25) -> list[MetricRecord]:
    """One record per batch item; PSNR and Gram distance are against the content image."""
    acc, conf = style_score(outputs, target_style, scorer)
    gd = gram_distance(outputs, content, scorer)
    ber = band_energy_ratio(outputs, split_radius_fraction)
    return [MetricRecord(psnr(outputs[i:i + 1], content[i:i + 1]), float(gd[i]), float(acc[i]), float(conf[i]),
                         float(ber[i])) for i in range(outputs.shape[0])]


def mean_record(records: Sequence[MetricRecord]) -> MetricRecord:
    keys = MetricRecord.__dataclass_fields__
    return MetricRecord(**{k: float(np.mean([getattr(r, k) for r in records])) for k in keys})
