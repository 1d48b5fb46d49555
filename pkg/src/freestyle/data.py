"""Synthetic styled-shapes dataset and lossless image I/O.

Content is the shape geometry (circle, square, triangle, cross, ...); style is
the fill texture (flat, stripes, checker, stipple, ...). Palettes are drawn
per sample so texture is the only cue that identifies a style.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, StorageError

SHAPES = ("circle", "square", "triangle", "cross", "diamond", "ring")
STYLES = ("flat", "stripes", "checker", "stipple", "diagonal", "vstripes")
BACKGROUND = 0.0


@dataclass(frozen=True)
class DatasetSpec:
    num_shapes: int = 4
    num_styles: int = 4
    image_size: int = 32
    samples_per_cell: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_shapes <= len(SHAPES):
            raise ConfigError(f"data: num_shapes must be in [1, {len(SHAPES)}], got {self.num_shapes}")
        if not 2 <= self.num_styles <= len(STYLES):
            raise ConfigError(f"data: num_styles must be in [2, {len(STYLES)}], got {self.num_styles}")
        if self.image_size < 8 or self.samples_per_cell < 1:
            raise ConfigError("data: image_size must be >= 8 and samples_per_cell >= 1")


@dataclass(frozen=True)
class Sample:
    image: torch.Tensor
    style_id: int
    shape_id: int
    shape_mask: np.ndarray


@dataclass
class SyntheticDataset:
    images: torch.Tensor          # (N, 3, H, W) float32 in [-1, 1]
    style_ids: np.ndarray
    shape_ids: np.ndarray
    masks: np.ndarray             # (N, H, W) bool
    spec: Optional[DatasetSpec] = None

    def __len__(self) -> int:
        return len(self.style_ids)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i:i + 1], int(self.style_ids[i]), int(self.shape_ids[i]), self.masks[i])

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "SyntheticDataset":
        idx = np.asarray(idx)
        return SyntheticDataset(self.images[torch.as_tensor(idx)], self.style_ids[idx], self.shape_ids[idx],
                                self.masks[idx], self.spec)

    def split(self, holdout: float = 0.25, seed: int = 0) -> tuple["SyntheticDataset", "SyntheticDataset"]:
        """Stratified (shape, style) train/held-out split."""
        rng = np.random.Generator(np.random.Philox(key=[seed, 0x5B17]))
        train, test = [], []
        for cell in sorted(set(zip(self.shape_ids.tolist(), self.style_ids.tolist()))):
            idx = np.flatnonzero((self.shape_ids == cell[0]) & (self.style_ids == cell[1]))
            idx = rng.permutation(idx)
            k = int(round(holdout * len(idx)))
            if holdout > 0 and len(idx) > 1:
                k = min(max(k, 1), len(idx) - 1)
            test.extend(idx[:k])
            train.extend(idx[k:])
        return (self.subset(np.sort(np.array(train, dtype=np.int64))),
                self.subset(np.sort(np.array(test, dtype=np.int64))))


def shape_mask(shape_id: int, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    name = SHAPES[shape_id]
    if name == "circle":
        return dx ** 2 + dy ** 2 <= r ** 2
    if name == "square":
        return (np.abs(dx) <= 0.85 * r) & (np.abs(dy) <= 0.85 * r)
    if name == "triangle":
        # apex up, base at cy + r
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.5 * 1.15)
    if name == "cross":
        w = 0.38 * r
        return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    if name == "diamond":
        return np.abs(dx) + np.abs(dy) <= 1.15 * r
    return (dx ** 2 + dy ** 2 <= r ** 2) & (dx ** 2 + dy ** 2 >= (0.55 * r) ** 2)


def style_pattern(style_id: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Binary texture selecting the secondary palette colour."""
    yy, xx = np.mgrid[0:size, 0:size]
    name = STYLES[style_id]
    phase = int(rng.integers(0, 4))
    if name == "flat":
        return np.zeros((size, size), bool)
    if name == "stripes":
        return ((yy + phase) // 2) % 2 == 1
    if name == "checker":
        return (((yy + phase) // 2) + ((xx + phase) // 2)) % 2 == 1
    if name == "stipple":
        return rng.random((size, size)) < 0.3
    if name == "diagonal":
        return ((xx + yy + phase) // 2) % 2 == 1
    return ((xx + phase) // 2) % 2 == 1


def render(shape_id: int, style_id: int, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One (3, size, size) image in [-1, 1] and its shape mask."""
    r = size * rng.uniform(0.24, 0.36)
    jitter = size * 0.12
    cx = size / 2 + rng.uniform(-jitter, jitter)
    cy = size / 2 + rng.uniform(-jitter, jitter)
    mask = shape_mask(shape_id, size, cx, cy, r)
    primary = rng.uniform(0.3, 1.0, size=3)
    secondary = rng.uniform(-1.0, -0.3, size=3)
    pattern = style_pattern(style_id, size, rng)
    fill = np.where(pattern[None], secondary[:, None, None], primary[:, None, None])
    img = np.where(mask[None], fill, BACKGROUND)
    return img.astype(np.float32), mask


def generate(spec: DatasetSpec) -> SyntheticDataset:
    """Every (shape, style) cell gets ``samples_per_cell`` jittered renders.

    Each sample draws from its own counter-keyed stream, so the dataset is a
    pure function of ``spec``.
    """
    n = spec.num_shapes * spec.num_styles * spec.samples_per_cell
    images = np.empty((n, 3, spec.image_size, spec.image_size), np.float32)
    masks = np.empty((n, spec.image_size, spec.image_size), bool)
    shape_ids = np.empty(n, np.int64)
    style_ids = np.empty(n, np.int64)
    i = 0
    for k in range(spec.samples_per_cell):
        for sh in range(spec.num_shapes):
            for st in range(spec.num_styles):
                rng = np.random.Generator(np.random.Philox(key=[spec.seed, i]))
                images[i], masks[i] = render(sh, st, spec.image_size, rng)
                shape_ids[i], style_ids[i] = sh, st
                i += 1
    return SyntheticDataset(torch.from_numpy(images), style_ids, shape_ids, masks, spec)


def _to_uint8(image: torch.Tensor) -> np.ndarray:
    x = image.detach().cpu().to(torch.float64)
    if x.dim() == 4:
        if x.shape[0] != 1:
            raise ConfigError(f"save_image: expected a single image, got batch of {x.shape[0]}")
        x = x[0]
    if x.dim() != 3 or x.shape[0] != 3:
        raise ConfigError(f"save_image: expected (3, H, W), got {tuple(image.shape)}")
    arr = np.floor((x.numpy().clip(-1, 1) + 1.0) * 127.5 + 0.5).astype(np.uint8)
    return arr.transpose(1, 2, 0)


def save_image(image: torch.Tensor, path) -> None:
    path = Path(path)
    try:
        Image.fromarray(_to_uint8(image), mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise StorageError(f"{path}: cannot write image ({exc})") from exc


def load_image(path) -> torch.Tensor:
    """8-bit RGB file -> (1, 3, H, W) tensor in [-1, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise StorageError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except StorageError:
        raise
    except OSError as exc:
        raise StorageError(f"{path}: cannot read image ({exc})") from exc
    x = arr.astype(np.float32).transpose(2, 0, 1) / 127.5 - 1.0
    return torch.from_numpy(np.ascontiguousarray(x))[None]


MANIFEST = "manifest.jsonl"


def write_dataset(ds: SyntheticDataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(ds):
        rel = f"images/{i:06d}.png"
        save_image(s.image, out / rel)
        lines.append(json.dumps({"path": rel, "shape_id": s.shape_id, "style_id": s.style_id}))
    (out / MANIFEST).write_text("\n".join(lines) + "\n")
    return out / MANIFEST


def read_dataset(data_dir) -> SyntheticDataset:
    """Load a manifest directory; masks are recovered as non-background pixels."""
    root = Path(data_dir)
    try:
        rows = [json.loads(line) for line in (root / MANIFEST).read_text().splitlines() if line.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise StorageError(f"{root / MANIFEST}: cannot read manifest ({exc})") from exc
    if not rows:
        raise StorageError(f"{root / MANIFEST}: empty manifest")
    images = torch.cat([load_image(root / r["path"]) for r in rows])
    # palette colours sit >= 0.3 away from the background
    masks = ((images - BACKGROUND).abs().amax(dim=1) > 0.1).numpy()
    return SyntheticDataset(images, np.array([r["style_id"] for r in rows]), np.array([r["shape_id"] for r in rows]),
                            masks)


def select_contents(ds: SyntheticDataset, n: int, holdout: float = 0.25, seed: int = 0) -> SyntheticDataset:
    """Up to ``n`` held-out samples, taken round-robin over (shape, style) cells."""
    _, test = ds.split(holdout, seed)
    cells = sorted(set(zip(test.shape_ids.tolist(), test.style_ids.tolist())))
    buckets = [list(np.flatnonzero((test.shape_ids == a) & (test.style_ids == b))) for a, b in cells]
    picked = []
    while len(picked) < n and any(buckets):
        for bucket in buckets:
            if bucket and len(picked) < n:
                picked.append(bucket.pop(0))
    return test.subset(np.array(picked, dtype=np.int64))
