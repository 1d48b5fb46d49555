"""Portable little-endian checkpoint format.

Layout::

    b"FSTY" | u32 version | u32 meta_len | meta (UTF-8 JSON)
    | u32 n_tensors | n x (u32 name_len | name | u32 rank | rank x u32 dim | f32 data)
    | u64 checksum

The checksum is the 8-byte BLAKE2b digest (read as little-endian u64) of every
preceding byte. Metadata is serialized with sorted keys so an unmodified
checkpoint re-serializes byte-for-byte.
"""
from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import ChecksumError, ConfigError, StorageError
from .unet import UNetConfig, UNetParams, manifest

MAGIC = b"FSTY"
VERSION = 1
OPTIMIZER_PREFIXES = ("adam.m/", "adam.v/")


def checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def dumps(tensors: Mapping[str, torch.Tensor], metadata: Mapping) -> bytes:
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = np.array(t.detach().cpu().numpy(), dtype="<f4", order="C")
        parts.append(struct.pack(f"<I{len(raw)}sI", len(raw), raw, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", checksum(body))


class _Reader:
    def __init__(self, buf: bytes, where: str):
        self.buf, self.pos, self.where = buf, 0, where

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise StorageError(f"{self.where}: truncated checkpoint at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def loads(buf: bytes, where: str = "<bytes>") -> tuple["OrderedDict[str, torch.Tensor]", dict]:
    if len(buf) < 16:
        raise StorageError(f"{where}: not a FSTY checkpoint (only {len(buf)} bytes)")
    body, (stored,) = buf[:-8], struct.unpack("<Q", buf[-8:])
    if checksum(body) != stored:
        raise ChecksumError(f"{where}: checksum mismatch")
    if body[:4] != MAGIC:
        raise StorageError(f"{where}: not a FSTY checkpoint")
    r = _Reader(body, where)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise StorageError(f"{where}: unsupported format version {version}")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise StorageError(f"{where}: corrupt metadata ({exc})") from exc
    tensors = OrderedDict()
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if r.pos != len(body):
        raise StorageError(f"{where}: {len(body) - r.pos} trailing bytes before checksum")
    return tensors, meta


def save_checkpoint(path, tensors: Mapping[str, torch.Tensor], metadata: Mapping) -> None:
    path = Path(path)
    try:
        path.write_bytes(dumps(tensors, metadata))
    except OSError as exc:
        raise StorageError(f"{path}: cannot write checkpoint ({exc})") from exc


def load_checkpoint(path) -> tuple["OrderedDict[str, torch.Tensor]", dict]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise StorageError(f"{path}: cannot read checkpoint ({exc})") from exc
    return loads(buf, str(path))


def unet_config_from_meta(meta: Mapping) -> UNetConfig:
    try:
        return UNetConfig(**meta["unet"])
    except (KeyError, TypeError) as exc:
        raise StorageError(f"checkpoint metadata lacks a valid 'unet' section ({exc})") from exc


def save_unet(path, params: UNetParams, metadata: Mapping | None = None,
              optimizer_state: Mapping[str, torch.Tensor] | None = None) -> None:
    meta = dict(metadata or {})
    meta["kind"] = "unet"
    meta["unet"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(params.config).items()}
    tensors = OrderedDict(params.items())
    for k, v in (optimizer_state or {}).items():
        tensors[k] = v
    save_checkpoint(path, tensors, meta)


def load_unet(path) -> tuple[UNetParams, dict, dict]:
    """Returns (params, metadata, optimizer tensors); names must match the manifest."""
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "unet":
        raise StorageError(f"{path}: not a U-Net checkpoint (kind={meta.get('kind')!r})")
    cfg = unet_config_from_meta(meta)
    model = {k: v for k, v in tensors.items() if not k.startswith(OPTIMIZER_PREFIXES)}
    opt = {k: v for k, v in tensors.items() if k.startswith(OPTIMIZER_PREFIXES)}
    if list(model) != list(manifest(cfg)):
        raise StorageError(f"{path}: tensor directory does not match the U-Net manifest")
    try:
        params = UNetParams(cfg, model)
    except ConfigError as exc:
        raise StorageError(f"{path}: {exc}") from exc
    return params, meta, opt


def save_classifier(path, params: Mapping[str, torch.Tensor], metadata: Mapping | None = None) -> None:
    meta = dict(metadata or {})
    meta["kind"] = "classifier"
    save_checkpoint(path, OrderedDict(params), meta)


def load_classifier(path) -> tuple[dict, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "classifier":
        raise StorageError(f"{path}: not a classifier checkpoint (kind={meta.get('kind')!r})")
    return dict(tensors), meta
