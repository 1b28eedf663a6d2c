"""Single-file binary checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes  b"VADL"
    version u32
    body_len u64
    body:
        config_len u32, config JSON (UTF-8, sorted keys)
        tensor_count u32
        per tensor, in name-sorted order:
            name_len u16, name UTF-8
            dtype u8 (0 = little-endian f32, 1 = little-endian f64)
            ndim u8, dims u32 each
            payload (raw little-endian values)
    checksum 8 bytes  blake2b(digest_size=8) over body

Name-sorting makes serialization canonical: two equal models produce
byte-identical files, and save -> load -> save is the identity on bytes.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .attention import AttentionSpec
from .model import ViTConfig, ViTModel, init_model

MAGIC = b"VADL"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


def _config_json(config: ViTConfig) -> bytes:
    return json.dumps(dataclasses.asdict(config), sort_keys=True, separators=(",", ":")).encode()


def _config_from_json(raw: bytes) -> ViTConfig:
    d = json.loads(raw.decode())
    d["attention"] = AttentionSpec(**d["attention"])
    return ViTConfig(**d)


def _body(model: ViTModel) -> bytes:
    parts = []
    cfg = _config_json(model.config)
    parts.append(struct.pack("<I", len(cfg)))
    parts.append(cfg)
    tensors = sorted(model.named_tensors(), key=lambda nt: nt[0])
    parts.append(struct.pack("<I", len(tensors)))
    for name, t in tensors:
        raw_name = name.encode()
        arr = t.data
        code = _DTYPE_CODES[np.dtype(arr.dtype.str.replace(">", "<"))]
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(_CODE_DTYPES[code], copy=False).tobytes())
    return b"".join(parts)


def save_checkpoint(model: ViTModel, path) -> None:
    body = _body(model)
    digest = hashlib.blake2b(body, digest_size=8).digest()
    blob = MAGIC + struct.pack("<IQ", VERSION, len(body)) + body + digest
    Path(path).write_bytes(blob)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise TruncatedError(f"checkpoint truncated: wanted {n} bytes at offset {self.off}, "
                                 f"file has {len(self.buf)}")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> ViTModel:
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint file (bad magic)")
    (version, body_len) = r.unpack("<IQ")
    if version != VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
    body = r.take(body_len)
    digest = r.take(8)
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupt")

    r = _Reader(body)
    (cfg_len,) = r.unpack("<I")
    config = _config_from_json(r.take(cfg_len))
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        code, ndim = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for tensor {name!r}")
        shape = r.unpack(f"<{ndim}I")
        dt = _CODE_DTYPES[code]
        payload = r.take(int(np.prod(shape, dtype=np.int64)) * dt.itemsize)
        tensors[name] = np.frombuffer(payload, dtype=dt).reshape(shape).copy()

    model = init_model(config, seed=0)
    expected = dict(model.named_tensors())
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"{path}: tensor table mismatch (missing {missing}, unexpected {extra})")
    for name, t in expected.items():
        arr = tensors[name]
        if arr.shape != t.data.shape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {arr.shape}, expected {t.data.shape}")
        _assign(model, name, arr)
    return model


def _assign(model: ViTModel, name: str, arr: np.ndarray) -> None:
    for n, t in model.named_tensors():
        if n == name:
            t.data = np.ascontiguousarray(arr)
            t.grad = None
            return
    raise CheckpointError(f"no tensor named {name!r}")
