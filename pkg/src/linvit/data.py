"""Deterministic synthetic dataset of oriented gratings, plus raw-file I/O.

Sample i carries label i mod C and shows a sinusoidal grating oriented at
theta = pi * label / C:

    value(x, y) = clamp(0.5 + 0.4 * sin(2*pi*f*(x*cos + y*sin)/S + rho_i) + eta, 0, 1)

with a per-sample random phase rho_i and Gaussian pixel noise eta.  The three
channels are identical.  Orientation survives cropping and brightness jitter,
so augmentation never changes a label.  Every sample draws from its own
substream (seed XOR index), making generation order-independent and
reproducible byte-for-byte.

Raw dataset files: magic b"VADS", version u32, n u32, C u32, S u32, then n
records of (label u32, 3*S*S little-endian f32, channel-major).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import ContractError, Rng

MAGIC = b"VADS"
VERSION = 1


class DataFormatError(Exception):
    """Raw dataset file violates the format contract."""


@dataclass
class DatasetSpec:
    seed: int
    num_samples: int
    num_classes: int
    image_size: int
    noise_std: float = 0.05
    frequency: float = 4.0

    def __post_init__(self) -> None:
        if self.num_samples < self.num_classes:
            raise ContractError(f"need at least one sample per class: n={self.num_samples} < C={self.num_classes}")
        if self.num_classes < 1 or self.image_size < 1:
            raise ContractError(f"num_classes and image_size must be positive, got "
                                f"{self.num_classes}/{self.image_size}")
        if self.noise_std < 0:
            raise ContractError(f"noise_std must be >= 0, got {self.noise_std}")


@dataclass
class Sample:
    image: np.ndarray  # [3, S, S] float32 in [0, 1]
    label: int


def gen_synthetic(spec: DatasetSpec) -> list[Sample]:
    s = spec.image_size
    ys, xs = np.meshgrid(np.arange(s, dtype=np.float64), np.arange(s, dtype=np.float64), indexing="ij")
    samples = []
    for i in range(spec.num_samples):
        rng = Rng(spec.seed ^ i)
        label = i % spec.num_classes
        theta = np.pi * label / spec.num_classes
        rho = float(rng.uniform((), 0.0, 2.0 * np.pi))
        wave = np.sin(2.0 * np.pi * spec.frequency * (xs * np.cos(theta) + ys * np.sin(theta)) / s + rho)
        plane = 0.5 + 0.4 * wave
        if spec.noise_std > 0:
            plane = plane + rng.normal((s, s), std=spec.noise_std).astype(np.float64)
        plane = np.clip(plane, 0.0, 1.0).astype(np.float32)
        samples.append(Sample(image=np.broadcast_to(plane, (3, s, s)).copy(), label=label))
    return samples


def augment(img: np.ndarray, rng: Rng, crop_pad: int, jitter: float) -> np.ndarray:
    """Reflect-pad + random crop, then a uniform brightness factor, clamped to [0, 1]."""
    if crop_pad < 0:
        raise ContractError(f"crop_pad must be >= 0, got {crop_pad}")
    if not 0.0 <= jitter < 0.5:
        raise ContractError(f"jitter must lie in [0, 0.5), got {jitter}")
    out = img
    if crop_pad > 0:
        s = img.shape[-1]
        padded = np.pad(img, ((0, 0), (crop_pad, crop_pad), (crop_pad, crop_pad)), mode="reflect")
        oy, ox = (int(v) for v in rng.integers(0, 2 * crop_pad + 1, (2,)))
        out = padded[:, oy:oy + s, ox:ox + s]
    if jitter > 0:
        factor = float(rng.uniform((), 1.0 - jitter, 1.0 + jitter))
        out = out * factor
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def save_raw(samples: list[Sample], num_classes: int, path) -> None:
    if not samples:
        raise ContractError("refusing to write an empty dataset")
    s = samples[0].image.shape[-1]
    parts = [MAGIC, struct.pack("<IIII", VERSION, len(samples), num_classes, s)]
    for smp in samples:
        if smp.image.shape != (3, s, s):
            raise ContractError(f"inconsistent image shape {smp.image.shape}, expected (3, {s}, {s})")
        parts.append(struct.pack("<I", smp.label))
        parts.append(smp.image.astype("<f4", copy=False).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_raw(path) -> tuple[list[Sample], int]:
    """Returns (samples, num_classes); every violation raises a distinct message."""
    blob = Path(path).read_bytes()
    if len(blob) < 20:
        raise DataFormatError(f"{path}: too short to hold a header")
    if blob[:4] != MAGIC:
        raise DataFormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, n, c, s = struct.unpack("<IIII", blob[4:20])
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    if n < 1 or c < 1 or s < 1:
        raise DataFormatError(f"{path}: nonsensical header n={n} C={c} S={s}")
    rec = 4 + 3 * s * s * 4
    expected = 20 + n * rec
    if len(blob) != expected:
        raise DataFormatError(f"{path}: truncated or padded; header implies {expected} bytes, file has {len(blob)}")
    samples = []
    off = 20
    for i in range(n):
        (label,) = struct.unpack_from("<I", blob, off)
        if label >= c:
            raise DataFormatError(f"{path}: record {i} label {label} >= num_classes {c}")
        img = np.frombuffer(blob, dtype="<f4", count=3 * s * s, offset=off + 4).reshape(3, s, s).copy()
        if not np.all(np.isfinite(img)):
            raise DataFormatError(f"{path}: record {i} contains non-finite pixels")
        samples.append(Sample(image=img, label=int(label)))
        off += rec
    return samples, c


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Pack samples into (images [n, 3, S, S] f32, labels [n] i64)."""
    if not samples:
        raise ContractError("empty dataset")
    images = np.stack([s.image for s in samples]).astype(np.float32)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return images, labels
