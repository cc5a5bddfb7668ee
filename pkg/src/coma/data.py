"""Procedural image corpus stored as CMT1 tensor files with a checksummed manifest."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import rng as R
from .errors import ConfigError, FormatError
from .serialize import atomic_write, load_tensor, tensor_bytes

MANIFEST = "manifest.json"
KINDS = ("gradient", "checkerboard", "blobs", "grating")


@dataclass
class Dataset:
    images: np.ndarray  # (count, 3, H, W) float32 in [0, 1]
    paths: list
    checksums: list

    def __len__(self) -> int:
        return self.images.shape[0]


def _coords(size: int) -> tuple[np.ndarray, np.ndarray]:
    y, x = np.meshgrid(np.linspace(0.0, 1.0, size), np.linspace(0.0, 1.0, size), indexing="ij")
    return y, x


def _gradient(rng, size):
    y, x = _coords(size)
    theta = rng.uniform(0, 2 * np.pi)
    t = np.cos(theta) * x + np.sin(theta) * y
    t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    return c0[:, None, None] * (1 - t) + c1[:, None, None] * t


def _checkerboard(rng, size):
    cell = int(rng.choice([4, 8, 16]))
    iy, ix = np.indices((size, size)) // cell
    sel = ((iy + ix) % 2).astype(np.float64)
    c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    return c0[:, None, None] * (1 - sel) + c1[:, None, None] * sel


def _blobs(rng, size):
    y, x = _coords(size)
    img = np.tile(rng.uniform(0, 0.3, 3)[:, None, None], (1, size, size))
    for _ in range(int(rng.integers(1, 5))):
        cy, cx = rng.uniform(0, 1, 2)
        s = rng.uniform(0.05, 0.25)
        bump = np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * s * s))
        img += rng.uniform(0.2, 0.9, 3)[:, None, None] * bump
    return img


def _grating(rng, size):
    y, x = _coords(size)
    freq = rng.uniform(1, 8)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi, 3)
    t = np.cos(theta) * x + np.sin(theta) * y
    return 0.5 + 0.5 * np.sin(2 * np.pi * freq * t[None] + phase[:, None, None])


_GEN = {"gradient": _gradient, "checkerboard": _checkerboard, "blobs": _blobs, "grating": _grating}


def synth_images(seed: int, count: int, size: int) -> np.ndarray:
    """(count, 3, size, size) float32 images; image ``i`` depends only on (seed, i)."""
    if size <= 0 or size % 32:
        raise ConfigError(f"image size must be a positive multiple of 32, got {size}")
    out = np.empty((count, 3, size, size), dtype=np.float32)
    for i in range(count):
        rng = R.stream(seed, R.SYNTH, i)
        kind = KINDS[int(rng.integers(len(KINDS)))]
        out[i] = np.clip(_GEN[kind](rng, size), 0.0, 1.0)
    return out


def synth_dataset(seed: int, count: int, size: int, out_dir=None) -> Dataset:
    images = synth_images(seed, count, size)
    paths, sums = [], []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            name = f"image_{i:05d}.cmt"
            raw = tensor_bytes(images[i])
            atomic_write(out_dir / name, raw)
            paths.append(name)
            sums.append(hashlib.sha256(raw).hexdigest())
        manifest = {"size": size, "count": count, "seed": seed,
                    "files": [{"path": p, "sha256": s} for p, s in zip(paths, sums)]}
        atomic_write(out_dir / MANIFEST, (json.dumps(manifest, indent=2) + "\n").encode())
    return Dataset(images, paths, sums)


def load_dataset(directory, limit: Optional[int] = None) -> Dataset:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
    except FileNotFoundError:
        raise FormatError(f"no {MANIFEST} in {directory}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad manifest: {exc}") from None
    files = manifest["files"][:limit]
    images, paths, sums = [], [], []
    shape = None
    for entry in files:
        raw = (directory / entry["path"]).read_bytes()
        digest = hashlib.sha256(raw).hexdigest()
        if digest != entry["sha256"]:
            raise FormatError(f"checksum mismatch for {entry['path']}")
        img = load_tensor(directory / entry["path"])
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise FormatError(f"{entry['path']} has shape {img.shape}, expected {shape}")
        images.append(img.astype(np.float32))
        paths.append(entry["path"])
        sums.append(digest)
    if not images:
        raise FormatError(f"dataset {directory} is empty")
    return Dataset(np.stack(images), paths, sums)
