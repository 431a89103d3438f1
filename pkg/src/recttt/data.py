"""Procedural shape dataset and a graded corruption suite.

Four classes (disk, square, triangle, ring) are rendered on 32x32 RGB canvases
with random position, size, rotation and colours.  Every class is closed
under horizontal flip, so labels survive the flip augmentation.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

from .tensor import DTYPE, Rng

CLASSES = ("disk", "square", "triangle", "ring")
IMAGE_SIZE = 32
SUPERSAMPLE = 2

# colour ranges per channel; foreground is always the brighter of the two
BG_RANGE = (0.10, 0.45)
FG_RANGE = (0.55, 0.90)
RADIUS_RANGE = (7.0, 11.0)

CORRUPTIONS = ("gaussian_noise", "impulse_noise", "gaussian_blur", "brightness", "contrast", "pixelate")
SEVERITY = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.18, 0.26),
    "impulse_noise": (0.01, 0.03, 0.06, 0.10, 0.17),
    "gaussian_blur": (0.4, 0.6, 0.8, 1.1, 1.5),
    "brightness": (0.05, 0.10, 0.15, 0.22, 0.30),
    "contrast": (0.75, 0.6, 0.45, 0.3, 0.2),
    "pixelate": (2, 3, 4, 6, 8),
}


@dataclass(frozen=True)
class ShapeSample:
    id: str
    image: np.ndarray
    label: int


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "train"

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> ShapeSample:
        return ShapeSample(self.ids[i], self.images[i], int(self.labels[i]))

    @property
    def ids(self) -> list[str]:
        return [f"{self.split}-{i}" for i in range(len(self))]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.split)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int = 5

    def __post_init__(self):
        if self.kind not in SEVERITY:
            raise ValueError(f"unknown corruption {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")

    @property
    def level(self) -> float:
        return SEVERITY[self.kind][self.severity - 1]


def _render_chunk(labels, cx, cy, radius, theta, size):
    s = size * SUPERSAMPLE
    coords = (np.arange(s) + 0.5) / SUPERSAMPLE
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx = xx[None] - cx[:, None, None]
    dy = yy[None] - cy[:, None, None]
    r = radius[:, None, None]
    c, sn = np.cos(theta)[:, None, None], np.sin(theta)[:, None, None]
    u = c * dx + sn * dy
    v = -sn * dx + c * dy
    dist = np.hypot(dx, dy)

    masks = np.zeros(dx.shape, dtype=bool)
    lab = labels[:, None, None]
    masks |= (lab == 0) & (dist <= r)
    side = 0.8 * r
    masks |= (lab == 1) & (np.maximum(np.abs(u), np.abs(v)) <= side)
    inside = np.ones(dx.shape, dtype=bool)
    for k in range(3):
        ang = np.pi / 2 + 2 * np.pi * k / 3
        inside &= (u * np.cos(ang) + v * np.sin(ang)) <= r / 2
    masks |= (lab == 2) & inside
    masks |= (lab == 3) & (dist <= r) & (dist >= 0.55 * r)

    m = masks.reshape(len(labels), size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(2, 4))
    return m


def gen_dataset(rng: Rng, n: int, split: str = "train", size: int = IMAGE_SIZE) -> Dataset:
    """Render ``n`` class-balanced samples; identical seeds give identical pixels."""
    if n < 1:
        raise ValueError("n must be >= 1")
    r = rng.spawn("gen_dataset", split)
    labels = np.arange(n) % len(CLASSES)
    labels = labels[r.permutation(n)]
    radius = r.uniform64(n, *RADIUS_RANGE) * size / IMAGE_SIZE
    margin = radius + 1.0
    cx = margin + r.uniform64(n) * (size - 2 * margin)
    cy = margin + r.uniform64(n) * (size - 2 * margin)
    theta = r.uniform64(n, 0.0, 2 * np.pi)
    bg = r.uniform64((n, 3), *BG_RANGE)
    fg = r.uniform64((n, 3), *FG_RANGE)

    images = np.empty((n, 3, size, size), dtype=DTYPE)
    chunk = 256
    for lo in range(0, n, chunk):
        sl = slice(lo, lo + chunk)
        m = _render_chunk(labels[sl], cx[sl], cy[sl], radius[sl], theta[sl], size)[:, None]
        img = bg[sl, :, None, None] * (1 - m) + fg[sl, :, None, None] * m
        images[sl] = img
    return Dataset(images, labels.astype(np.int64), split)


def hflip(x: np.ndarray) -> np.ndarray:
    """Reverse the width (last) axis."""
    return np.ascontiguousarray(x[..., ::-1])


def _pixelate(x: np.ndarray, block: int) -> np.ndarray:
    h, w = x.shape[-2:]
    rows = np.arange(0, h, block)
    cols = np.arange(0, w, block)
    sums = np.add.reduceat(np.add.reduceat(x.astype(np.float64), rows, axis=-2), cols, axis=-1)
    rcount = np.diff(np.append(rows, h))
    ccount = np.diff(np.append(cols, w))
    means = sums / (rcount[:, None] * ccount[None, :])
    ri = np.arange(h) // block
    ci = np.arange(w) // block
    return means[..., ri, :][..., ci]


def corrupt(x: np.ndarray, spec: CorruptionSpec, rng: Rng, level: float | None = None) -> np.ndarray:
    """Apply one corruption to an image or batch in [0, 1]; output is clamped to [0, 1].

    ``level`` overrides the severity table (used by tests).
    """
    lvl = spec.level if level is None else level
    x = np.asarray(x, dtype=DTYPE)
    kind = spec.kind
    if kind == "gaussian_noise":
        out = x + rng.normal(x.shape, 0.0, float(lvl))
    elif kind == "impulse_noise":
        u = rng.uniform64(x.shape)
        salt = rng.uniform64(x.shape) < 0.5
        out = np.where(u < lvl, np.where(salt, 1.0, 0.0), x)
    elif kind == "gaussian_blur":
        sigma = [0.0] * (x.ndim - 2) + [lvl, lvl]
        out = ndimage.gaussian_filter(x.astype(np.float64), sigma=sigma, mode="reflect")
    elif kind == "brightness":
        out = x + lvl
    elif kind == "contrast":
        out = (x - 0.5) * lvl + 0.5
    elif kind == "pixelate":
        out = _pixelate(x, int(lvl))
    else:  # pragma: no cover - CorruptionSpec validates
        raise ValueError(f"unknown corruption {kind!r}")
    return np.clip(out, 0.0, 1.0).astype(DTYPE)


def batch_iter(ds: Dataset, batch_size: int, rng: Rng | None = None,
               shuffle: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    order = rng.permutation(n) if shuffle else np.arange(n)
    for lo in range(0, n, batch_size):
        idx = order[lo:lo + batch_size]
        yield ds.images[idx], ds.labels[idx]


def export_dataset(ds: Dataset, root: str | Path) -> Path:
    """Write one raw little-endian float32 file per image plus ``index.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    index = []
    for i, sample_id in enumerate(ds.ids):
        (root / f"{sample_id}.f32").write_bytes(ds.images[i].astype("<f4").tobytes())
        index.append({"id": sample_id, "label": int(ds.labels[i]), "split": ds.split})
    meta = {"shape": list(ds.images.shape[1:]), "samples": index}
    (root / "index.json").write_text(json.dumps(meta, indent=1))
    return root


def import_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    meta = json.loads((root / "index.json").read_text())
    shape = tuple(meta["shape"])
    samples = meta["samples"]
    images = np.empty((len(samples), *shape), dtype=DTYPE)
    for i, s in enumerate(samples):
        raw = np.frombuffer((root / f"{s['id']}.f32").read_bytes(), dtype="<f4")
        if raw.size != np.prod(shape):
            raise ValueError(f"{s['id']}: expected {np.prod(shape)} values, found {raw.size}")
        images[i] = raw.reshape(shape)
    labels = np.array([s["label"] for s in samples], dtype=np.int64)
    split = samples[0]["split"] if samples else "train"
    return Dataset(images, labels, split)
