"""Datasets: a synthetic generator, CIFAR-10 binary I/O and a raw tensor container.

Images are stored channel-planar, shape (N, C, H, W), float32 in [0, 1].
"""

from __future__ import annotations

import colorsys
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, VersionError

SPLITS = ("target-train", "surrogate", "eval", "warmup", "poison-seed", "other")


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W)
    labels: np.ndarray  # (N,)
    split: str = "other"
    num_classes: int = 10
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ConfigError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConfigError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError("labels outside [0, num_classes)")
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split tag {self.split!r}")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, split: str | None = None) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.images[idx], self.labels[idx], split or self.split, self.num_classes, dict(self.meta))

    def with_images(self, images: np.ndarray, **meta) -> "LabeledDataset":
        return LabeledDataset(images, self.labels, self.split, self.num_classes, {**self.meta, **meta})


# ---------------------------------------------------------------- synthetic data

SHAPES = ("triangle", "house", "tee", "mushroom", "cup")


def _shape_mask(kind: str, yy, xx, cy, cx, r):
    """Upright silhouettes; none is invariant under a quarter turn."""
    dy, dx = yy - cy, xx - cx
    ady, adx = np.abs(dy), np.abs(dx)
    if kind == "triangle":  # apex up
        return (dy <= r) & (adx <= (dy + r) * 0.5)
    if kind == "house":  # square body under a roof
        body = (dy >= 0) & (dy <= r) & (adx <= 0.7 * r)
        roof = (dy < 0) & (dy >= -r) & (adx <= (dy + r) * 0.9)
        return body | roof
    if kind == "tee":
        bar = (dy >= -r) & (dy <= -0.45 * r) & (adx <= r)
        stem = (dy > -r) & (dy <= r) & (adx <= 0.3 * r)
        return bar | stem
    if kind == "mushroom":  # half-disk cap on a stem
        cap = (dy <= 0) & (dy**2 + dx**2 <= r**2)
        stem = (dy > 0) & (dy <= r) & (adx <= 0.3 * r)
        return cap | stem
    if kind == "cup":  # open at the top
        outer = (ady <= r) & (adx <= 0.85 * r)
        inner = (dy < 0.45 * r) & (adx < 0.45 * r)
        return outer & ~inner
    raise ConfigError(kind)


def _smooth_field(rng, size: int, cells: int = 4) -> np.ndarray:
    coarse = rng.standard_normal((cells + 1, cells + 1))
    pos = np.linspace(0, cells, size)
    i = np.minimum(pos.astype(int), cells - 1)
    f = pos - i
    rows = coarse[i] * (1 - f)[:, None] + coarse[i + 1] * f[:, None]
    return rows[:, i] * (1 - f)[None, :] + rows[:, i + 1] * f[None, :]


def make_blob_texture(
    n: int,
    seed: int,
    num_classes: int = 10,
    size: int = 32,
    separation: float = 1.0,
    shift: float = 0.0,
    noise: float = 0.02,
    split: str = "other",
) -> LabeledDataset:
    """Upright textured objects on a softly lit, mottled background.

    The class fixes the object's silhouette (``label % 5``) and hue family
    (``label // 5``). ``separation`` scales the hue gap between families and
    shrinks the within-class jitter; ``shift`` rotates every hue and changes
    the background statistics, giving a related but distinct image domain.
    Orientation is recoverable from the silhouettes, a drop shadow below the
    object and a faint top-lit illumination gradient.
    """
    if n < 0 or num_classes < 1:
        raise ConfigError("need n >= 0 and num_classes >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    families = max(1, -(-num_classes // len(SHAPES)))
    images = np.empty((n, 3, size, size), dtype=np.float32)
    jitter = 0.04 / max(separation, 1e-3)
    for k in range(n):
        lab = labels[k]
        shape = SHAPES[lab % len(SHAPES)]
        fam = lab // len(SHAPES)
        # background: muted colour, mottling, light from above
        bg_hue = rng.uniform(0, 1)
        bg = np.array(colorsys.hsv_to_rgb(bg_hue, rng.uniform(0.05, 0.3 + 0.2 * shift), rng.uniform(0.35, 0.65)))
        mottling = (0.06 + 0.04 * shift) * _smooth_field(rng, size, cells=int(rng.integers(3, 7)))
        light = rng.uniform(0.03, 0.08) * (1 - 2 * yy / (size - 1))
        img = bg[:, None, None] + (mottling + light)[None]
        # object
        hue = (fam / families) * separation * 0.5 + 0.05 + shift * 0.1 + rng.normal(0, jitter)
        obj = np.array(colorsys.hsv_to_rgb(hue % 1.0, rng.uniform(0.5, 0.9), rng.uniform(0.45, 0.95)))
        r = rng.uniform(0.2, 0.3) * size
        cy = rng.uniform(0.4, 0.55) * size
        cx = rng.uniform(0.35, 0.65) * size
        shadow = _shape_mask(shape, yy, xx, cy + 0.15 * r, cx + 0.05 * r, r)
        img = np.where(shadow[None], img * 0.7, img)
        mask = _shape_mask(shape, yy, xx, cy, cx, r)
        period = rng.uniform(2.5, 4.5)
        stripes = 1.0 + 0.15 * np.sin(2 * np.pi * yy / period + rng.uniform(0, 2 * np.pi))
        img = np.where(mask[None], obj[:, None, None] * stripes[None], img)
        img += rng.normal(0, noise, img.shape)
        images[k] = np.clip(img, 0, 1)
    return LabeledDataset(images, labels, split, num_classes, {"generator": "blob-texture", "seed": seed, "shift": shift})


# ---------------------------------------------------------------- augmentation

def random_flip_crop(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip and random crop from a zero-padded canvas."""
    n, c, h, w = x.shape
    flip = rng.random(n) < 0.5
    out = np.where(flip[:, None, None, None], x[..., ::-1], x)
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = rng.integers(0, 2 * pad + 1, size=n)
    ox = rng.integers(0, 2 * pad + 1, size=n)
    rows = (oy[:, None] + np.arange(h)[None])[:, :, None]
    cols = (ox[:, None] + np.arange(w)[None])[:, None, :]
    return padded[np.arange(n)[:, None, None], :, rows, cols].transpose(0, 3, 1, 2).astype(x.dtype)


# ---------------------------------------------------------------- CIFAR-10 binary format

CIFAR_RECORD = 1 + 3 * 32 * 32


def read_cifar10_binary(path, split: str = "other") -> LabeledDataset:
    """1 label byte + 3072 channel-planar pixel bytes per record."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise ConfigError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
    rec = raw.reshape(-1, CIFAR_RECORD)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return LabeledDataset(images, rec[:, 0].astype(np.int64), split, 10)


def write_cifar10_binary(path, d: LabeledDataset) -> None:
    if d.images.shape[1:] != (3, 32, 32):
        raise ConfigError("CIFAR-10 records hold 3x32x32 images")
    pix = np.clip(np.rint(d.images * 255.0), 0, 255).astype(np.uint8).reshape(len(d), -1)
    rec = np.concatenate([d.labels.astype(np.uint8)[:, None], pix], axis=1)
    rec.tofile(path)


# ---------------------------------------------------------------- raw tensor container

TENSOR_MAGIC = b"TPTN"
TENSOR_VERSION = 1


def save_tensor_file(path, d: LabeledDataset, sidecar: dict | None = None) -> None:
    """Header (magic, version, ndim, extents), f32 LE pixels, label block.

    ``sidecar`` (if given) is written next to the file as ``<path>.json``.
    """
    img = np.ascontiguousarray(d.images, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sBB", TENSOR_MAGIC, TENSOR_VERSION, img.ndim))
        fh.write(struct.pack(f"<{img.ndim}I", *img.shape))
        fh.write(img.tobytes())
        fh.write(struct.pack("<IH", len(d.labels), d.num_classes))
        fh.write(np.ascontiguousarray(d.labels, dtype="<i8").tobytes())
        meta = json.dumps({"split": d.split, **d.meta}, sort_keys=True, default=str).encode()
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
    if sidecar is not None:
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_tensor_file(path) -> LabeledDataset:
    blob = Path(path).read_bytes()
    magic, version, ndim = struct.unpack_from("<4sBB", blob, 0)
    if magic != TENSOR_MAGIC or version != TENSOR_VERSION:
        raise VersionError(f"{path}: not a tensor container of version {TENSOR_VERSION}")
    off = 6
    shape = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    count = int(np.prod(shape))
    images = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
    off += 4 * count
    nlab, ncls = struct.unpack_from("<IH", blob, off)
    off += 6
    labels = np.frombuffer(blob, dtype="<i8", count=nlab, offset=off)
    off += 8 * nlab
    (mlen,) = struct.unpack_from("<I", blob, off)
    meta = json.loads(blob[off + 4 : off + 4 + mlen].decode())
    split = meta.pop("split", "other")
    return LabeledDataset(images.copy(), labels.copy(), split, ncls, meta)


def load_dataset(path) -> LabeledDataset:
    """Dispatch on content: tensor container or CIFAR-10 binary records."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == TENSOR_MAGIC:
        return load_tensor_file(path)
    return read_cifar10_binary(path)
