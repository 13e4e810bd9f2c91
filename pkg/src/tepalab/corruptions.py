"""Parametric distribution shifts with five severity levels.

These are monotone stand-ins for the common-corruption benchmark families,
not pixel-exact replicas. Severity 5 is the strongest level for every kind.

=========  ==========================================================
kind       effect at severity s (index s-1 into each table)
=========  ==========================================================
ori        identity
contrast   ``(x - mean) * CONTRAST[s] + mean``, per image and channel
fog        ``(1 - FOG[s]) * x + FOG[s] * haze``, smooth bright haze field
glass      ``GLASS_ITERS[s]`` sweeps of random pixel swaps within
           radius ``GLASS_RADIUS[s]`` (a pure permutation)
gauss      ``x + NOISE[s] * N(0, 1)``
=========  ==========================================================
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import zoom

from .errors import ConfigError

CONTRAST = (0.75, 0.6, 0.45, 0.3, 0.15)
FOG = (0.15, 0.25, 0.35, 0.45, 0.6)
GLASS_RADIUS = (1, 2, 3, 4, 5)
GLASS_ITERS = (1, 1, 2, 2, 3)
NOISE = (0.04, 0.06, 0.08, 0.09, 0.10)

KINDS = ("ori", "contrast", "fog", "glass", "gauss-noise")
_ALIASES = {"con": "contrast", "gls": "glass", "gauss": "gauss-noise", "noise": "gauss-noise"}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str = "ori"
    severity: int = 5
    seed: int = 0

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        if kind not in KINDS:
            raise ConfigError(f"unknown corruption kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if kind != "ori" and not 1 <= int(self.severity) <= 5:
            raise ConfigError(f"severity must lie in 1..5, got {self.severity}")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "CorruptionSpec":
        """``"fog-5"``, ``"gauss-noise-3"``, ``"ori"``."""
        text = text.strip().lower()
        if text == "ori":
            return cls("ori", 5, seed)
        kind, _, sev = text.rpartition("-")
        if not kind or not sev.isdigit():
            raise ConfigError(f"cannot parse corruption {text!r}; expected <kind>-<severity>")
        return cls(kind, int(sev), seed)

    def label(self) -> str:
        return "ori" if self.kind == "ori" else f"{self.kind}-{self.severity}"


def apply_corruption(x: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Corrupt one image (C, H, W) or a batch (N, C, H, W) with values in [0, 1]."""
    single = x.ndim == 3
    batch = np.asarray(x)[None] if single else np.asarray(x)
    dtype = batch.dtype if np.issubdtype(batch.dtype, np.floating) else np.float32
    batch = batch.astype(np.float64)
    rng = np.random.default_rng(spec.seed)
    s = spec.severity - 1
    if spec.kind == "ori":
        out = batch.copy()
    elif spec.kind == "contrast":
        mean = batch.mean(axis=(2, 3), keepdims=True)
        out = (batch - mean) * CONTRAST[s] + mean
    elif spec.kind == "fog":
        out = (1 - FOG[s]) * batch + FOG[s] * _haze(batch.shape, rng)
    elif spec.kind == "glass":
        out = _glass(batch, GLASS_RADIUS[s], GLASS_ITERS[s], rng)
    else:
        out = batch + NOISE[s] * rng.standard_normal(batch.shape)
    out = np.clip(out, 0.0, 1.0).astype(dtype)
    return out[0] if single else out


def _haze(shape, rng) -> np.ndarray:
    """Smooth, bright, grey field; one per image, shared across channels."""
    n, _, h, w = shape
    coarse = rng.uniform(0.55, 1.0, size=(n, 4, 4))
    field = np.stack([zoom(c, (h / 4, w / 4), order=3, mode="nearest") for c in coarse])
    return np.clip(field, 0.0, 1.0)[:, None, :h, :w]


def _glass(batch: np.ndarray, radius: int, iters: int, rng) -> np.ndarray:
    """Sequential local swaps; every image gets its own random partner offsets."""
    out = batch.copy()
    n, _, h, w = out.shape
    rows = np.arange(n)
    for _ in range(iters):
        for i in range(h - 1, radius - 1, -1):
            for j in range(w - 1, radius - 1, -1):
                di, dj = rng.integers(-radius, radius + 1, size=(2, n))
                ii = np.clip(i + di, 0, h - 1)
                jj = np.clip(j + dj, 0, w - 1)
                a = out[rows, :, i, j].copy()
                out[rows, :, i, j] = out[rows, :, ii, jj]
                out[rows, :, ii, jj] = a
    return out
