"""Countermeasures: three input preprocessors and adversarial training for TTT models.

The preprocessors (bit-depth reduction, random resize-and-pad, JPEG
round-trip) are meant to be applied to every test input alike, benign or not.
"""

from __future__ import annotations

import dataclasses
import io
import math
from dataclasses import asdict, dataclass

import numpy as np
from PIL import Image

from .attack import AttackConfig, poigen
from .data import LabeledDataset, random_flip_crop
from .errors import CodecError, ConfigError, UnsupportedOperationError
from .models import YModel
from .nn import ops
from .nn.layers import NormMode
from .nn.optim import SGD
from .nn.tensor import backward
from .training import TrainConfig, _batches, rotate_each

KINDS = ("bdr", "rrp", "jc", "at")


def bdr(x: np.ndarray, bits: int) -> np.ndarray:
    """Quantize to ``2**bits`` levels, rounding halves up."""
    if not 1 <= int(bits) <= 8 or int(bits) != bits:
        raise ConfigError(f"bits must be an integer in [1, 8], got {bits}")
    levels = 2 ** int(bits) - 1
    x = np.asarray(x)
    return (np.floor(x.astype(np.float64) * levels + 0.5) / levels).astype(x.dtype)


def rrp_max_side(w: int) -> int:
    return int(math.ceil(1.25 * w))


def rrp_canvas(w: int, w_max: int | None = None) -> int:
    """Fixed output side: room for the largest resize plus the largest offset."""
    w_max = rrp_max_side(w) if w_max is None else w_max
    return 2 * w_max - w


def rrp(x: np.ndarray, rng: np.random.Generator, w_max: int | None = None, return_params: bool = False):
    """Random nearest-neighbour resize to ``W'`` in ``[W, w_max]``, then random zero padding.

    Each image is placed at offsets ``(h, w)`` drawn from ``[0, W' - W]`` on a
    canvas of side ``2 * w_max - W``. The classifiers pool globally, so the
    larger canvas needs no architectural change.
    """
    x = np.asarray(x)
    single = x.ndim == 3
    b = x[None] if single else x
    n, c, hgt, wid = b.shape
    if hgt != wid:
        raise UnsupportedOperationError("random resize-and-pad expects square images")
    w_max = rrp_max_side(wid) if w_max is None else int(w_max)
    if w_max < wid:
        raise ConfigError("w_max must be at least the input side")
    canvas = 2 * w_max - wid
    out = np.zeros((n, c, canvas, canvas), dtype=b.dtype)
    params = []
    for k in range(n):
        side = int(rng.integers(wid, w_max + 1))
        oy, ox = (int(v) for v in rng.integers(0, side - wid + 1, size=2))
        src = (np.arange(side) * wid) // side
        out[k, :, oy : oy + side, ox : ox + side] = b[k][:, src[:, None], src[None, :]]
        params.append((side, oy, ox))
    out = out[0] if single else out
    return (out, params) if return_params else out


def jc(x: np.ndarray, quality: int) -> np.ndarray:
    """JPEG encode/decode round trip (no chroma subsampling) at ``quality``."""
    if not 1 <= int(quality) <= 100:
        raise ConfigError(f"quality must lie in [1, 100], got {quality}")
    x = np.asarray(x)
    single = x.ndim == 3
    b = x[None] if single else x
    out = np.empty_like(b)
    for k, img in enumerate(b):
        pix = np.clip(np.rint(img.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
        mode = "RGB" if pix.shape[2] == 3 else "L"
        try:
            buf = io.BytesIO()
            Image.fromarray(pix if mode == "RGB" else pix[..., 0], mode).save(
                buf, format="JPEG", quality=int(quality), subsampling=0
            )
            dec = np.asarray(Image.open(io.BytesIO(buf.getvalue())).convert(mode), dtype=np.float64)
        except (OSError, ValueError) as exc:
            raise CodecError(f"JPEG round trip failed: {exc}") from exc
        if dec.ndim == 2:
            dec = dec[..., None]
        out[k] = (dec / 255.0).transpose(2, 0, 1)
    return out[0] if single else out


@dataclass
class DefenseSpec:
    kind: str = "bdr"
    bits: int = 4
    quality: int = 50
    w_max: int | None = None
    eps_at: float = 32 / 255
    i_iter: int = 2
    i_adv: int = 5
    seed: int = 0

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in KINDS:
            raise ConfigError(f"unknown defense {self.kind!r}")
        if self.kind == "bdr" and not 1 <= self.bits <= 8:
            raise ConfigError("bits must lie in [1, 8]")
        if self.kind == "jc" and not 1 <= self.quality <= 100:
            raise ConfigError("quality must lie in [1, 100]")
        if self.eps_at < 0:
            raise ConfigError("eps_at must be non-negative")

    @property
    def is_preprocessor(self) -> bool:
        return self.kind != "at"

    def label(self) -> str:
        return {"bdr": f"bdr-{self.bits}", "jc": f"jc-{self.quality}", "rrp": "rrp", "at": "at"}[self.kind]

    def to_dict(self) -> dict:
        return asdict(self)


class Preprocessor:
    """Applies one input defense and counts every image it touches."""

    def __init__(self, spec: DefenseSpec):
        if not spec.is_preprocessor:
            raise ConfigError(f"{spec.kind} is not an input preprocessor")
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        self.count = 0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        self.count += 1 if x.ndim == 3 else len(x)
        if self.spec.kind == "bdr":
            return bdr(x, self.spec.bits)
        if self.spec.kind == "jc":
            return jc(x, self.spec.quality)
        return rrp(x, self.rng, self.spec.w_max)


# ---------------------------------------------------------------- adversarial training

def at_loss(m: YModel, x: np.ndarray, y: np.ndarray, rng: np.random.Generator, spec: DefenseSpec, step_seed: int):
    """Clean main + clean rotation + adversarial main + adversarial rotation losses.

    The adversarial images come from the rotation attack run against the
    model being trained. Both rotation terms share one draw of rotation labels,
    so with a zero budget the loss is exactly twice the joint-training loss.
    Returns ``(total, parts)``.
    """
    k = rng.integers(0, 4, size=len(x))
    atk = AttackConfig.for_method("ttt", epsilon=spec.eps_at, i_iter=spec.i_iter, i_adv=spec.i_adv, seed=step_seed)
    if spec.eps_at > 0:
        atk = dataclasses.replace(atk, alpha_schedule=[(s, min(a, spec.eps_at)) for s, a in atk.alpha_schedule])
    modes = [bn.mode for bn in m.norm_layers]
    x_adv = poigen("ttt", x, m, atk)
    for bn, mode in zip(m.norm_layers, modes):
        bn.mode = mode
    n = len(x)
    h = m.extract(np.concatenate([x, rotate_each(x, k), x_adv, rotate_each(x_adv, k)]))
    l1 = ops.cross_entropy(m.main_from_features(ops.rows(h, 0, n)), y)
    l2 = ops.cross_entropy(m.ssl_from_features(ops.rows(h, n, 2 * n)), k)
    l3 = ops.cross_entropy(m.main_from_features(ops.rows(h, 2 * n, 3 * n)), y)
    l4 = ops.cross_entropy(m.ssl_from_features(ops.rows(h, 3 * n, 4 * n)), k)
    return l1 + l2 + l3 + l4, (l1, l2, l3, l4)


def adversarial_train(
    m: YModel, d: LabeledDataset, cfg: TrainConfig, spec: DefenseSpec | None = None, history: list | None = None
) -> YModel:
    """Adversarial training of a Y-structured model against the rotation attack."""
    spec = spec or DefenseSpec("at")
    if not isinstance(m, YModel):
        raise UnsupportedOperationError("adversarial training targets Y-structured models")
    if spec.eps_at <= 0:
        raise ConfigError("adversarial training needs eps_at > 0")
    if len(d) == 0:
        raise ConfigError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    params = m.parameters()
    opt = SGD(params, cfg.lr, cfg.momentum)
    m.set_norm_mode(NormMode.TRAIN)
    steps_per_epoch = max(1, math.ceil((len(d) - 1) / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    step = 0
    for _ in range(cfg.epochs):
        epoch_loss, seen = 0.0, 0
        for idx in _batches(len(d), cfg.batch_size, rng):
            x = d.images[idx]
            if cfg.augment:
                x = random_flip_crop(x, rng)
            loss, _ = at_loss(m, x, d.labels[idx], rng, spec, cfg.seed * 1_000_003 + step)
            grads = backward(loss, accumulate=False)
            if cfg.weight_decay:
                for p in params:
                    grads[p] = grads[p] + cfg.weight_decay * p.data
            opt.lr = cfg.lr_at(step, total)
            opt.step(grads)
            step += 1
            epoch_loss += loss.item() * len(idx)
            seen += len(idx)
        if history is not None:
            history.append(epoch_loss / max(seen, 1))
    m.set_norm_mode(NormMode.EVAL)
    return m
