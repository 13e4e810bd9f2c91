"""Offline training of target and surrogate models."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .data import LabeledDataset, random_flip_crop
from .errors import ConfigError, UnsupportedOperationError
from .models import PlainModel, YModel, forward_ssl, predict
from .nn import ops
from .nn.layers import NormMode
from .nn.optim import SGD
from .nn.tensor import Tensor, backward


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"  # "cosine" | "constant"
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("need epochs >= 1 and batch_size >= 2")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def lr_at(self, step: int, total: int) -> float:
        if self.schedule == "constant":
            return self.lr
        return 0.5 * self.lr * (1 + math.cos(math.pi * step / total))


def rotation_batch(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All four 90-degree rotations of one image (C, H, W) or of a batch.

    Rotation ``k`` turns the image ``k`` quarter turns counter-clockwise and is
    labelled ``k``. For a batch the output is ordered rotation-major:
    ``[all k=0, all k=1, all k=2, all k=3]``.
    """
    x = np.asarray(x)
    if x.shape[-1] != x.shape[-2]:
        raise UnsupportedOperationError(f"rotations need square images, got {x.shape[-2:]}")
    single = x.ndim == 3
    b = x[None] if single else x
    rots = np.concatenate([np.rot90(b, k, axes=(-2, -1)) for k in range(4)])
    labels = np.repeat(np.arange(4), len(b))
    return np.ascontiguousarray(rots), labels


def rotate_each(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Rotate image ``i`` of a batch by ``k[i]`` quarter turns."""
    out = np.empty_like(x)
    for r in range(4):
        sel = k == r
        if sel.any():
            out[sel] = np.rot90(x[sel], r, axes=(-2, -1))
    return out


def _batches(n: int, bs: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n - 1, bs):
        idx = order[i : i + bs]
        if len(idx) >= 2:
            yield idx


def _run(m, d: LabeledDataset, cfg: TrainConfig, loss_fn, history: list | None):
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
            loss = loss_fn(m, x, d.labels[idx], rng)
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


def _plain_loss(m, x, y, rng) -> Tensor:
    return ops.cross_entropy(m(x), y)


def joint_loss(m: YModel, x: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> tuple[Tensor, Tensor, Tensor]:
    """Main CE on ``x`` plus rotation CE on one random rotation of each image.

    Returns ``(total, main, ssl)``.
    """
    k = rng.integers(0, 4, size=len(x))
    h = m.extract(np.concatenate([x, rotate_each(x, k)]))
    n = len(x)
    main = ops.cross_entropy(m.main_from_features(ops.rows(h, 0, n)), y)
    ssl = ops.cross_entropy(m.ssl_from_features(ops.rows(h, n, 2 * n)), k)
    return main + ssl, main, ssl


def train_plain(m: PlainModel, d: LabeledDataset, cfg: TrainConfig, history: list | None = None) -> PlainModel:
    """Cross-entropy training; batch-norm stored statistics follow an EMA (momentum 0.1)."""
    return _run(m, d, cfg, _plain_loss, history)


def train_joint(m: YModel, d: LabeledDataset, cfg: TrainConfig, history: list | None = None) -> YModel:
    """Unweighted sum of main-task CE and rotation-prediction CE per minibatch."""
    if not isinstance(m, YModel):
        raise UnsupportedOperationError("joint training needs a Y-structured model")
    return _run(m, d, cfg, lambda m, x, y, rng: joint_loss(m, x, y, rng)[0], history)


def accuracy(m, d: LabeledDataset) -> float:
    if len(d) == 0:
        raise ConfigError("empty evaluation set")
    return float((predict(m, d.images) == d.labels).mean())


def rotation_accuracy(m: YModel, d: LabeledDataset, batch_size: int = 250) -> float:
    """Top-1 accuracy of the rotation head over all four rotations of ``d``."""
    flags = [(p, p.requires_grad) for p in m.parameters()]
    for p, _ in flags:
        p.requires_grad = False
    try:
        hits = 0
        for i in range(0, len(d), batch_size):
            xr, yr = rotation_batch(d.images[i : i + batch_size])
            hits += int((forward_ssl(m, xr).data.argmax(1) == yr).sum())
    finally:
        for p, f in flags:
            p.requires_grad = f
    return hits / (4 * len(d))
