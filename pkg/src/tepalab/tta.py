"""Online test-time adaptation engines: TTT, DUA, TENT and RPL.

Every engine consumes one stream event at a time through :meth:`TtaEngine.step`
and returns predictions for it. TTT and DUA consume single images; TENT and
RPL consume batches.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import rotate as nd_rotate

from .data import random_flip_crop
from .errors import ConfigError, ContractError, UnsupportedOperationError
from .models import Checkpoint, PlainModel, YModel, predict, restore, snapshot
from .nn import ops
from .nn.layers import BatchNorm2d, NormMode
from .nn.optim import SGD
from .nn.tensor import backward
from .training import rotation_batch

METHODS = ("ttt", "dua", "tent", "rpl")
SINGLE_METHODS = ("ttt", "dua")


@dataclass
class TtaConfig:
    method: str = "tent"
    lr: float | None = None  # None -> method default (TTT 0.001, TENT/RPL 0.1)
    momentum: float | None = None
    q: float = 0.8  # RPL
    omega: float = 0.94  # DUA decay
    xi: float = 0.005  # DUA momentum floor
    rho0: float = 0.1
    dua_batch: int = 64
    dua_max_angle: float = 15.0
    batch_size: int = 32  # TENT/RPL events and evaluation batches
    seed: int = 0

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in METHODS:
            raise ConfigError(f"unknown TTA method {self.method!r}")
        if self.lr is None:
            self.lr = {"ttt": 0.001, "tent": 0.1, "rpl": 0.1}.get(self.method, 0.0)
        if self.momentum is None:
            self.momentum = 0.0 if self.method == "ttt" else 0.9
        if not 0 < self.q <= 1:
            raise ConfigError("q must lie in (0, 1]")
        if not 0 < self.omega < 1 or not 0 < self.xi < self.rho0 < 1:
            raise ConfigError("need 0 < omega < 1 and 0 < xi < rho0 < 1")
        if self.dua_batch < 2 or self.batch_size < 2:
            raise ConfigError("batch sizes must be at least 2")

    @property
    def granularity(self) -> str:
        return "single" if self.method in SINGLE_METHODS else "batch"

    def to_dict(self) -> dict:
        return asdict(self)


def _hash_arrays(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


class TtaEngine:
    """Owns one model and adapts it event by event."""

    def __init__(self, model: PlainModel | YModel, cfg: TtaConfig):
        self.cfg = cfg
        self.model = model
        self.method = cfg.method
        self.t = 0
        self.rng = np.random.default_rng(cfg.seed)
        self.last_loss: float | None = None
        if self.method == "ttt":
            if not isinstance(model, YModel):
                raise UnsupportedOperationError("TTT needs a Y-structured model")
            parts = model.partitions()
            self.trainable = parts["extractor"] + parts["ssl"]
            self.frozen = parts["main"]
        else:
            if not isinstance(model, PlainModel) or not model.norm_layers:
                raise UnsupportedOperationError(f"{self.method.upper()} needs a batch-norm model")
            bns = model.norm_layers
            if self.method == "dua":
                self.trainable = []
            else:
                self.trainable = [p for bn in bns for p in (bn.gamma, bn.beta)]
            ids = {id(p) for p in self.trainable}
            self.frozen = [p for p in model.parameters() if id(p) not in ids]
            if self.method == "dua":
                for bn in bns:
                    bn.rho = cfg.rho0
                    bn.xi = cfg.xi
        for p in self.frozen:
            p.requires_grad = False
        for p in self.trainable:
            p.requires_grad = True
        self.opt = SGD(self.trainable, cfg.lr, cfg.momentum) if self.trainable else None

    # ------------------------------------------------------------ state

    def frozen_hash(self) -> str:
        return _hash_arrays(p.data for p in self.frozen)

    def state(self) -> dict:
        """Everything that adaptation mutates, deep-copied."""
        return {
            "model": self.model.state_dict(),
            "velocity": self.opt.state() if self.opt else [],
            "t": self.t,
            "rng": self.rng.bit_generator.state,
            "last_loss": self.last_loss,
        }

    def load_state(self, s: dict) -> None:
        self.model.load_state_dict(s["model"])
        if self.opt:
            self.opt.load_state(s["velocity"])
        self.t = s["t"]
        self.rng.bit_generator.state = s["rng"]
        self.last_loss = s["last_loss"]

    def checkpoint(self) -> Checkpoint:
        """Model state plus optimizer velocities, step counter and RNG state."""
        s = self.state()
        extra = {f"velocity/{i}": v for i, v in enumerate(s["velocity"]) if v is not None}
        meta = {"tta": self.cfg.to_dict(), "t": s["t"], "rng": s["rng"], "last_loss": s["last_loss"],
                "velocity_slots": len(s["velocity"])}
        return snapshot(self.model, extra, meta)

    def restore_checkpoint(self, c: Checkpoint) -> None:
        if c.meta.get("tta", {}).get("method") != self.method:
            raise ContractError("checkpoint was taken from a different TTA method")
        velocity = [c.arrays.get(f"velocity/{i}") for i in range(c.meta["velocity_slots"])]
        restore(c, into=self.model)
        self.load_state({"model": self.model.state_dict(), "velocity": velocity, "t": c.meta["t"],
                         "rng": c.meta["rng"], "last_loss": c.meta["last_loss"]})

    def state_hash(self) -> str:
        s = self.state()
        parts = [s["model"][k] for k in sorted(s["model"])]
        parts += [v for v in s["velocity"] if v is not None]
        parts.append(np.array([s["t"]]))
        return _hash_arrays(parts)

    # ------------------------------------------------------------ adaptation

    def step(self, x: np.ndarray) -> np.ndarray:
        """Adapt on one event and return its predicted labels.

        Single-image methods take (C, H, W) or a stack treated as consecutive
        events; batch methods take one (N, C, H, W) batch.
        """
        x = np.asarray(x, dtype=self.model.dtype)
        if self.method in SINGLE_METHODS:
            if x.ndim == 3:
                x = x[None]
            fn = self.ttt_step if self.method == "ttt" else self.dua_step
            return np.concatenate([fn(xi) for xi in x])
        fn = self.tent_step if self.method == "tent" else self.rpl_step
        return fn(x)

    def _require(self, method: str) -> None:
        if self.method != method:
            raise ContractError(f"{method.upper()} step called on a {self.method.upper()} engine")

    def ttt_step(self, x: np.ndarray) -> np.ndarray:
        """One SGD step on the rotation loss of ``x``'s four rotations, then predict."""
        self._require("ttt")
        m: YModel = self.model
        xr, yr = rotation_batch(np.asarray(x, dtype=m.dtype))
        loss = ops.cross_entropy(m.ssl_from_features(m.extract(xr)), yr)
        grads = backward(loss, accumulate=False)
        self.opt.step(grads)
        self.last_loss = loss.item()
        self.t += 1
        return predict(m, np.asarray(x)[None], NormMode.EVAL)

    def augment_dua(self, x: np.ndarray) -> np.ndarray:
        """``dua_batch`` copies of ``x`` with random flip, crop and small rotation."""
        batch = np.repeat(np.asarray(x)[None], self.cfg.dua_batch, axis=0)
        batch = random_flip_crop(batch, self.rng)
        angles = self.rng.uniform(-self.cfg.dua_max_angle, self.cfg.dua_max_angle, len(batch))
        for i, a in enumerate(angles):
            batch[i] = nd_rotate(batch[i], a, axes=(1, 2), reshape=False, order=1, mode="nearest")
        return np.clip(batch, 0, 1)

    def dua_step(self, x: np.ndarray) -> np.ndarray:
        """Blend batch statistics of augmented copies into the stored ones."""
        self._require("dua")
        m: PlainModel = self.model
        aug = self.augment_dua(x)
        m.set_norm_mode(NormMode.BATCH)
        m(aug)
        gaps = []
        for bn in m.norm_layers:
            mean, var = bn.last_stats["mean"], bn.last_stats["var"]
            gaps.append(stats_divergence(mean, var, bn.running_mean, bn.running_var, bn.eps))
            dua_update(bn, mean, var, self.cfg.omega)
        self.last_loss = float(np.mean(gaps))
        self.t += 1
        return predict(m, np.asarray(x)[None], NormMode.EVAL)

    def _bn_step(self, x: np.ndarray, loss_fn) -> np.ndarray:
        m: PlainModel = self.model
        if x.ndim != 4:
            raise ContractError(f"{self.method.upper()} consumes (N, C, H, W) batches")
        m.set_norm_mode(NormMode.BATCH)
        logits = m(x)  # DegenerateBatchError for N < 2
        preds = logits.data.argmax(axis=1)
        loss = loss_fn(logits)
        grads = backward(loss, accumulate=False)
        self.opt.step(grads)
        self.last_loss = loss.item()
        self.t += 1
        return preds

    def tent_step(self, x: np.ndarray) -> np.ndarray:
        """Predict with the current affine parameters, then one entropy-minimization step."""
        self._require("tent")
        return self._bn_step(x, ops.entropy)

    def rpl_step(self, x: np.ndarray) -> np.ndarray:
        """As :meth:`tent_step` with the generalized cross-entropy on arg-max labels."""
        self._require("rpl")
        return self._bn_step(x, lambda z: ops.gce(z, self.cfg.q))

    # ------------------------------------------------------------ evaluation

    def evaluate(self, images: np.ndarray, labels: np.ndarray) -> float:
        """Top-1 accuracy without lasting effect on the engine.

        TTT/TENT/RPL adapt on each evaluation sample (batch), predict, and are
        reset to the pre-evaluation state. DUA predicts with frozen statistics.
        """
        if len(labels) == 0:
            raise ConfigError("empty evaluation set")
        if self.method == "dua":
            return float((predict(self.model, images, NormMode.EVAL) == labels).mean())
        saved = self.state()
        hits = 0
        try:
            if self.method == "ttt":
                for xi, yi in zip(images, labels):
                    hits += int(self.ttt_step(xi)[0] == yi)
                    self.load_state(saved)
            else:
                for lo, hi in eval_batches(len(labels), self.cfg.batch_size):
                    hits += int((self.step(images[lo:hi]) == labels[lo:hi]).sum())
                    self.load_state(saved)
        finally:
            self.load_state(saved)
        return hits / len(labels)


def eval_batches(n: int, bs: int) -> list[tuple[int, int]]:
    """Consecutive ``[lo, hi)`` ranges of size ``bs``; a lone trailing sample joins the last range."""
    bounds = [(lo, min(lo + bs, n)) for lo in range(0, n, bs)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] == 1:
        bounds[-2:] = [(bounds[-2][0], n)]
    return bounds


def dua_update(bn: BatchNorm2d, mean: np.ndarray, var: np.ndarray, omega: float) -> float:
    """Decay ``rho`` then blend batch statistics with momentum ``rho + xi``.

    Returns the momentum used.
    """
    bn.rho = bn.rho * omega
    mom = bn.rho + bn.xi
    # written as a step toward the batch value so equal statistics are an exact fixed point
    mu, v = bn.running_mean.astype(np.float64), bn.running_var.astype(np.float64)
    bn.set_buffer("running_mean", mu + mom * (mean - mu))
    bn.set_buffer("running_var", v + mom * (var - v))
    return mom


def stats_divergence(mean, var, ref_mean, ref_var, eps: float = ops.NORM_EPS) -> float:
    """Channel-averaged KL(N(mean, var) || N(ref_mean, ref_var)).

    DUA has no training loss; this measures how far an event's statistics
    pull the stored ones and serves as its per-event loss.
    """
    v = np.asarray(var, np.float64) + eps
    r = np.asarray(ref_var, np.float64) + eps
    d = np.asarray(mean, np.float64) - ref_mean
    return float(np.mean(0.5 * (np.log(r / v) + (v + d * d) / r - 1.0)))


def frozen_accuracy(m: PlainModel | YModel, images: np.ndarray, labels: np.ndarray) -> float:
    """Accuracy of the unadapted model with stored normalization statistics."""
    return float((predict(m, images, NormMode.EVAL) == labels).mean())
