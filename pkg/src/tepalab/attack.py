"""Poisoned-sample generation against a surrogate model.

``dim`` is the momentum iterative attack with input diversity. ``poigen``
builds method-specific poisons on top of it:

* TTT: repeated sweeps over the four rotation classes, maximizing the
  surrogate's rotation-prediction loss.
* TENT/RPL: maximize the surrogate's prediction entropy (label-free).
* DUA: additive Gaussian noise scaled by the budget.

Nothing here accepts a target model; every gradient comes from the surrogate.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .models import PlainModel, YModel
from .nn import ops
from .nn.layers import NormMode
from .nn.tensor import Tensor, backward


@dataclass
class AttackConfig:
    epsilon: float = 32 / 255
    alpha: float | None = None  # flat step; None -> method default
    alpha_schedule: list = field(default_factory=list)  # [(first_iter, alpha), ...]
    i_adv: int | None = None
    i_iter: int = 3
    p: float = 0.5
    mu: float = 1.0
    mu_dua: float = 0.0
    sigma2_dua: float = 0.8
    literal_step: bool = False  # x_adv = x_in + alpha * sign(g) instead of cumulative
    batch_size: int = 64
    surrogate_norm: str = "eval"  # "batch-stats" normalizes each attacked batch by its own statistics
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ConfigError("epsilon must lie in [0, 1]")
        if not 0 <= self.p <= 1:
            raise ConfigError("diversity probability must lie in [0, 1]")
        for a in self._alphas():
            if a <= 0 or (self.epsilon > 0 and a > self.epsilon):
                raise ConfigError(f"step size {a} must satisfy 0 < alpha <= epsilon")
        if self.sigma2_dua < 0:
            raise ConfigError("sigma2_dua must be non-negative")

    def _alphas(self):
        out = [a for _, a in self.alpha_schedule]
        if self.alpha is not None:
            out.append(self.alpha)
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def for_method(cls, method: str, **overrides) -> "AttackConfig":
        """Defaults per target method: staged steps for TTT, flat 1/255 for TENT/RPL."""
        method = method.lower()
        if method == "ttt":
            base = dict(i_adv=20, alpha_schedule=[(0, 4 / 255), (10, 2 / 255), (15, 1 / 255)])
        elif method in ("tent", "rpl"):
            base = dict(i_adv=200, alpha=1 / 255)
        elif method == "dua":
            base = dict(i_adv=0)
        else:
            raise ConfigError(f"unknown TTA method {method!r}")
        base.update(overrides)
        return cls(**base)

    def alpha_at(self, it: int) -> float:
        if self.alpha_schedule:
            a = self.alpha_schedule[0][1]
            for start, value in self.alpha_schedule:
                if it >= start:
                    a = value
            return a
        if self.alpha is None:
            raise ConfigError("no step size configured")
        return self.alpha


def h_max_for(h: int) -> int:
    """Largest side used by the diversity resize (about 10% enlargement)."""
    return int(math.floor(1.1 * h))


def diverse_index_map(n: int, h: int, w: int, p: float, rng: np.random.Generator, h_max: int | None = None):
    """Index map for the diversity transform of ``n`` images.

    With probability ``p`` an image is nearest-resized to a random side
    ``r`` in ``[h, h_max]``, placed on a zero canvas of side ``h_max`` at a
    random offset, and the canvas is nearest-resized back to ``h``; otherwise
    it passes through. Returns ``(rows, cols, valid)`` for :func:`ops.gather_pixels`.
    """
    h_max = h_max_for(h) if h_max is None else h_max
    rows = np.broadcast_to(np.arange(h)[None, :, None], (n, h, w)).copy()
    cols = np.broadcast_to(np.arange(w)[None, None, :], (n, h, w)).copy()
    valid = np.ones((n, h, w), dtype=bool)
    apply = rng.random(n) < p
    for k in np.flatnonzero(apply):
        r = int(rng.integers(h, h_max + 1))
        oy, ox = rng.integers(0, h_max - r + 1, size=2)
        cy = (np.arange(h) * h_max) // h - oy  # canvas position minus offset
        cx = (np.arange(w) * h_max) // w - ox
        ry = (cy * h) // r
        rx = (cx * w) // r
        vy = (cy >= 0) & (cy < r)
        vx = (cx >= 0) & (cx < r)
        rows[k] = np.clip(ry, 0, h - 1)[:, None]
        cols[k] = np.clip(rx, 0, w - 1)[None, :]
        valid[k] = vy[:, None] & vx[None, :]
    return rows, cols, valid


def diverse_transform(x: np.ndarray, p: float, rng: np.random.Generator, h_max: int | None = None) -> np.ndarray:
    """Array version of the diversity transform (no gradient)."""
    single = x.ndim == 3
    b = x[None] if single else x
    rows, cols, valid = diverse_index_map(len(b), b.shape[2], b.shape[3], p, rng, h_max)
    out = ops.gather_pixels(Tensor(b), rows, cols, valid).data
    return out[0] if single else out


def _as_float(x) -> np.ndarray:
    """Floating input keeps its precision; anything else becomes float32."""
    x = np.asarray(x)
    return x if np.issubdtype(x.dtype, np.floating) else x.astype(np.float32)


def _frozen(model):
    flags = [(q, q.requires_grad) for q in model.parameters()]
    for q, _ in flags:
        q.requires_grad = False
    return flags


def dim(
    x_in: np.ndarray,
    y: np.ndarray | None,
    surrogate_logits,
    loss: str,
    cfg: AttackConfig,
    rng: np.random.Generator,
    anchor: np.ndarray | None = None,
) -> np.ndarray:
    """Momentum iterative ascent with input diversity on a batch (N, C, H, W).

    ``surrogate_logits`` maps an input Tensor to logits. ``loss`` is ``"ce"``
    (needs ``y``) or ``"entropy"``. Perturbations stay within ``epsilon`` of
    ``anchor`` (default ``x_in``) in the l-inf norm and within [0, 1].
    """
    x_in = _as_float(x_in)
    anchor = x_in if anchor is None else np.asarray(anchor, dtype=x_in.dtype)
    if loss == "ce" and y is None:
        raise ConfigError("the cross-entropy objective needs labels")
    lo = np.clip(anchor - cfg.epsilon, 0.0, 1.0)
    hi = np.clip(anchor + cfg.epsilon, 0.0, 1.0)
    x = np.clip(x_in, lo, hi)
    if cfg.epsilon == 0:
        return x
    n, _, h, w = x.shape
    g = np.zeros_like(x, dtype=np.float64)
    for it in range(cfg.i_adv):
        xt = Tensor(x, requires_grad=True)
        rows, cols, valid = diverse_index_map(n, h, w, cfg.p, rng)
        z = surrogate_logits(ops.gather_pixels(xt, rows, cols, valid))
        obj = ops.cross_entropy(z, y, "sum") if loss == "ce" else ops.entropy(z, "sum")
        grad = backward(obj, accumulate=False)[xt].astype(np.float64)
        l1 = np.abs(grad).sum(axis=(1, 2, 3), keepdims=True)
        unit = np.divide(grad, l1, out=np.zeros_like(grad), where=l1 > 0)
        g = cfg.mu * g + unit
        base = x_in if cfg.literal_step else x
        x = (base + cfg.alpha_at(it) * np.sign(g)).astype(x_in.dtype)
        x = np.clip(x, lo, hi)
    return x


def _rot(x: np.ndarray, k: int) -> np.ndarray:
    return np.ascontiguousarray(np.rot90(x, k, axes=(-2, -1)))


def poigen(method: str, x: np.ndarray, surrogate: PlainModel | YModel, cfg: AttackConfig | None = None) -> np.ndarray:
    """Poisoned versions of clean images ``x`` (N, C, H, W) for one TTA method.

    The only model consulted is ``surrogate``. RPL reuses the TENT poison.
    """
    method = method.lower()
    cfg = cfg or AttackConfig.for_method(method)
    x = _as_float(x)
    single = x.ndim == 3
    x = x[None] if single else x
    rng = np.random.default_rng(cfg.seed)
    if method == "dua":
        noise = rng.normal(cfg.mu_dua, math.sqrt(cfg.sigma2_dua), x.shape)
        out = np.clip(x + cfg.epsilon * noise, 0.0, 1.0).astype(x.dtype)
    elif method in ("tent", "rpl"):
        out = _batched(x, cfg, lambda xb: _entropy_attack(xb, surrogate, cfg, rng))
    elif method == "ttt":
        if not isinstance(surrogate, YModel):
            raise ConfigError("the TTT poison needs a Y-structured surrogate")
        out = _batched(x, cfg, lambda xb: _rotation_attack(xb, surrogate, cfg, rng))
    else:
        raise ConfigError(f"unknown TTA method {method!r}")
    return out[0] if single else out


def _batched(x, cfg, fn):
    return np.concatenate([fn(x[i : i + cfg.batch_size]) for i in range(0, len(x), cfg.batch_size)]) if len(x) else x.copy()


def _entropy_attack(x, surrogate, cfg, rng):
    flags = _frozen(surrogate)
    surrogate.set_norm_mode(NormMode.parse(cfg.surrogate_norm))
    try:
        return dim(x, None, surrogate, "entropy", cfg, rng)
    finally:
        for q, f in flags:
            q.requires_grad = f


def _rotation_attack(x, surrogate: YModel, cfg, rng):
    """Sweeps over rotation labels 1..4; the candidate is kept in the input frame.

    Label ``k`` means ``k`` quarter turns (label 4 is the upright class 0). For
    each label the candidate and the clean anchor are turned ``k`` times, the
    rotation loss for class ``k mod 4`` is ascended, and the result is turned
    back. The budget is always measured against the clean input.
    """
    flags = _frozen(surrogate)
    surrogate.set_norm_mode(NormMode.EVAL)
    ssl = lambda t: surrogate.ssl_from_features(surrogate.extract(t))  # noqa: E731
    cand = x.copy()
    try:
        for _ in range(cfg.i_iter):
            for k in range(1, 5):
                labels = np.full(len(x), k % 4)
                adv = dim(_rot(cand, k), labels, ssl, "ce", cfg, rng, anchor=_rot(x, k))
                cand = _rot(adv, -k)
    finally:
        for q, f in flags:
            q.requires_grad = f
    return cand


def rotation_loss(m: YModel, x: np.ndarray) -> np.ndarray:
    """Per-image rotation-prediction CE averaged over the four rotations."""
    from .training import rotation_batch

    flags = _frozen(m)
    try:
        xr, yr = rotation_batch(x)
        per = ops.cross_entropy(m.ssl_from_features(m.extract(xr)), yr, "none").data
    finally:
        for q, f in flags:
            q.requires_grad = f
    return per.reshape(4, len(x)).mean(axis=0)


def prediction_entropy(m, x: np.ndarray, mode=NormMode.EVAL) -> np.ndarray:
    flags = _frozen(m)
    m.set_norm_mode(mode)
    try:
        return ops.entropy(m(x), "none").data
    finally:
        for q, f in flags:
            q.requires_grad = f
