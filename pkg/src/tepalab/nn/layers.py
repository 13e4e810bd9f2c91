"""Layer objects holding parameters and normalization state."""

from __future__ import annotations

from enum import Enum
from typing import Iterator

import numpy as np

from ..errors import ConfigError, ShapeError
from . import ops
from .tensor import Tensor


class NormMode(str, Enum):
    TRAIN = "train"  # batch statistics + EMA update of the stored ones
    EVAL = "eval"  # stored statistics
    BATCH = "batch-stats"  # batch statistics, stored ones untouched

    @classmethod
    def parse(cls, mode) -> "NormMode":
        try:
            return cls(mode)
        except ValueError:
            raise ConfigError(f"unknown norm mode {mode!r}") from None


class Module:
    """Container with named parameters, array buffers and child modules."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for n, p in self._params.items():
            yield prefix + n, p
        for cn, c in self._children.items():
            yield from c.named_parameters(f"{prefix}{cn}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for n, b in self._buffers.items():
            yield prefix + n, b
        for cn, c in self._children.items():
            yield from c.named_buffers(f"{prefix}{cn}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for c in self._children.values():
            yield from c.modules()

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        owner, leaf = self._resolve(name)
        old = owner._buffers[leaf]
        owner._buffers[leaf] = np.asarray(value, dtype=old.dtype).reshape(old.shape).copy()

    def _resolve(self, name: str) -> tuple["Module", str]:
        owner = self
        *path, leaf = name.split(".")
        for part in path:
            owner = owner._children[part]
        return owner, leaf

    def set_norm_mode(self, mode) -> None:
        mode = NormMode.parse(mode)
        for m in self.modules():
            if isinstance(m, BatchNorm2d):
                m.mode = mode

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):  # pragma: no cover - interface
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, stride: int, rng: np.random.Generator, dtype, bias: bool = False):
        super().__init__()
        fan_in = cin * 9
        self.stride = stride
        self.cin = cin
        self.weight = self.add_param("weight", rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, 3, 3)).astype(dtype))
        self.bias = self.add_param("bias", np.zeros(cout, dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.cin:
            raise ShapeError(f"conv expects (N, {self.cin}, H, W), got {x.shape}")
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=1)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator, dtype):
        super().__init__()
        bound = 1.0 / np.sqrt(fin)
        self.fin = fin
        self.weight = self.add_param("weight", rng.uniform(-bound, bound, (fout, fin)).astype(dtype))
        self.bias = self.add_param("bias", np.zeros(fout, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    """Batch norm with stored statistics and the DUA momentum state.

    ``running_mean``/``running_var`` are the stored statistics; ``rho`` is the
    decaying adaptation momentum and ``xi`` its floor.
    """

    def __init__(self, channels: int, dtype, eps: float = ops.NORM_EPS, momentum: float = 0.1):
        super().__init__()
        if eps <= 0:
            raise ConfigError("eps must be positive")
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.mode = NormMode.TRAIN
        self.xi = 0.005
        self.gamma = self.add_param("gamma", np.ones(channels, dtype))
        self.beta = self.add_param("beta", np.zeros(channels, dtype))
        self._buffers["running_mean"] = np.zeros(channels, dtype)
        self._buffers["running_var"] = np.ones(channels, dtype)
        self._buffers["rho"] = np.array(0.1, dtype=np.float64)
        self.last_stats: dict | None = None

    @property
    def running_mean(self) -> np.ndarray:
        return self._buffers["running_mean"]

    @property
    def running_var(self) -> np.ndarray:
        return self._buffers["running_var"]

    @property
    def rho(self) -> float:
        return float(self._buffers["rho"])

    @rho.setter
    def rho(self, value: float) -> None:
        self._buffers["rho"] = np.array(value, dtype=np.float64)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"batch norm expects (N, {self.channels}, H, W), got {x.shape}")
        if self.mode is NormMode.EVAL:
            self.last_stats = None
            return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)
        stats: dict = {}
        out = ops.batch_norm(x, self.gamma, self.beta, eps=self.eps, stats_out=stats)
        self.last_stats = stats
        if self.mode is NormMode.TRAIN:
            m = self.momentum
            self._buffers["running_mean"] = ((1 - m) * self.running_mean + m * stats["mean"]).astype(self.running_mean.dtype)
            self._buffers["running_var"] = ((1 - m) * self.running_var + m * stats["var"]).astype(self.running_var.dtype)
        return out


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int, dtype, eps: float = ops.NORM_EPS):
        super().__init__()
        if channels % groups:
            raise ConfigError(f"{channels} channels do not split into {groups} groups")
        self.channels = channels
        self.groups = groups
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(channels, dtype))
        self.beta = self.add_param("beta", np.zeros(channels, dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"group norm expects (N, {self.channels}, H, W), got {x.shape}")
        return ops.group_norm(x, self.gamma, self.beta, self.groups, self.eps)


class ConvBlock(Module):
    """3x3 stride-2 convolution, normalization, ReLU."""

    def __init__(self, cin: int, cout: int, norm: str, rng, dtype, gn_groups: int = 8, stride: int = 2):
        super().__init__()
        self.conv = self.add_child("conv", Conv2d(cin, cout, stride, rng, dtype))
        if norm == "bn":
            self.norm = self.add_child("norm", BatchNorm2d(cout, dtype))
        elif norm == "gn":
            self.norm = self.add_child("norm", GroupNorm(cout, min(gn_groups, cout), dtype))
        else:
            raise ConfigError(f"unknown norm kind {norm!r}")

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.norm(self.conv(x)))


class Head(Module):
    """Global average pooling followed by a linear classifier."""

    def __init__(self, fin: int, classes: int, rng, dtype):
        super().__init__()
        self.fc = self.add_child("fc", Linear(fin, classes, rng, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return self.fc(ops.global_avg_pool(x))


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            self.add_child(str(i), layer)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def __len__(self) -> int:
        return len(self.layers)
