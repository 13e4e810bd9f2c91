"""Target and surrogate classifiers plus the binary checkpoint format.

Two shapes of network are built from one block template:

* ``PlainModel``: conv blocks with batch norm, pooled linear head.
* ``YModel``: a shared extractor (the first ``split_point`` blocks) feeding a
  main branch (remaining blocks + C-way head) and a rotation branch (a copy of
  the remaining blocks + 4-way head).

Checkpoint layout (all integers little-endian)::

    u8      format version
    4s      magic b"TPCK"
    u32     section count
    section*:
        u16 name length, name (utf-8)
        u8  kind (0 = array, 1 = json)
        u64 payload length, payload
    array payload: u8 dtype code (1=f32, 2=f64, 3=i64, 4=u64), u8 ndim,
                   u32 * ndim extents, raw little-endian data
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, UnsupportedOperationError, VersionError
from .nn import ops
from .nn.layers import BatchNorm2d, ConvBlock, Head, Module, NormMode, Sequential
from .nn.tensor import Tensor

CHECKPOINT_VERSION = 1
MAGIC = b"TPCK"

TEMPLATES = {
    "cnn4": (16, 32, 64, 64),
    "cnn3": (24, 48, 96),
}


@dataclass
class ArchSpec:
    template: str = "cnn4"
    num_classes: int = 10
    split_point: int | None = None  # None -> PlainModel
    norm: str | None = None  # default: gn for Y models, bn for plain ones
    widths: tuple[int, ...] | None = None
    in_channels: int = 3
    gn_groups: int = 8
    seed: int = 0
    dtype: str = "float32"

    def resolved_widths(self) -> tuple[int, ...]:
        if self.widths is not None:
            return tuple(self.widths)
        try:
            return TEMPLATES[self.template]
        except KeyError:
            raise ConfigError(f"unknown architecture template {self.template!r}") from None

    def resolved_norm(self) -> str:
        if self.norm is not None:
            return self.norm
        return "gn" if self.split_point is not None else "bn"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.resolved_widths())
        d["norm"] = self.resolved_norm()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown architecture key(s) {sorted(unknown)}")
        if d.get("widths") is not None:
            d["widths"] = tuple(d["widths"])
        return cls(**d)


def _to_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class _Net(Module):
    arch: ArchSpec

    @property
    def dtype(self):
        return np.dtype(self.arch.dtype)

    @property
    def norm_layers(self) -> list[BatchNorm2d]:
        return [m for m in self.modules() if isinstance(m, BatchNorm2d)]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param/{n}": p.data.copy() for n, p in self.named_parameters()}
        state.update({f"buffer/{n}": np.array(b, copy=True) for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = {f"param/{n}" for n in params} | {f"buffer/{n}" for n in buffers}
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ConfigError(f"state mismatch; missing={missing[:3]} extra={extra[:3]}")
        for n, p in params.items():
            p.data = np.array(state[f"param/{n}"], dtype=p.dtype, copy=True).reshape(p.shape)
        for n in buffers:
            self.set_buffer(n, state[f"buffer/{n}"])

    def clone(self) -> "_Net":
        return copy.deepcopy(self)

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False


class PlainModel(_Net):
    """Single-branch batch-norm CNN."""

    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.arch = arch
        rng = np.random.default_rng(arch.seed)
        widths = arch.resolved_widths()
        norm = arch.resolved_norm()
        cin = arch.in_channels
        blocks = []
        for w in widths:
            blocks.append(ConvBlock(cin, w, norm, rng, arch.dtype, arch.gn_groups))
            cin = w
        self.blocks = self.add_child("blocks", Sequential(*blocks))
        self.head = self.add_child("head", Head(cin, arch.num_classes, rng, arch.dtype))

    def features(self, x) -> Tensor:
        return ops.global_avg_pool(self.blocks(_to_tensor(x, self.dtype)))

    def forward(self, x) -> Tensor:
        return self.head(self.blocks(_to_tensor(x, self.dtype)))


class YModel(_Net):
    """Shared extractor with a main (classification) and a rotation branch."""

    def __init__(self, arch: ArchSpec):
        super().__init__()
        widths = arch.resolved_widths()
        if arch.split_point is None or not 1 <= arch.split_point <= len(widths):
            raise ConfigError(f"split_point must lie in [1, {len(widths)}], got {arch.split_point}")
        self.arch = arch
        rng = np.random.default_rng(arch.seed)
        norm = arch.resolved_norm()
        cin = arch.in_channels
        blocks = []
        for w in widths:
            blocks.append(ConvBlock(cin, w, norm, rng, arch.dtype, arch.gn_groups))
            cin = w
        k = arch.split_point
        self.extractor = self.add_child("extractor", Sequential(*blocks[:k]))
        self.main_blocks = self.add_child("main_blocks", Sequential(*blocks[k:]))
        self.main_head = self.add_child("main_head", Head(cin, arch.num_classes, rng, arch.dtype))
        # the rotation branch starts as a copy of the post-split blocks
        self.ssl_blocks = self.add_child("ssl_blocks", copy.deepcopy(self.main_blocks))
        self.ssl_head = self.add_child("ssl_head", Head(cin, 4, rng, arch.dtype))

    def extract(self, x) -> Tensor:
        return self.extractor(_to_tensor(x, self.dtype))

    def main_from_features(self, h: Tensor) -> Tensor:
        return self.main_head(self.main_blocks(h))

    def ssl_from_features(self, h: Tensor) -> Tensor:
        return self.ssl_head(self.ssl_blocks(h))

    def features(self, x) -> Tensor:
        return ops.global_avg_pool(self.main_blocks(self.extract(x)))

    def forward(self, x) -> Tensor:
        return self.main_from_features(self.extract(x))

    def partitions(self) -> dict[str, list[Tensor]]:
        return {
            "extractor": self.extractor.parameters(),
            "main": self.main_blocks.parameters() + self.main_head.parameters(),
            "ssl": self.ssl_blocks.parameters() + self.ssl_head.parameters(),
        }


def build_model(arch: ArchSpec) -> PlainModel | YModel:
    arch.resolved_widths()
    if arch.resolved_norm() not in ("bn", "gn"):
        raise ConfigError(f"unknown norm kind {arch.norm!r}")
    if arch.split_point is None:
        return PlainModel(arch)
    return YModel(arch)


def forward_main(m: PlainModel | YModel, x, mode: NormMode | str | None = None) -> Tensor:
    if mode is not None:
        m.set_norm_mode(mode)
    return m(x)


def forward_ssl(m: YModel, x) -> Tensor:
    if not isinstance(m, YModel):
        raise UnsupportedOperationError("rotation head only exists on Y-structured models")
    return m.ssl_from_features(m.extract(x))


def predict(m: PlainModel | YModel, x, mode: NormMode | str = NormMode.EVAL, batch_size: int = 500) -> np.ndarray:
    """Arg-max labels, evaluated in chunks without recording gradients."""
    m.set_norm_mode(mode)
    flags = [(p, p.requires_grad) for p in m.parameters()]
    for p, _ in flags:
        p.requires_grad = False
    try:
        out = [m(np.asarray(x[i : i + batch_size])).data.argmax(axis=1) for i in range(0, len(x), batch_size)]
    finally:
        for p, f in flags:
            p.requires_grad = f
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def count_parameters(params) -> int:
    return int(sum(p.size for p in params))


# ---------------------------------------------------------------- checkpoints

_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3, np.dtype("<u8"): 4}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    """Ordered named arrays plus JSON metadata (architecture, RNG state, ...)."""

    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        sections = [("meta", 1, json.dumps(self.meta, sort_keys=True).encode())]
        for name, arr in self.arrays.items():
            sections.append((name, 0, _encode_array(arr)))
        buf.write(struct.pack("<B4sI", self.version, MAGIC, len(sections)))
        for name, kind, payload in sections:
            nb = name.encode()
            buf.write(struct.pack("<H", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<BQ", kind, len(payload)))
            buf.write(payload)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < 9:
            raise VersionError("checkpoint too short to hold a header")
        version, magic, count = struct.unpack_from("<B4sI", blob, 0)
        if version != CHECKPOINT_VERSION or magic != MAGIC:
            raise VersionError(f"unsupported checkpoint header (version={version}, magic={magic!r})")
        off = 9
        arrays: dict[str, np.ndarray] = {}
        meta: dict = {}
        try:
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", blob, off)
                off += 2
                name = blob[off : off + nlen].decode()
                off += nlen
                kind, plen = struct.unpack_from("<BQ", blob, off)
                off += 9
                payload = blob[off : off + plen]
                if len(payload) != plen:
                    raise VersionError("truncated checkpoint section")
                off += plen
                if kind == 1:
                    meta = json.loads(payload.decode())
                else:
                    arrays[name] = _decode_array(payload)
        except struct.error as exc:
            raise VersionError(f"malformed checkpoint: {exc}") from None
        return cls(arrays=arrays, meta=meta, version=version)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def _encode_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    le = arr.dtype.newbyteorder("<")
    if le not in _DTYPE_CODES:
        raise ConfigError(f"cannot serialize dtype {arr.dtype}")
    head = struct.pack("<BB", _DTYPE_CODES[le], arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=le).tobytes()


def _decode_array(payload: bytes) -> np.ndarray:
    code, ndim = struct.unpack_from("<BB", payload, 0)
    if code not in _CODE_DTYPES:
        raise VersionError(f"unknown array dtype code {code}")
    shape = struct.unpack_from(f"<{ndim}I", payload, 2)
    data = payload[2 + 4 * ndim :]
    return np.frombuffer(data, dtype=_CODE_DTYPES[code]).reshape(shape).copy()


def snapshot(m: PlainModel | YModel, extra_arrays: dict | None = None, extra_meta: dict | None = None) -> Checkpoint:
    arrays = m.state_dict()
    if extra_arrays:
        arrays.update(extra_arrays)
    meta = {"arch": m.arch.to_dict(), "kind": type(m).__name__}
    if extra_meta:
        meta.update(extra_meta)
    return Checkpoint(arrays=arrays, meta=meta)


def restore(c: Checkpoint | bytes, into: PlainModel | YModel | None = None) -> PlainModel | YModel:
    """Rebuild a model from a checkpoint, or load it into ``into`` in place.

    Everything is parsed and validated before ``into`` is touched.
    """
    if isinstance(c, (bytes, bytearray)):
        c = Checkpoint.from_bytes(bytes(c))
    if c.version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {c.version} != {CHECKPOINT_VERSION}")
    state = {k: v for k, v in c.arrays.items() if k.startswith(("param/", "buffer/"))}
    if into is None:
        into = build_model(ArchSpec.from_dict(c.meta["arch"]))
    into.load_state_dict(state)
    return into


def save_checkpoint(path, c: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(c.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return Checkpoint.from_bytes(fh.read())
