"""The standard desk-scale setup: datasets, trained models and poison pools.

Everything is derived from a :class:`Recipe` and can be cached on disk as
checkpoints and tensor containers, keyed by a digest of the recipe.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig, poigen
from .corruptions import CorruptionSpec
from .data import LabeledDataset, load_tensor_file, make_blob_texture, save_tensor_file
from .defenses import DefenseSpec, adversarial_train
from .errors import ConfigError
from .harness import Assets, ExperimentConfig, prepare_eval, prepare_warmup
from .models import ArchSpec, build_model, load_checkpoint, restore, save_checkpoint, snapshot
from .training import TrainConfig, train_joint, train_plain

log = logging.getLogger(__name__)


@dataclass
class Recipe:
    train_size: int = 4000
    eval_size: int = 1000
    warmup_size: int = 3200
    surrogate_shift: float = 0.3
    seeds: dict = field(default_factory=lambda: {"train": 1, "eval": 2, "warmup": 3, "surrogate": 11, "poison": 12})
    target_arch: str = "cnn4"
    surrogate_arch: str = "cnn3"
    split_point: int = 2
    train: dict = field(default_factory=lambda: {"epochs": 8, "seed": 0})
    surrogate_train: dict = field(default_factory=lambda: {"epochs": 8, "seed": 1})
    at_train: dict = field(default_factory=lambda: {"epochs": 2, "lr": 0.02, "seed": 0})
    at_size: int = 2000
    poison_counts: dict = field(default_factory=lambda: {"ttt": 200, "dua": 200, "tent": 640})

    def digest(self) -> str:
        blob = json.dumps({"recipe": asdict(self), "version": __version__}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # ------------------------------------------------------------ data

    def target_train(self) -> LabeledDataset:
        return make_blob_texture(self.train_size, self.seeds["train"], split="target-train")

    def surrogate_data(self) -> LabeledDataset:
        return make_blob_texture(self.train_size, self.seeds["surrogate"], shift=self.surrogate_shift, split="surrogate")

    def eval_data(self) -> LabeledDataset:
        return make_blob_texture(self.eval_size, self.seeds["eval"], split="eval")

    def warmup_data(self) -> LabeledDataset:
        return make_blob_texture(self.warmup_size, self.seeds["warmup"], split="warmup")

    def poison_seeds(self, n: int) -> LabeledDataset:
        return make_blob_texture(n, self.seeds["poison"], shift=self.surrogate_shift, split="poison-seed")


class Lab:
    """Lazily builds (and optionally caches) the artifacts of one recipe."""

    def __init__(self, recipe: Recipe | None = None, cache_dir=None):
        self.recipe = recipe or Recipe()
        self.cache = Path(cache_dir) / self.recipe.digest() if cache_dir else None
        if self.cache:
            self.cache.mkdir(parents=True, exist_ok=True)
        self._mem: dict = {}

    def _model(self, name: str, build):
        if name in self._mem:
            return self._mem[name]
        path = self.cache / f"{name}.ckpt" if self.cache else None
        if path and path.exists():
            m = restore(load_checkpoint(path))
        else:
            log.info("building %s", name)
            m = build()
            if path:
                save_checkpoint(path, snapshot(m))
        self._mem[name] = m
        return m

    def _images(self, name: str, build) -> np.ndarray:
        if name in self._mem:
            return self._mem[name]
        path = self.cache / f"{name}.tensor" if self.cache else None
        if path and path.exists():
            x = load_tensor_file(path).images
        else:
            log.info("building %s", name)
            d = build()
            if path:
                save_tensor_file(path, d)
            x = d.images
        self._mem[name] = x
        return x

    # ------------------------------------------------------------ models

    def target(self, kind: str = "plain"):
        r = self.recipe
        if kind == "plain":
            return self._model("target-plain", lambda: train_plain(
                build_model(ArchSpec(r.target_arch)), r.target_train(), TrainConfig(**r.train)))
        if kind == "y":
            return self._model("target-y", lambda: train_joint(
                build_model(ArchSpec(r.target_arch, split_point=r.split_point)), r.target_train(), TrainConfig(**r.train)))
        if kind == "at":
            def build():
                m = self.target("y").clone()
                d = r.target_train().subset(np.arange(r.at_size))
                return adversarial_train(m, d, TrainConfig(**r.at_train), DefenseSpec("at"))

            return self._model("target-at", build)
        raise ConfigError(f"unknown model kind {kind!r}")

    def surrogate(self, kind: str = "plain"):
        r = self.recipe
        if kind == "plain":
            return self._model("surrogate-plain", lambda: train_plain(
                build_model(ArchSpec(r.surrogate_arch, seed=5)), r.surrogate_data(), TrainConfig(**r.surrogate_train)))
        if kind == "y":
            return self._model("surrogate-y", lambda: train_joint(
                build_model(ArchSpec(r.surrogate_arch, split_point=r.split_point, seed=5)), r.surrogate_data(),
                TrainConfig(**r.surrogate_train)))
        raise ConfigError(f"unknown model kind {kind!r}")

    def target_for(self, method: str):
        return self.target("y" if method == "ttt" else "plain")

    # ------------------------------------------------------------ pools

    def poison_pool(self, method: str) -> np.ndarray:
        """Poisoned images for ``method``; RPL shares the TENT pool."""
        method = "tent" if method == "rpl" else method
        n = self.recipe.poison_counts[method]

        def build():
            seeds = self.recipe.poison_seeds(n)
            sur = self.surrogate("y" if method == "ttt" else "plain")
            return seeds.with_images(poigen(method, seeds.images, sur, AttackConfig.for_method(method)), poisoned_for=method)

        return self._images(f"poison-{method}", build)

    def benign_pool(self, corruption: str) -> np.ndarray:
        """The warm-up set under ``corruption`` (fixed draw)."""
        label = CorruptionSpec.parse(corruption).label()

        def build():
            d = self.recipe.warmup_data()
            return d.with_images(prepare_warmup(d.images, corruption), corruption=label)

        return self._images(f"warmup-{label}", build)

    def eval_set(self) -> LabeledDataset:
        if "eval" not in self._mem:
            self._mem["eval"] = self.recipe.eval_data()
        return self._mem["eval"]

    def assets(self, cfg: ExperimentConfig, target=None, with_poison: bool = True) -> Assets:
        """Inputs for ``cfg``: target (default: the method's standard target), fixed
        evaluation set, corrupted warm-up pool and the method's poison pool."""
        ev = self.eval_set()
        ev_x, ev_y = prepare_eval(ev.images, ev.labels, cfg)
        return Assets(
            target=target if target is not None else self.target_for(cfg.method),
            eval_images=ev_x,
            eval_labels=ev_y,
            benign_pool=self.benign_pool(cfg.warmup_corruption),
            poison_pool=self.poison_pool(cfg.method) if with_poison else None,
            non_iid_pool=self.benign_pool("ori"),
        )
