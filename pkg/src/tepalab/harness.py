"""Experiment orchestration: streams, the warm-up/evaluation protocol, metrics and reports.

CSV report columns (version 1), one row per event and one per accuracy checkpoint:

==================  =======================================================
``row``             ``event`` or ``checkpoint``
``t``               events consumed so far (an event row carries its own index + 1)
``tag``             ``benign-iid``, ``benign-non-iid``, ``poisoned`` (events) or ``acc``
``loss``            per-event adaptation loss (empty for checkpoints)
``poison_frac``     fraction of the event's images that are poisoned
``accuracy``        accuracy on the evaluation set (empty for events)
==================  =======================================================
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import check_keys
from .corruptions import CorruptionSpec, apply_corruption
from .defenses import DefenseSpec, Preprocessor
from .errors import ConfigError, DependencyError, InvariantError, ReportIOError
from .models import PlainModel, YModel
from .tta import TtaConfig, TtaEngine, frozen_accuracy

CSV_VERSION = 1
SUMMARY_SCHEMA = 1
CSV_COLUMNS = ("row", "t", "tag", "loss", "poison_frac", "accuracy")
TAGS = ("benign-iid", "benign-non-iid", "poisoned")
MODES = ("uniform", "warm-before", "warm-after")
LOSS_BINS = np.linspace(0.0, 5.0, 26)  # fixed edges; values outside land in the end bins
# corruption draws of the two fixed pools; they do not follow the run seed
EVAL_CORRUPTION_SEED = 101
WARMUP_CORRUPTION_SEED = 9


@dataclass
class StreamSchedule:
    """Which events arrive in which order.

    * ``uniform``: ``n_events`` events, each image poisoned with probability ``p``.
    * ``warm-before``: ``n_benign`` benign events, then ``n_poison`` poisoned ones.
    * ``warm-after``: ``n_poison`` poisoned events, then ``n_benign`` benign ones.
    """

    mode: str = "uniform"
    n_events: int = 0
    p: float = 0.0
    n_benign: int = 0
    n_poison: int = 0
    granularity: str = "single"
    batch_size: int = 32
    poison_unit: str = "sample"  # uniform batches: per-sample or per-batch coin flips
    non_iid: bool = False  # benign events drawn from the non-i.i.d. pool
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown schedule mode {self.mode!r}")
        if min(self.n_events, self.n_benign, self.n_poison) < 0:
            raise ConfigError("event counts must be non-negative")
        if not 0 <= self.p <= 1:
            raise ConfigError("p must lie in [0, 1]")
        if self.granularity not in ("single", "batch"):
            raise ConfigError("granularity must be 'single' or 'batch'")
        if self.poison_unit not in ("sample", "batch"):
            raise ConfigError("poison_unit must be 'sample' or 'batch'")
        if self.granularity == "batch" and self.batch_size < 2:
            raise ConfigError("batch events need at least two images")

    @property
    def total_events(self) -> int:
        return self.n_events if self.mode == "uniform" else self.n_benign + self.n_poison

    @property
    def unit(self) -> int:
        return 1 if self.granularity == "single" else self.batch_size

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StreamEvent:
    index: int
    tag: str
    images: np.ndarray  # (C, H, W) for single events, (B, C, H, W) for batches
    poisoned: np.ndarray  # bool per image

    @property
    def poison_frac(self) -> float:
        return float(np.mean(self.poisoned))


def poison_flags(s: StreamSchedule) -> list[np.ndarray]:
    """Per-event boolean arrays marking which images are poisoned."""
    rng = np.random.default_rng([s.seed, 1])
    u = s.unit
    if s.mode == "uniform":
        if s.granularity == "batch" and s.poison_unit == "batch":
            return [np.full(u, f) for f in rng.random(s.n_events) < s.p]
        return [rng.random(u) < s.p for _ in range(s.n_events)]
    benign = [np.zeros(u, bool)] * s.n_benign
    poison = [np.ones(u, bool)] * s.n_poison
    return benign + poison if s.mode == "warm-before" else poison + benign


def build_schedule(
    s: StreamSchedule,
    benign_pool: np.ndarray,
    poison_pool: np.ndarray | None = None,
    benign_tag: str | None = None,
) -> list[StreamEvent]:
    """Deterministic event list; images are drawn without replacement from each pool."""
    flags = poison_flags(s)
    need_poison = int(sum(f.sum() for f in flags))
    need_benign = int(sum((~f).sum() for f in flags))
    if need_poison and (poison_pool is None or len(poison_pool) == 0):
        raise DependencyError("schedule needs poisoned samples but no poisoned-sample cache was given")
    if need_poison > (0 if poison_pool is None else len(poison_pool)):
        raise ConfigError(f"schedule needs {need_poison} poisoned images, cache holds {len(poison_pool)}")
    if need_benign > len(benign_pool):
        raise ConfigError(f"schedule needs {need_benign} benign images, pool holds {len(benign_pool)}")
    rng = np.random.default_rng([s.seed, 2])
    b_order = iter(rng.permutation(len(benign_pool))[:need_benign])
    p_order = iter(rng.permutation(len(poison_pool))[:need_poison] if need_poison else [])
    btag = benign_tag or ("benign-non-iid" if s.non_iid else "benign-iid")
    events = []
    for i, f in enumerate(flags):
        imgs = np.stack([poison_pool[next(p_order)] if fl else benign_pool[next(b_order)] for fl in f])
        tag = "poisoned" if f.any() else btag
        events.append(StreamEvent(i, tag, imgs[0] if s.granularity == "single" else imgs, f.copy()))
    return events


def checkpoint_times(n: int, spec="geometric") -> list[int]:
    """Event counts after which accuracy is measured.

    ``"geometric"`` gives 0, 1, 2, 5, 10, 20, 50, ... up to ``n`` (always
    including ``n``); ``"final"`` gives ``[n]``; ``"ends"`` gives ``[0, n]``;
    a list is used as given (clipped to ``[0, n]``).
    """
    if spec == "final":
        return [n]
    if spec == "ends":
        return sorted({0, n})
    if spec == "geometric":
        out, k = {0, n}, 0
        while True:
            for m in (1, 2, 5):
                v = m * 10**k
                if v <= n:
                    out.add(v)
            if 10**k > n:
                break
            k += 1
        return sorted(out)
    return sorted({int(v) for v in spec if 0 <= int(v) <= n})


@dataclass
class ExperimentConfig:
    method: str = "tent"
    tta: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    warmup_corruption: str = "fog-5"
    eval_corruption: str = "fog-5"
    defense: dict | None = None
    eval_size: int = 1000
    checkpoints: object = "geometric"
    seed: int = 0
    target: str | None = None  # checkpoint path, used by the CLI
    poison_cache: str | None = None
    data: dict = field(default_factory=dict)

    def __post_init__(self):
        self.method = self.method.lower()
        if self.eval_size < 1:
            raise ConfigError("eval_size must be positive")
        CorruptionSpec.parse(self.warmup_corruption)
        CorruptionSpec.parse(self.eval_corruption)
        check_keys(self.tta, TtaConfig, "tta")
        check_keys(self.schedule, StreamSchedule, "schedule")
        if self.defense:
            check_keys(self.defense, DefenseSpec, "defense")

    def tta_config(self) -> TtaConfig:
        return TtaConfig(**{**self.tta, "method": self.method, "seed": self.seed})

    def stream_schedule(self) -> StreamSchedule:
        tc = self.tta_config()
        sched = {"granularity": tc.granularity, "batch_size": tc.batch_size, "seed": self.seed, **self.schedule}
        s = StreamSchedule(**sched)
        if s.granularity != tc.granularity:
            raise ConfigError(f"{self.method.upper()} consumes {tc.granularity} events, schedule says {s.granularity}")
        return s

    def defense_spec(self) -> DefenseSpec | None:
        return DefenseSpec(**{"seed": self.seed, **self.defense}) if self.defense else None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsRecord:
    row: str  # "event" | "checkpoint"
    t: int
    tag: str
    loss: float | None = None
    poison_frac: float | None = None
    accuracy: float | None = None

    def to_csv_row(self) -> list[str]:
        def f(v):
            return "" if v is None else repr(float(v))

        return [self.row, str(self.t), self.tag, f(self.loss), f(self.poison_frac), f(self.accuracy)]

    @classmethod
    def from_csv_row(cls, r: list[str]) -> "MetricsRecord":
        def f(v):
            return None if v == "" else float(v)

        return cls(r[0], int(r[1]), r[2], f(r[3]), f(r[4]), f(r[5]))


@dataclass
class RunResult:
    records: list[MetricsRecord]
    config: dict
    baseline: float  # frozen, unadapted accuracy on the evaluation set
    preprocessed: int = 0  # images that went through the defense preprocessor
    path_trace: dict = field(default_factory=dict)  # tag -> stage sequence seen by its events
    model: PlainModel | YModel | None = field(default=None, repr=False)  # the adapted copy

    @property
    def checkpoints(self) -> dict[int, float]:
        return {r.t: r.accuracy for r in self.records if r.row == "checkpoint"}

    @property
    def final_accuracy(self) -> float:
        return self.checkpoints[max(self.checkpoints)]

    def losses(self, tag: str) -> np.ndarray:
        return np.array([r.loss for r in self.records if r.row == "event" and r.tag == tag], dtype=float)


@dataclass
class Assets:
    """In-memory inputs of one experiment."""

    target: PlainModel | YModel
    eval_images: np.ndarray
    eval_labels: np.ndarray
    benign_pool: np.ndarray  # already corrupted warm-up images
    poison_pool: np.ndarray | None = None
    non_iid_pool: np.ndarray | None = None


def prepare_eval(images: np.ndarray, labels: np.ndarray, cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    if len(labels) < cfg.eval_size:
        raise ConfigError(f"evaluation set holds {len(labels)} images, config asks for {cfg.eval_size}")
    spec = CorruptionSpec.parse(cfg.eval_corruption, seed=EVAL_CORRUPTION_SEED)
    return apply_corruption(images[: cfg.eval_size], spec), labels[: cfg.eval_size]


def prepare_warmup(images: np.ndarray, corruption: str) -> np.ndarray:
    return apply_corruption(images, CorruptionSpec.parse(corruption, seed=WARMUP_CORRUPTION_SEED))


def check_disjoint(a: np.ndarray, b: np.ndarray, what: str = "warm-up and evaluation sets") -> None:
    """Raise if any image occurs in both stacks (compared byte for byte)."""
    seen = {np.ascontiguousarray(x).tobytes() for x in a}
    if any(np.ascontiguousarray(x).tobytes() in seen for x in b):
        raise ConfigError(f"{what} share images")


def run_experiment(cfg: ExperimentConfig, assets: Assets) -> RunResult:
    """Feed the scheduled stream through the (optional) preprocessor into a fresh engine.

    The target in ``assets`` is cloned, never mutated.
    """
    tc = cfg.tta_config()
    sched = cfg.stream_schedule()
    pool = assets.non_iid_pool if sched.non_iid else assets.benign_pool
    if pool is None:
        raise DependencyError("schedule asks for non-i.i.d. benign events but no such pool was given")
    events = build_schedule(sched, pool, assets.poison_pool)
    model = assets.target.clone()
    engine = TtaEngine(model, tc)
    dspec = cfg.defense_spec()
    pre = Preprocessor(dspec) if dspec is not None and dspec.is_preprocessor else None
    ev_x, ev_y = assets.eval_images, assets.eval_labels
    if pre is not None:
        ev_x = pre(ev_x)
    baseline = frozen_accuracy(model, ev_x, ev_y)
    marks = set(checkpoint_times(len(events), cfg.checkpoints))
    records: list[MetricsRecord] = []
    trace: dict[str, tuple] = {}
    if 0 in marks:
        records.append(MetricsRecord("checkpoint", 0, "acc", accuracy=engine.evaluate(ev_x, ev_y)))
    for ev in events:
        stages = []
        x = ev.images
        if pre is not None:
            x = pre(x)
            stages.append("preprocess")
        engine.step(x)
        stages.append(f"{tc.method}-step")
        prev = trace.setdefault(ev.tag, tuple(stages))
        if prev != tuple(stages):
            raise InvariantError(f"event {ev.index} took path {stages}, earlier {ev.tag} events took {prev}")
        records.append(MetricsRecord("event", ev.index + 1, ev.tag, engine.last_loss, ev.poison_frac))
        if ev.index + 1 in marks:
            records.append(MetricsRecord("checkpoint", ev.index + 1, "acc", accuracy=engine.evaluate(ev_x, ev_y)))
    if pre is not None:
        expected = len(ev_y) + sum(1 if e.images.ndim == 3 else len(e.images) for e in events)
        if pre.count != expected:
            raise InvariantError(f"preprocessor saw {pre.count} images, stream and evaluation hold {expected}")
    return RunResult(records, cfg.to_dict(), baseline, pre.count if pre else 0, trace, model)


# ---------------------------------------------------------------- reports

def loss_histograms(records: list[MetricsRecord]) -> dict:
    """Per-tag counts over :data:`LOSS_BINS`; out-of-range losses fall in the end bins."""
    out = {}
    edges = LOSS_BINS
    for tag in TAGS:
        vals = np.array([r.loss for r in records if r.row == "event" and r.tag == tag and r.loss is not None])
        if len(vals) == 0:
            continue
        idx = np.clip(np.searchsorted(edges, vals, side="right") - 1, 0, len(edges) - 2)
        out[tag] = {
            "counts": np.bincount(idx, minlength=len(edges) - 1).tolist(),
            "mean": float(vals.mean()),
            "n": int(len(vals)),
        }
    return {"edges": edges.tolist(), "by_tag": out}


def summarize(result: RunResult) -> dict:
    cps = result.checkpoints
    return {
        "schema_version": SUMMARY_SCHEMA,
        "csv_version": CSV_VERSION,
        "config": result.config,
        "baseline_accuracy": result.baseline,
        "final_accuracy": result.final_accuracy if cps else None,
        "checkpoints": {str(t): a for t, a in sorted(cps.items())},
        "events": sum(1 for r in result.records if r.row == "event"),
        "preprocessed_images": result.preprocessed,
        "loss_histograms": loss_histograms(result.records),
    }


def emit_report(result: RunResult, out_dir, features: np.ndarray | None = None) -> dict[str, Path]:
    """Write ``metrics.csv``, ``summary.json`` and optionally ``features.npy``."""
    if not result.records:
        raise ConfigError("nothing to report: the run produced no records")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out / "metrics.csv", "summary": out / "summary.json"}
        with open(paths["csv"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in result.records:
                w.writerow(r.to_csv_row())
        paths["summary"].write_text(json.dumps(summarize(result), indent=2, sort_keys=True) + "\n")
        if features is not None:
            paths["features"] = out / "features.npy"
            np.save(paths["features"], np.asarray(features, dtype=np.float32))
    except OSError as exc:
        raise ReportIOError(f"cannot write report under {out}: {exc}") from exc
    return paths


def read_metrics_csv(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise ConfigError(f"{path}: not a metrics CSV of version {CSV_VERSION}")
    return [MetricsRecord.from_csv_row(r) for r in rows[1:]]


def mean_sd(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def binomial_sigma(p: float, n: int) -> float:
    return math.sqrt(p * (1 - p) / n)
