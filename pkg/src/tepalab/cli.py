"""Command-line interface.

Every subcommand reads a YAML config (``--config``) whose keys may be
overridden with ``--set key.path=value`` and a few shortcut flags. Failures
print one line ``tepalab: error[<category>]: <message>`` to stderr.

Exit codes: 0 success, 2 usage / config / missing file, 3 failed invariant,
1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .attack import AttackConfig, poigen
from .config import SCHEMA_VERSION, apply_overrides, check_keys, load_config, resolve, take
from .corruptions import CorruptionSpec, apply_corruption
from .data import LabeledDataset, load_dataset, make_blob_texture, save_tensor_file
from .defenses import DefenseSpec, Preprocessor, adversarial_train
from .errors import ConfigError, DependencyError, InvariantError, TepaError
from .harness import (
    Assets,
    ExperimentConfig,
    check_disjoint,
    emit_report,
    mean_sd,
    prepare_eval,
    prepare_warmup,
    read_metrics_csv,
    run_experiment,
)
from .models import ArchSpec, YModel, build_model, load_checkpoint, restore, save_checkpoint, snapshot
from .nn.layers import NormMode
from .training import TrainConfig, accuracy, train_joint, train_plain

log = logging.getLogger("tepalab")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_ASSERT = 0, 1, 2, 3
USAGE_CATEGORIES = {"usage", "config", "file-not-found", "version"}


class UsageError(TepaError):
    category = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- helpers

def _config(args, shortcuts: dict) -> tuple[dict, Path | None]:
    """Load ``--config`` (or start empty), then apply shortcut flags and ``--set``."""
    sets = [f"{key}={json.dumps(v)}" for key, v in shortcuts.items() if v is not None]
    sets += args.set or []
    if args.config:
        return load_config(args.config, sets), Path(args.config).resolve().parent
    return apply_overrides({"schema_version": SCHEMA_VERSION}, sets), None


def _require(cfg: dict, key: str, cmd: str):
    if cfg.get(key) is None:
        raise ConfigError(f"{cmd}: missing required key {key!r}")
    return cfg[key]


def dataset_from(spec, base: Path | None, split: str = "other") -> LabeledDataset:
    """A data spec is a file path, ``{path: ...}``, or synthetic ``{n, seed, shift, separation}``."""
    if isinstance(spec, str):
        spec = {"path": spec}
    if not isinstance(spec, dict):
        raise ConfigError(f"data spec must be a path or a mapping, got {spec!r}")
    if "path" in spec:
        p = resolve(base, spec["path"])
        d = load_dataset(p)
        return LabeledDataset(d.images, d.labels, split, d.num_classes, d.meta)
    extra = set(spec) - {"n", "seed", "shift", "separation", "noise"}
    if extra:
        raise ConfigError(f"unknown synthetic data key(s) {sorted(extra)}")
    return make_blob_texture(
        int(_require(spec, "n", "data")),
        int(spec.get("seed", 0)),
        shift=float(spec.get("shift", 0.0)),
        separation=float(spec.get("separation", 1.0)),
        noise=float(spec.get("noise", 0.02)),
        split=split,
    )


def _load_model(path, what: str):
    if path is None:
        raise ConfigError(f"no {what} checkpoint configured")
    if not Path(path).exists():
        raise DependencyError(f"{what} checkpoint {path} does not exist")
    return restore(load_checkpoint(path))


def _out(cfg: dict, base, cmd: str) -> Path:
    return Path(resolve(base, _require(cfg, "out", cmd)))


# ---------------------------------------------------------------- commands

TRAIN_KEYS = {"kind", "arch", "data", "train", "out"}


def _train(args, cmd: str, defaults: dict) -> int:
    cfg, base = _config(args, {"out": args.out, "train.seed": args.seed})
    cfg = take(cfg, TRAIN_KEYS, cmd)
    kind = cfg.get("kind", "plain")
    if kind not in ("plain", "y"):
        raise ConfigError(f"{cmd}: kind must be 'plain' or 'y'")
    arch = {**defaults["arch"], **(cfg.get("arch") or {})}
    if kind == "y":
        arch.setdefault("split_point", 2)
    else:
        arch["split_point"] = None
    d = dataset_from(cfg.get("data") or defaults["data"], base, "target-train" if cmd == "train-target" else "surrogate")
    m = build_model(ArchSpec.from_dict(arch))
    tc = TrainConfig(**{"epochs": 8, **check_keys(cfg.get("train"), TrainConfig, f"{cmd}: train")})
    history: list = []
    m = (train_joint if kind == "y" else train_plain)(m, d, tc, history)
    out = _out(cfg, base, cmd)
    meta = {"train": tc.to_dict(), "history": history, "train_accuracy": accuracy(m, d)}
    save_checkpoint(out, snapshot(m, extra_meta=meta))
    print(json.dumps({"out": str(out), "train_accuracy": meta["train_accuracy"], "final_loss": history[-1]}))
    return EXIT_OK


def cmd_train_target(args) -> int:
    return _train(args, "train-target", {"arch": {"template": "cnn4"}, "data": {"n": 4000, "seed": 1}})


def cmd_train_surrogate(args) -> int:
    return _train(args, "train-surrogate", {"arch": {"template": "cnn3", "seed": 5}, "data": {"n": 4000, "seed": 11, "shift": 0.3}})


def cmd_gen_corrupt(args) -> int:
    cfg, base = _config(args, {"out": args.out, "corruption": args.corruption, "seed": args.seed})
    cfg = take(cfg, {"input", "corruption", "seed", "out"}, "gen-corrupt")
    spec = CorruptionSpec.parse(_require(cfg, "corruption", "gen-corrupt"), seed=int(cfg.get("seed", 0)))
    d = dataset_from(_require(cfg, "input", "gen-corrupt"), base)
    out = _out(cfg, base, "gen-corrupt")
    save_tensor_file(out, d.with_images(apply_corruption(d.images, spec), corruption=spec.label()),
                     sidecar={"corruption": spec.label(), "seed": spec.seed, "count": len(d)})
    print(json.dumps({"out": str(out), "count": len(d), "corruption": spec.label()}))
    return EXIT_OK


def cmd_gen_poison(args) -> int:
    cfg, base = _config(args, {"out": args.out, "method": args.method, "attack.epsilon": args.eps, "seed": args.seed})
    cfg = take(cfg, {"method", "input", "surrogate", "attack", "seed", "out"}, "gen-poison")
    method = str(_require(cfg, "method", "gen-poison")).lower()
    attack = check_keys(cfg.get("attack"), AttackConfig, "gen-poison: attack")
    if "seed" in cfg:
        attack.setdefault("seed", int(cfg["seed"]))
    acfg = AttackConfig.for_method(method, **attack)
    d = dataset_from(_require(cfg, "input", "gen-poison"), base, "poison-seed")
    surrogate = None
    if method != "dua":
        surrogate = _load_model(resolve(base, cfg.get("surrogate")), "surrogate")
        if method == "ttt" and not isinstance(surrogate, YModel):
            raise ConfigError("the TTT poison needs a Y-structured surrogate checkpoint")
    x_adv = poigen(method, d.images, surrogate, acfg)
    out = _out(cfg, base, "gen-poison")
    save_tensor_file(out, d.with_images(x_adv, poisoned_for=method),
                     sidecar={"method": method, "attack": acfg.to_dict(), "count": len(d)})
    dev = float(np.abs(x_adv - d.images).max()) if len(d) else 0.0
    print(json.dumps({"out": str(out), "count": len(d), "max_abs_perturbation": dev}))
    return EXIT_OK


RUN_KEYS = set(ExperimentConfig.__dataclass_fields__) | {"out", "features"}
DATA_DEFAULTS = {"eval": {"n": 1000, "seed": 2}, "warmup": {"n": 3200, "seed": 3}}


def _run(args, cmd: str) -> int:
    cfg, base = _config(args, {"out": args.out, "method": getattr(args, "method", None), "seed": args.seed})
    cfg = take(cfg, RUN_KEYS, cmd)
    out = _out(cfg, base, cmd)
    features = bool(cfg.pop("features", False))
    cfg.pop("out")
    ec = ExperimentConfig(**cfg)
    if cmd == "defend" and not ec.defense:
        raise ConfigError("defend: a 'defense' section is required")
    data = {**DATA_DEFAULTS, **(ec.data or {})}
    ev = dataset_from(data["eval"], base, "eval")
    warm = dataset_from(data["warmup"], base, "warmup")
    check_disjoint(warm.images, ev.images)
    non_iid = dataset_from(data["non_iid"], base, "other").images if data.get("non_iid") else warm.images
    poison = None
    if ec.poison_cache:
        p = resolve(base, ec.poison_cache)
        if not Path(p).exists():
            raise DependencyError(f"poisoned-sample cache {p} does not exist")
        poison = load_dataset(p).images
    ev_x, ev_y = prepare_eval(ev.images, ev.labels, ec)
    target = _load_model(resolve(base, ec.target), "target")
    assets = Assets(target, ev_x, ev_y, prepare_warmup(warm.images, ec.warmup_corruption), poison, non_iid)
    result = run_experiment(ec, assets)
    feats = None
    if features:
        result.model.set_norm_mode(NormMode.EVAL)
        feats = result.model.features(ev_x).data
    paths = emit_report(result, out, feats)
    print(json.dumps({"final_accuracy": result.final_accuracy, "baseline": result.baseline,
                      **{k: str(v) for k, v in paths.items()}}))
    return EXIT_OK


def cmd_run(args) -> int:
    return _run(args, "run")


def cmd_defend(args) -> int:
    """Preprocess a dataset (BDR/RRP/JC), adversarially train a checkpoint (AT),
    or, given a full run config with a ``defense`` section, run a defended experiment."""
    cfg, base = _config(args, {"out": args.out, "seed": args.seed})
    if "method" in cfg:
        return _run(args, "defend")
    cfg = take(cfg, {"defense", "input", "target", "train", "data", "out", "seed"}, "defend")
    defense = check_keys(_require(cfg, "defense", "defend"), DefenseSpec, "defend: defense")
    spec = DefenseSpec(**{"seed": int(cfg.get("seed", 0)), **defense})
    out = _out(cfg, base, "defend")
    if spec.is_preprocessor:
        d = dataset_from(_require(cfg, "input", "defend"), base)
        x = Preprocessor(spec)(d.images)
        save_tensor_file(out, d.with_images(x, defense=spec.label()), sidecar={"defense": spec.to_dict(), "count": len(d)})
        print(json.dumps({"out": str(out), "count": len(d), "shape": list(x.shape)}))
        return EXIT_OK
    m = _load_model(resolve(base, cfg.get("target")), "target")
    if not isinstance(m, YModel):
        raise ConfigError("adversarial training needs a Y-structured target checkpoint")
    d = dataset_from(cfg.get("data") or {"n": 2000, "seed": 1}, base, "target-train")
    tc = TrainConfig(**{"epochs": 2, "lr": 0.02, **check_keys(cfg.get("train"), TrainConfig, "defend: train")})
    history: list = []
    adversarial_train(m, d, tc, spec, history)
    save_checkpoint(out, snapshot(m, extra_meta={"defense": spec.to_dict(), "train": tc.to_dict(), "history": history}))
    print(json.dumps({"out": str(out), "final_loss": history[-1]}))
    return EXIT_OK


def cmd_report(args) -> int:
    """Merge run directories into one JSON (order-independent)."""
    cfg, base = _config(args, {"out": args.out})
    cfg = take(cfg, {"inputs", "out"}, "report")
    inputs = list(args.inputs or []) + [str(resolve(base, p)) for p in cfg.get("inputs") or []]
    if not inputs:
        raise ConfigError("report: no run directories given")
    runs = []
    for d in sorted(set(inputs)):
        csv_path, sum_path = Path(d) / "metrics.csv", Path(d) / "summary.json"
        records = read_metrics_csv(csv_path)
        summary = json.loads(sum_path.read_text())
        n_events = sum(1 for r in records if r.row == "event")
        if n_events != summary["events"]:
            raise InvariantError(f"{d}: CSV holds {n_events} events, summary says {summary['events']}")
        losses = {}
        for tag in sorted({r.tag for r in records if r.row == "event"}):
            vals = sorted(r.loss for r in records if r.row == "event" and r.tag == tag and r.loss is not None)
            losses[tag] = float(np.mean(vals)) if vals else None
        runs.append({"run": d, "final_accuracy": summary["final_accuracy"], "baseline": summary["baseline_accuracy"],
                     "mean_loss": losses})
    finals = sorted(r["final_accuracy"] for r in runs)
    m, sd = mean_sd(finals)
    report = {"schema_version": SCHEMA_VERSION, "runs": runs, "final_accuracy": {"mean": m, "sd": sd, "n": len(finals)}}
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if cfg.get("out"):
        _out(cfg, base, "report").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "train-target": (cmd_train_target, "train a target model (plain or Y-structured)"),
    "train-surrogate": (cmd_train_surrogate, "train the attacker's surrogate model"),
    "gen-corrupt": (cmd_gen_corrupt, "write a corrupted copy of a dataset"),
    "gen-poison": (cmd_gen_poison, "generate poisoned samples against a surrogate"),
    "run": (cmd_run, "run one TTA experiment and write its report"),
    "defend": (cmd_defend, "apply an input defense, adversarially train, or run a defended experiment"),
    "report": (cmd_report, "merge run reports"),
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tepalab", description="Test-time poisoning lab.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (fn, help_) in COMMANDS.items():
        s = sub.add_parser(name, help=help_, description=help_)
        s.set_defaults(fn=fn)
        s.add_argument("--config", help="YAML config file")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        s.add_argument("--out", help="output path")
        if name != "report":
            s.add_argument("--seed", type=int)
        if name in ("gen-poison", "run"):
            s.add_argument("--method", choices=["ttt", "dua", "tent", "rpl"])
        if name == "gen-poison":
            s.add_argument("--eps", type=float, help="l-inf budget (DUA: noise scale)")
        if name == "gen-corrupt":
            s.add_argument("--corruption", help="e.g. fog-5")
        if name == "report":
            s.add_argument("inputs", nargs="*", help="run directories")
    return p


def _category(exc: BaseException) -> str:
    if isinstance(exc, TepaError):
        return exc.category
    if isinstance(exc, FileNotFoundError):
        return "file-not-found"
    if isinstance(exc, AssertionError):
        return "assertion"
    if isinstance(exc, OSError):
        return "io"
    return "internal"


def exit_code(category: str) -> int:
    if category in USAGE_CATEGORIES:
        return EXIT_USAGE
    if category == "assertion":
        return EXIT_ASSERT
    return EXIT_FAIL


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one line
        cat = _category(exc)
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        if isinstance(exc, FileNotFoundError) and exc.filename:
            msg = f"{exc.filename}: no such file"
        print(f"tepalab: error[{cat}]: {msg}", file=sys.stderr)
        return exit_code(cat)


if __name__ == "__main__":
    sys.exit(main())
