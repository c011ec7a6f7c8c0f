"""``dymus`` command line: prepare, train, eval, ablate, analyze, sweep.

Every command reads one YAML/JSON config.  Outputs land in
``<runs_dir>/<command>-<hash>`` where the hash covers the resolved config,
so rerunning the same config targets the same directory.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from . import __version__
from .analysis import (AblationSpec, hyperparameter_sweep, importance_csv, item_importance_change, routing_drift,
                       run_ablation, sweep_csv, sweep_table)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (LogSchema, PreparedData, SyntheticConfig, dataset_stats, filter_and_truncate, generate_synthetic,
                   ingest_log, leave_one_out_split, read_dataset, write_dataset)
from .models import DyMuSPlus, ModelConfig, build_model
from .training import TrainConfig, eval_contexts, evaluate, train

log = logging.getLogger("dymus")

EXIT_RUNTIME = 1
EXIT_CONFIG = 2


class ConfigError(ValueError):
    """Invalid config; the message starts with the offending key path."""


# ---------------------------------------------------------------------------
# config schema
# ---------------------------------------------------------------------------

@dataclass
class SchemaSection:
    preset: str | None = None          # "taobao" or None for a custom mapping
    columns: dict[str, Any] = field(default_factory=dict)
    behavior_map: dict[str, str] | None = None
    delimiter: str = ","
    has_header: bool = False


@dataclass
class DataSection:
    source: str = "synthetic"          # synthetic | log | dataset
    path: str | None = None
    target_behavior: str = "purchase"
    min_target: int = 5
    recent_cap: int = 500
    cap_scope: str = "all"
    schema: SchemaSection = field(default_factory=SchemaSection)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


@dataclass
class ModelSection:
    kind: str = "dymus"
    embed_dim: int = 16
    capsule_len: int = 4
    routing_iters: int = 2
    dropout: float = 0.2
    seq_cap: int = 50
    integrator: str = "dynamic_routing"
    removed_behaviors: list[str] = field(default_factory=list)
    behavior_order: list[str] | None = None
    seed: int = 0


@dataclass
class TrainSection:
    learning_rate: float = 0.01
    l2: float = 0.0
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    sliding_window: bool = True
    eval_batch_size: int = 512


@dataclass
class EvalSection:
    ks: list[int] = field(default_factory=lambda: [10, 20])


@dataclass
class AblationEntry:
    integrator: str = "dynamic_routing"
    removed_behaviors: list[str] = field(default_factory=list)


@dataclass
class ImportanceSection:
    user: int = 0                      # row in the evaluation order
    behavior: str = "click"
    position: int = -1
    new_item: int | None = None        # None: an item from the category of the user's last purchase
    last_n: int = 5


@dataclass
class AnalysisSection:
    grid: dict[str, list[int]] = field(default_factory=lambda: {"capsule_len": [2, 4, 8, 16, 32],
                                                                "routing_iters": [1, 2, 3, 4]})
    workers: int = 1
    drift_top_n: int = 1000
    drift_iters: int | None = None
    ablations: list[AblationEntry] | None = None
    importance: ImportanceSection = field(default_factory=ImportanceSection)


@dataclass
class RunConfig:
    runs_dir: str = "runs"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self, command: str, extra: dict | None = None) -> str:
        payload = json.dumps({"command": command, "config": self.to_dict(), "extra": extra or {}},
                             sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


def _build(cls, raw: Any, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(raw).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in names:
            raise ConfigError(f"{where}: unknown key")
        sub = _NESTED.get((cls, key))
        if sub is not None and value is not None:
            if isinstance(value, list):
                value = [_build(sub, v, f"{where}[{i}]") for i, v in enumerate(value)]
            else:
                value = _build(sub, value, where)
        elif isinstance(value, list) and key in ("clicks", "targets", "auxiliary"):
            value = tuple(value)
        kwargs[key] = value
    try:
        obj = cls(**kwargs)
        if isinstance(obj, SyntheticConfig):
            obj.validate()
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{path or '<root>'}: {err}") from err
    return obj


_NESTED = {
    (RunConfig, "data"): DataSection, (RunConfig, "model"): ModelSection, (RunConfig, "train"): TrainSection,
    (RunConfig, "eval"): EvalSection, (RunConfig, "analysis"): AnalysisSection,
    (DataSection, "schema"): SchemaSection, (DataSection, "synthetic"): SyntheticConfig,
    (AnalysisSection, "ablations"): AblationEntry, (AnalysisSection, "importance"): ImportanceSection,
}


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"--config: file not found: {path}")
    raw = yaml.safe_load(path.read_text()) or {}
    config = _build(RunConfig, raw, "")
    _check_enums(config)
    return config


def _check_enums(config: RunConfig) -> None:
    d = config.data
    if d.source not in ("synthetic", "log", "dataset"):
        raise ConfigError(f"data.source: expected synthetic, log or dataset, got {d.source!r}")
    if d.source != "synthetic" and not d.path:
        raise ConfigError(f"data.path: required when data.source is {d.source!r}")
    if d.cap_scope not in ("all", "per_behavior"):
        raise ConfigError(f"data.cap_scope: expected 'all' or 'per_behavior', got {d.cap_scope!r}")
    if d.schema.preset not in (None, "taobao"):
        raise ConfigError(f"data.schema.preset: unknown preset {d.schema.preset!r}")
    try:
        TrainConfig(**_train_kwargs(config))
    except ValueError as err:
        raise ConfigError(f"train: {err}") from err


def _train_kwargs(config: RunConfig) -> dict:
    t = config.train
    return dict(learning_rate=t.learning_rate, l2=t.l2, batch_size=t.batch_size, max_epochs=t.max_epochs,
                patience=t.patience, eval_ks=list(config.eval.ks), seed=t.seed, sliding_window=t.sliding_window,
                eval_batch_size=t.eval_batch_size)


# ---------------------------------------------------------------------------
# plumbing shared by commands
# ---------------------------------------------------------------------------

def prepare_data(config: RunConfig) -> PreparedData:
    d = config.data
    if d.source == "dataset":
        path = Path(d.path)
        if not path.exists():
            raise FileNotFoundError(f"dataset file not found: {path}")
        return read_dataset(path)
    if d.source == "log":
        path = Path(d.path)
        if not path.exists():
            raise FileNotFoundError(f"log file not found: {path}")
        if d.schema.preset == "taobao":
            schema = LogSchema.taobao()
        else:
            schema = LogSchema(columns=dict(d.schema.columns), behavior_map=d.schema.behavior_map,
                               target_behavior=d.target_behavior, delimiter=d.schema.delimiter,
                               has_header=d.schema.has_header)
        records, stats = ingest_log(path, schema)
        log.info("ingested %d records (%d malformed, %d unknown behavior)", stats.records, stats.malformed,
                 stats.unknown_behavior)
    else:
        records = generate_synthetic(d.synthetic)
    return filter_and_truncate(records, d.target_behavior, d.min_target, d.recent_cap, d.cap_scope,
                               config.model.behavior_order)


def model_config(config: RunConfig, data_behaviors: list[str], item_count: int,
                 target_behavior: int = 0) -> ModelConfig:
    m = config.model
    removed = []
    for name in m.removed_behaviors:
        if name not in data_behaviors:
            raise ConfigError(f"model.removed_behaviors: unknown behavior {name!r}; have {data_behaviors}")
        removed.append(data_behaviors.index(name))
    try:
        return ModelConfig(item_count=item_count, behaviors=data_behaviors, kind=m.kind,
                           target_behavior=target_behavior, embed_dim=m.embed_dim, capsule_len=m.capsule_len,
                           routing_iters=m.routing_iters, dropout=m.dropout, seq_cap=m.seq_cap,
                           integrator=m.integrator, removed_behaviors=removed, seed=m.seed)
    except ValueError as err:
        raise ConfigError(f"model: {err}") from err


def run_dir(config: RunConfig, command: str, force: bool, extra: dict | None = None) -> Path:
    path = Path(config.runs_dir) / f"{command}-{config.digest(command, extra)}"
    if path.exists() and any(path.iterdir()) and not force:
        raise FileExistsError(f"run directory {path} already exists; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.json").write_text(json.dumps({"command": command, "config": config.to_dict(),
                                                  "extra": extra or {}}, indent=2, sort_keys=True, default=str))
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def _load_model(checkpoint: Path):
    meta, arrays = load_checkpoint(checkpoint)
    if "model" not in meta:
        raise ValueError(f"{checkpoint}: checkpoint has no model config")
    model = build_model(ModelConfig(**meta["model"]))
    model.load_state_dict(arrays)
    return meta, model


def _default_checkpoint(config: RunConfig) -> Path:
    return Path(config.runs_dir) / f"train-{config.digest('train')}" / "checkpoint.json"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_prepare(config: RunConfig, args) -> Path:
    data = prepare_data(config)
    out = run_dir(config, "prepare", args.force)
    write_dataset(out / "dataset.jsonl", data)
    stats = dataset_stats(data)
    _write_json(out / "stats.json", stats)
    print(json.dumps(stats, indent=2, sort_keys=True))
    return out


def cmd_train(config: RunConfig, args) -> Path:
    data = prepare_data(config)
    split = leave_one_out_split(data)
    mc = model_config(config, split.behaviors, split.item_count, split.target_behavior)
    tc = TrainConfig(**_train_kwargs(config))
    out = run_dir(config, "train", args.force)
    model = build_model(mc)
    epochs_path = out / "epochs.csv"
    with epochs_path.open("w", newline="") as fh:
        writer = None

        def on_epoch(record):
            nonlocal writer
            if writer is None:
                writer = csv.DictWriter(fh, fieldnames=list(record), lineterminator="\n")
                writer.writeheader()
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in record.items()})
            fh.flush()

        result = train(model, split, tc, on_epoch=on_epoch)
    meta = {"model": mc.to_dict(), "train": dataclasses.asdict(tc), "best_epoch": result.best_epoch,
            "validation": result.validation.as_flat(), "version": __version__}
    save_checkpoint(out / "checkpoint.json", model.state_dict(), meta)
    _write_json(out / "metrics.json", {"best_epoch": result.best_epoch, "stopped_epoch": result.stopped_epoch,
                                       "validation": result.validation.to_dict()})
    print(json.dumps({"run_dir": str(out), "best_epoch": result.best_epoch, **result.validation.as_flat()}))
    return out


def cmd_eval(config: RunConfig, args) -> Path:
    ckpt = Path(args.checkpoint) if args.checkpoint else _default_checkpoint(config)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    meta, model = _load_model(ckpt)
    split = leave_one_out_split(prepare_data(config))
    batch_size = meta.get("train", {}).get("eval_batch_size", config.train.eval_batch_size)
    val = evaluate(model, split, config.eval.ks, "validation", batch_size)
    test = evaluate(model, split, config.eval.ks, "test", batch_size)
    out = run_dir(config, "eval", args.force, {"checkpoint": str(ckpt)})
    report = {"checkpoint": str(ckpt), "validation": val.to_dict(), "test": test.to_dict()}
    _write_json(out / "eval.json", report)
    print(json.dumps({"run_dir": str(out), "validation": val.as_flat(), "test": test.as_flat()}))
    return out


def _ablation_specs(config: RunConfig, behaviors: list[str]) -> list[AblationSpec]:
    entries = config.analysis.ablations
    if entries is None:
        entries = [AblationEntry(), AblationEntry("sum"), AblationEntry("self_attention")]
        entries += [AblationEntry(removed_behaviors=[b]) for b in behaviors]
    specs = []
    for i, e in enumerate(entries):
        unknown = [b for b in e.removed_behaviors if b not in behaviors]
        if unknown:
            raise ConfigError(f"analysis.ablations[{i}].removed_behaviors: unknown behaviors {unknown}")
        try:
            spec = AblationSpec(e.integrator, frozenset(behaviors.index(b) for b in e.removed_behaviors))
            spec.check(len(behaviors))
            specs.append(spec)
        except ValueError as err:
            raise ConfigError(f"analysis.ablations[{i}]: {err}") from err
    return specs


def cmd_ablate(config: RunConfig, args) -> Path:
    split = leave_one_out_split(prepare_data(config))
    specs = _ablation_specs(config, split.behaviors)
    base = model_config(config, split.behaviors, split.item_count, split.target_behavior)
    tc = TrainConfig(**_train_kwargs(config))
    out = run_dir(config, "ablate", args.force)
    results = []
    for s in specs:
        r = run_ablation(s, base, split, tc)
        results.append(r.to_dict(split.behaviors))
        print(json.dumps({"spec": r.spec.to_dict(split.behaviors), **r.validation.as_flat()}))
    _write_json(out / "ablation.json", {"model_kind": base.kind, "runs": results})
    return out


def _related_item(split, context: dict) -> int:
    """An item sharing the category of the last target item, different from it when possible."""
    tb = split.target_behavior
    last = context[tb][-1]
    cats = split.item_categories
    if not cats or cats[last] is None:
        return int(last)
    same = [i for i, c in enumerate(cats) if c == cats[last] and i != last]
    return int(same[0]) if same else int(last)


def cmd_analyze(config: RunConfig, args) -> Path:
    ckpt = Path(args.checkpoint) if args.checkpoint else _default_checkpoint(config)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    _, model = _load_model(ckpt)
    data = prepare_data(config)
    split = leave_one_out_split(data)
    contexts, _ = eval_contexts(split, "test")
    users = [data.user_ids[h.user] for h in split.train]
    a = config.analysis
    out = run_dir(config, "analyze", args.force, {"checkpoint": str(ckpt)})
    summary: dict[str, Any] = {"checkpoint": str(ckpt)}
    if model.config.integrator == "dynamic_routing" and model.config.kind != "gru_baseline":
        iters = a.drift_iters or max(2, model.config.routing_iters)
        report = routing_drift(model, contexts, users, iters=iters, top_n=a.drift_top_n)
        (out / "drift.csv").write_text(report.to_csv())
        summary["drift"] = {"iterations": iters, "users": len(report.rows), "mean_total": report.mean_abs_rate()}
    if isinstance(model, DyMuSPlus) and model.config.routing_iters >= 2:
        imp = a.importance
        if imp.behavior not in split.behaviors:
            raise ConfigError(f"analysis.importance.behavior: unknown behavior {imp.behavior!r}")
        if not 0 <= imp.user < len(contexts):
            raise ConfigError(f"analysis.importance.user: row {imp.user} out of range")
        ctx = contexts[imp.user]
        new_item = imp.new_item if imp.new_item is not None else _related_item(split, ctx)
        rows = item_importance_change(model, ctx, split.behaviors.index(imp.behavior), imp.position, new_item,
                                      imp.last_n)
        (out / "importance.csv").write_text(importance_csv(rows))
        summary["importance"] = {"user": users[imp.user], "behavior": imp.behavior, "position": imp.position,
                                 "new_item": new_item, "rates": [r.rate for r in rows]}
    _write_json(out / "analysis.json", summary)
    print(json.dumps({"run_dir": str(out), **{k: v for k, v in summary.items() if k != "checkpoint"}}))
    return out


def cmd_sweep(config: RunConfig, args) -> Path:
    split = leave_one_out_split(prepare_data(config))
    base = model_config(config, split.behaviors, split.item_count, split.target_behavior)
    tc = TrainConfig(**_train_kwargs(config))
    try:
        grid = {k: [int(v) for v in vs] for k, vs in config.analysis.grid.items()}
    except (TypeError, ValueError) as err:
        raise ConfigError(f"analysis.grid: {err}") from err
    out = run_dir(config, "sweep", args.force)
    try:
        cells = hyperparameter_sweep(grid, base, split, tc, config.analysis.workers)
    except ValueError as err:
        raise ConfigError(f"analysis.grid: {err}") from err
    (out / "sweep.csv").write_text(sweep_csv(cells))
    _write_json(out / "sweep.json", sweep_table(cells))
    print(json.dumps(sweep_table(cells)))
    return out


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "analyze": cmd_analyze, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dymus", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON run config (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override model.seed and train.seed")
        p.add_argument("--runs-dir", help="override runs_dir")
        p.add_argument("--data", help="override data.path (source becomes 'dataset' for .jsonl files)")
        p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("eval", "analyze"):
            p.add_argument("--checkpoint", help="checkpoint.json from a train run")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config.model.seed = config.train.seed = args.seed
        if args.runs_dir:
            config.runs_dir = args.runs_dir
        if args.data:
            config.data.path = args.data
            if args.data.endswith(".jsonl"):
                config.data.source = "dataset"
            elif config.data.source == "synthetic":
                config.data.source = "log"
        COMMANDS[args.command](config, args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001 - every runtime failure becomes exit 1 with a message
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
