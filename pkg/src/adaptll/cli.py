"""Command-line pipeline: profile -> partition -> train -> evaluate -> export -> report.

Every command reads a JSON run configuration (``--config``) whose fields can
be overridden by flags, writes its artifacts under the configured output
directory with stable names, and records the effective configuration there.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
from dataclasses import dataclass, field

from .arch import parameter_count, resolve_network
from .data import load_cifar10, split, synth_dataset
from .errors import AdaptLLError, InputError, UsageError
from .exits import ExitEvaluation, compact_from, evaluate_exits, export_compact, inference_throughput, load_compact
from .partition import BlockPlan, partition
from .profiler import DEFAULT_PROBE_BATCHES, ProfileReport, profile_network
from .serialize import load_checkpoint, save_checkpoint
from .trainer import TrainSettings, train_bp_baseline, train_classic_ll_baseline, train_neuroflux

CONFIG_SCHEMA = "adaptll.config/1"
REPORT_SCHEMA_VERSION = 1
MODES = ("neuroflux", "bp", "classic_ll")
PROFILE_MODE = {"neuroflux": "aan", "classic_ll": "classic", "bp": "bp"}

# artifact names inside the output directory
CONFIG_FILE = "config.json"
PROFILE_FILE = "profile.json"
PLAN_FILE = "plan.json"
CHECKPOINT_FILE = "checkpoint.nfcm"
METRICS_FILE = "metrics.json"
TIMING_FILE = "timing.json"
EXITS_FILE = "exits.json"
COMPACT_FILE = "compact.nfcm"
EXPORT_FILE = "export.json"


@dataclass
class RunConfig:
    network: str = "vgg8"
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic", "classes": 4, "per_class": 100, "shape": [3, 32, 32], "seed": 0})
    mode: str = "neuroflux"
    budget_bytes: float = 32e6
    batch_limit: int = 512
    grouping_threshold: float = 0.4
    epochs: int = 1
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    output_dir: str = "run"
    exit_tolerance: float = 0.0
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    probe_batches: list = field(default_factory=lambda: list(DEFAULT_PROBE_BATCHES))
    shuffle_cache_chunks: bool = False

    def __post_init__(self) -> None:
        if self.budget_bytes <= 0:
            raise UsageError(f"budget_bytes must be > 0, got {self.budget_bytes}")
        if not 0 <= self.grouping_threshold < 1:
            raise UsageError(f"grouping_threshold must be in [0, 1), got {self.grouping_threshold}")
        if self.batch_limit < 1:
            raise UsageError(f"batch_limit must be >= 1, got {self.batch_limit}")
        if self.mode not in MODES:
            raise UsageError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.exit_tolerance < 0:
            raise UsageError("exit_tolerance must be >= 0")

    def to_dict(self) -> dict:
        return {"schema": CONFIG_SCHEMA, **dataclasses.asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        schema = d.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise InputError(f"expected config schema {CONFIG_SCHEMA!r}, got {schema!r}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def settings(self) -> TrainSettings:
        return TrainSettings(self.epochs, self.learning_rate, self.momentum, self.seed, self.shuffle_cache_chunks)

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_config(args) -> RunConfig:
    data = {}
    if args.config:
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
    for name in (
        "network", "mode", "budget_bytes", "batch_limit", "grouping_threshold", "epochs",
        "learning_rate", "momentum", "seed", "output_dir", "exit_tolerance",
    ):
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    cfg = RunConfig.from_dict(data)
    os.makedirs(cfg.output_dir, exist_ok=True)
    _write_json(cfg.path(CONFIG_FILE), cfg.to_dict())
    return cfg


def build_datasets(cfg: RunConfig):
    """Return (train, val, test) splits described by the configuration."""
    spec = dict(cfg.dataset)
    kind = spec.get("kind")
    if kind == "synthetic":
        full = synth_dataset(
            int(spec.get("classes", 4)),
            int(spec.get("per_class", 100)),
            tuple(spec.get("shape", (3, 32, 32))),
            int(spec.get("seed", 0)),
            float(spec.get("separation", 8.0)),
        )
        rest, test = split(full, cfg.test_fraction, cfg.seed, ("train", "test"))
    elif kind == "cifar10":
        paths = spec.get("paths") or []
        rest = load_cifar10(paths, spec.get("limit"))
        test_paths = spec.get("test_paths") or []
        test = load_cifar10(test_paths, spec.get("test_limit"), "test") if test_paths else None
        fold = spec.get("fold_classes")
        if fold:
            rest = rest.with_folded_classes(int(fold))
            test = test.with_folded_classes(int(fold)) if test is not None else None
    else:
        raise InputError(f"dataset kind must be 'synthetic' or 'cifar10', got {kind!r}")
    train, val = split(rest, cfg.val_fraction, cfg.seed)
    return train, val, test


def _network(cfg: RunConfig, train):
    net = resolve_network(cfg.network, train.class_count)
    if net.input_shape != train.sample_shape:
        raise InputError(f"network expects inputs {net.input_shape}, dataset provides {train.sample_shape}")
    return net


def cmd_profile(cfg: RunConfig, args) -> int:
    train, _, _ = build_datasets(cfg)
    net = _network(cfg, train)
    report = profile_network(net, PROFILE_MODE[cfg.mode], cfg.probe_batches, cfg.momentum, cfg.seed)
    report.save(cfg.path(PROFILE_FILE))
    print(f"profiled {len(report.models)} model(s) for {net.name} ({report.mode}) -> {cfg.path(PROFILE_FILE)}")
    return 0


def cmd_partition(cfg: RunConfig, args) -> int:
    report = ProfileReport.load(args.profile or cfg.path(PROFILE_FILE))
    plan = partition(report.models, cfg.budget_bytes, cfg.batch_limit, cfg.grouping_threshold)
    plan.save(cfg.path(PLAN_FILE))
    print(f"plan: {plan.describe()} -> {cfg.path(PLAN_FILE)}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    train, val, test = build_datasets(cfg)
    net = _network(cfg, train)
    settings = cfg.settings()
    if cfg.mode == "neuroflux":
        plan_path = args.plan or cfg.path(PLAN_FILE)
        plan = BlockPlan.load(plan_path) if os.path.exists(plan_path) else None
        result = train_neuroflux(
            net, train, cfg.budget_bytes, cfg.batch_limit, settings, val, test, cfg.grouping_threshold,
            plan=plan, probe_batches=cfg.probe_batches, work_dir=cfg.output_dir,
        )
        if plan is None:
            result.plan.save(cfg.path(PLAN_FILE))
        profile_mode = "aan"
    elif cfg.mode == "bp":
        result = train_bp_baseline(net, train, cfg.budget_bytes, cfg.batch_limit, settings, val, test, cfg.probe_batches)
        profile_mode = "bp"
    else:
        result = train_classic_ll_baseline(net, train, cfg.budget_bytes, cfg.batch_limit, settings, val, test, cfg.probe_batches)
        profile_mode = "classic"
    save_checkpoint(cfg.path(CHECKPOINT_FILE), net, result.params, profile_mode, {"run_mode": cfg.mode})
    result.metrics.save(cfg.path(METRICS_FILE), cfg.path(TIMING_FILE))
    m = result.metrics
    print(
        f"{cfg.mode}: blocks {result.plan.describe()}, sgd steps {m.total_sgd_steps}, "
        f"unit forwards {m.total_forward_evaluations}, max peak {m.max_peak_bytes} / budget {cfg.budget_bytes:.0f}"
    )
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    _, val, _ = build_datasets(cfg)
    net, params, mode, _ = load_checkpoint(args.checkpoint or cfg.path(CHECKPOINT_FILE))
    if mode == "bp":
        raise UsageError("a backpropagation checkpoint has no per-layer exits to evaluate")
    ev = evaluate_exits(net, params, val, cfg.exit_tolerance, mode)
    ev.save(cfg.path(EXITS_FILE))
    print(f"exit layer {ev.chosen_exit}: accuracy {ev.accuracies[ev.chosen_exit - 1]:.4f} -> {cfg.path(EXITS_FILE)}")
    return 0


def cmd_export(cfg: RunConfig, args) -> int:
    net, params, mode, _ = load_checkpoint(args.checkpoint or cfg.path(CHECKPOINT_FILE))
    ev = ExitEvaluation.load(args.exits or cfg.path(EXITS_FILE))
    compact = export_compact(cfg.path(COMPACT_FILE), net, params, ev, mode)
    full = compact_from(net, params, net.depth)
    payload = {
        "exit_layer": compact.exit_layer,
        "compact_parameters": compact.parameter_count(),
        "full_parameters": parameter_count(net, mode=mode),
        "validation_accuracy": ev.accuracies[ev.chosen_exit - 1],
    }
    payload["compression"] = payload["full_parameters"] / payload["compact_parameters"]
    _write_json(cfg.path(EXPORT_FILE), payload)
    if args.throughput:
        c = inference_throughput(compact, 32, args.repetitions)
        f = inference_throughput(full, 32, args.repetitions)
        print(f"throughput (samples/s, batch 32): compact {c:.1f}, full {f:.1f}, gain {c / f:.2f}x")
    print(f"exported layers 1..{compact.exit_layer}: {payload['compact_parameters']} parameters, {payload['compression']:.2f}x smaller")
    return 0


REPORT_COLUMNS = [
    "run", "mode", "blocks", "batch_sizes", "sgd_steps", "unit_forwards", "max_peak_bytes", "budget_bytes",
    "val_accuracy", "test_accuracy", "exit_layer", "exit_accuracy", "full_parameters", "compact_parameters", "compression",
]


def report_row(metrics_path: str) -> dict:
    with open(metrics_path) as fh:
        m = json.load(fh)
    base = os.path.dirname(os.path.abspath(metrics_path))
    row = {
        "run": os.path.basename(base),
        "mode": m["mode"],
        "blocks": len(m["blocks"]),
        "batch_sizes": "/".join(str(b["batch_size"]) for b in m["blocks"]),
        "sgd_steps": m["total_sgd_steps"],
        "unit_forwards": m["forward_unit_evaluations"],
        "max_peak_bytes": m["max_peak_bytes"],
        "budget_bytes": m["budget_bytes"],
        "val_accuracy": m["final_val_accuracy"][-1] if m["final_val_accuracy"] else "",
        "test_accuracy": m["test_accuracy"][-1] if m["test_accuracy"] else "",
        "exit_layer": "",
        "exit_accuracy": "",
        "full_parameters": m["parameter_count"],
        "compact_parameters": "",
        "compression": "",
    }
    checkpoint = os.path.join(base, CHECKPOINT_FILE)
    if os.path.exists(checkpoint):
        net, params, _, _ = load_checkpoint(checkpoint)
        row["full_parameters"] = sum(p.size for lp in params for p in lp.unit_list()) + sum(
            p.size for p in params[-1].head_list()
        )
    compact_path = os.path.join(base, COMPACT_FILE)
    if os.path.exists(compact_path):
        compact = load_compact(compact_path)
        row["exit_layer"] = compact.exit_layer
        row["exit_accuracy"] = compact.metadata.get("validation_accuracy", "")
        row["compact_parameters"] = compact.parameter_count()
        row["compression"] = round(row["full_parameters"] / row["compact_parameters"], 4)
    return row


def comparison_lines(rows) -> list[str]:
    by_mode = {r["mode"]: r for r in rows}
    nf, cl = by_mode.get("neuroflux"), by_mode.get("classic_ll")
    if nf is None or cl is None:
        return []
    lines = []
    for key, label in (("sgd_steps", "SGD steps"), ("unit_forwards", "unit forward evaluations")):
        holds = nf[key] < cl[key]
        lines.append(f"{label}: neuroflux {nf[key]} < classic_ll {cl[key]}: {'yes' if holds else 'no'}")
    return lines


def cmd_report(args) -> int:
    rows = [report_row(p) for p in args.metrics]
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in REPORT_COLUMNS}
    out = [f"# report schema {REPORT_SCHEMA_VERSION}"]
    out.append("  ".join(c.ljust(widths[c]) for c in REPORT_COLUMNS))
    for r in rows:
        out.append("  ".join(str(r[c]).ljust(widths[c]) for c in REPORT_COLUMNS))
    out += comparison_lines(rows)
    print("\n".join(out))
    if args.csv:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        with open(args.csv, "w") as fh:
            fh.write(buf.getvalue())
    return 0


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--network")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--budget-bytes", dest="budget_bytes", type=float)
    p.add_argument("--batch-limit", dest="batch_limit", type=int)
    p.add_argument("--grouping-threshold", dest="grouping_threshold", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--exit-tolerance", dest="exit_tolerance", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptll", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("profile", "partition", "train", "evaluate", "export"):
        p = sub.add_parser(name)
        _add_config_flags(p)
        if name == "partition":
            p.add_argument("--profile", help="profile report (default: <output_dir>/profile.json)")
        if name == "train":
            p.add_argument("--plan", help="block plan (default: <output_dir>/plan.json, computed if absent)")
        if name in ("evaluate", "export"):
            p.add_argument("--checkpoint")
        if name == "export":
            p.add_argument("--exits")
            p.add_argument("--throughput", action="store_true", help="also time compact vs full inference")
            p.add_argument("--repetitions", type=int, default=20)
    p = sub.add_parser("report")
    p.add_argument("metrics", nargs="+", help="metrics.json files")
    p.add_argument("--csv", help="write the table as CSV")
    return parser


COMMANDS = {
    "profile": cmd_profile,
    "partition": cmd_partition,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "export": cmd_export,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args)
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args)
    except AdaptLLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
