"""Command line: generate-data, train, evaluate, ablate, export-features.

Configuration is a YAML document with up to four sections::

    train:    TrainConfig fields (mode, epochs, batch_size, tau, ...)
    data:     root | source/targets/eval paths, plus generation settings
    run:      replications, out
    ablate:   splits

Unknown sections or keys are rejected. Command-line flags override file
values, and the resolved document is always written to ``<out>/config.yaml``.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import runtime
from .checkpoint import checkpoint_load, checkpoint_save
from .data import DomainDataset, DomainShiftSpec, load_dataset, load_idx_dataset, synthesize_digits
from .errors import CheckpointError, ConfigurationError, DivergenceError, FormatError, MTDAError
from .experiment import GRIDS, DataBundle, generate_domains, run_ablation, run_replications, summarize
from .metrics import build_report, export_features
from .trainer import TrainConfig, RunLog, resume_training

log = logging.getLogger("mtda")

DATA_KEYS = {"root", "source", "targets", "eval", "base", "base_labels", "n", "image_size", "channels",
             "shifts", "eval_fraction", "seed"}
RUN_KEYS = {"replications", "out", "step_records"}
ABLATE_KEYS = {"splits"}
SHIFT_KEYS = {"transform_kind", "strength", "seed"}

DEFAULTS = {
    "train": TrainConfig().to_dict(),
    "data": {"base": "synthetic", "n": 6000, "image_size": 12, "channels": 3, "shifts": [],
             "eval_fraction": 0.1, "seed": 0},
    "run": {"replications": 3, "out": "runs/latest", "step_records": False},
    "ablate": {"splits": [1, 2, 3, 4]},
}
SECTIONS = {"train": set(DEFAULTS["train"]), "data": DATA_KEYS, "run": RUN_KEYS, "ablate": ABLATE_KEYS}

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 2, 1


def load_config(path=None) -> dict:
    """Defaults overlaid with the YAML file at ``path``; unknown keys raise."""
    doc = copy.deepcopy(DEFAULTS)
    if path is None:
        return doc
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    for section, body in raw.items():
        if section not in SECTIONS:
            raise ConfigurationError(f"{path}: unknown section {section!r}")
        body = body or {}
        unknown = sorted(set(body) - SECTIONS[section])
        if unknown:
            raise ConfigurationError(f"{path}: unknown key(s) in [{section}]: {', '.join(unknown)}")
        doc[section].update(body)
    return doc


def apply_flags(doc: dict, args) -> dict:
    for flag, (section, key) in {"seed": ("train", "seed"), "mode": ("train", "mode"), "epochs": ("train", "epochs"),
                                 "replications": ("run", "replications"), "out": ("run", "out")}.items():
        value = getattr(args, flag, None)
        if value is not None:
            doc[section][key] = value
    return doc


def parse_shift(item) -> DomainShiftSpec:
    """``kind:strength[:seed]`` or a mapping with the same fields."""
    if isinstance(item, str):
        parts = item.split(":")
        if not 1 <= len(parts) <= 3:
            raise ConfigurationError(f"shift {item!r}: expected kind[:strength[:seed]]")
        try:
            strength = float(parts[1]) if len(parts) > 1 else 1.0
            seed = int(parts[2]) if len(parts) > 2 else 0
        except ValueError:
            raise ConfigurationError(f"shift {item!r}: strength must be a number and seed an integer") from None
        return DomainShiftSpec(parts[0], strength, seed)
    if isinstance(item, dict):
        unknown = sorted(set(item) - SHIFT_KEYS)
        if unknown:
            raise ConfigurationError(f"shift {item}: unknown key(s) {', '.join(unknown)}")
        return DomainShiftSpec(**item)
    raise ConfigurationError(f"shift {item!r}: expected a string or a mapping")


def train_config(doc: dict) -> TrainConfig:
    return TrainConfig.from_dict(doc["train"])


def data_bundle(doc: dict) -> DataBundle:
    d = doc["data"]
    if d.get("root"):
        return DataBundle.from_root(d["root"])
    if d.get("source") and d.get("targets") and d.get("eval"):
        return DataBundle.from_paths(d["source"], d["targets"], d["eval"])
    raise ConfigurationError("data: set 'root' (a generate-data directory) or 'source', 'targets' and 'eval'")


def echo_config(doc: dict, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.yaml"
    path.write_text(yaml.safe_dump(doc, sort_keys=True))
    return path


# --------------------------------------------------------------------- commands


def cmd_generate_data(args) -> int:
    doc = apply_flags(load_config(args.config), args)
    d = doc["data"]
    if args.shift:
        d["shifts"] = list(args.shift)
    if args.seed is not None:
        d["seed"] = args.seed
    specs = [parse_shift(s) for s in d["shifts"]]
    if not specs:
        raise ConfigurationError("data.shifts: at least one shift is required")
    if d["base"] == "synthetic":
        base = synthesize_digits(int(d["n"]), int(d["image_size"]), int(d["channels"]), seed=int(d["seed"]))
    else:
        base = load_idx_dataset(d["base"], d.get("base_labels"), domain_id=Path(d["base"]).stem.split(".")[0])
        if base.role != "source":
            raise ConfigurationError("data.base_labels: a labeled base is required")
        if base.image_shape[-1] != d["channels"]:
            base = DomainDataset(np.repeat(base.samples, d["channels"], axis=-1), base.labels, base.domain_id,
                                 base.num_classes, "source")
    out = Path(doc["run"]["out"])
    manifest = generate_domains(base, specs, out, seed=int(d["seed"]), eval_fraction=float(d["eval_fraction"]))
    echo_config(doc, out)
    for t in manifest["targets"]:
        print(t["domain_id"])
    return EXIT_OK


def cmd_train(args) -> int:
    doc = apply_flags(load_config(args.config), args)
    out = Path(doc["run"]["out"])
    data = data_bundle(doc)
    if args.resume:
        state = checkpoint_load(args.resume)
        log.info("resuming %s at epoch %d", args.resume, state.epoch)
        doc["train"] = state.config.to_dict()
        echo_config(doc, out)
        tag = f"-seed{state.config.seed}"
        ckpt = out / "checkpoints" / f"last{tag}.ckpt"
        run_log = RunLog(out / f"run_log{tag}.jsonl", step_records=doc["run"]["step_records"])
        try:
            state = resume_training(state, data.source, data.targets, data.eval_sets, run_log,
                                    on_epoch=lambda st: checkpoint_save(st, ckpt), evaluate_teachers=False)
        finally:
            run_log.close()
        checkpoint_save(state, ckpt)
        report = build_report(state, data.eval_sets)
        report.save(out / "reports" / f"report{tag}.json")
        print(json.dumps(summarize([report]), sort_keys=True))
        return EXIT_OK
    config = train_config(doc)
    config.validate_targets(len(data.targets))
    echo_config(doc, out)
    _, summary = run_replications(config, data, int(doc["run"]["replications"]), out,
                                  step_records=bool(doc["run"]["step_records"]))
    ew = summary["equal_weight"]
    print(f"equal-weight accuracy {ew['mean']:.1f} +- {ew['std']:.1f} over {summary['replications']} replications")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    state = checkpoint_load(args.checkpoint)
    eval_sets = [load_dataset(p) for p in args.eval]
    for e in eval_sets:
        if not e.has_labels:
            raise argparse.ArgumentTypeError(f"{e.domain_id}: eval split has no labels")
    report = build_report(state, eval_sets, {"checkpoint": str(args.checkpoint)})
    if args.out:
        report.save(args.out)
    sys.stdout.write(report.to_json())
    return EXIT_OK


def cmd_ablate(args) -> int:
    doc = apply_flags(load_config(args.config), args)
    out = Path(doc["run"]["out"])
    data = data_bundle(doc)
    config = train_config(doc)
    echo_config(doc, out)
    table = run_ablation(args.grid, config, data, int(doc["run"]["replications"]), out,
                         splits=doc["ablate"]["splits"], step_records=bool(doc["run"]["step_records"]))
    sys.stdout.write(table.render())
    return EXIT_OK


def cmd_export_features(args) -> int:
    state = checkpoint_load(args.checkpoint)
    if args.network == "student":
        net = state.student.net
    else:
        idx = int(args.network.split(":", 1)[1]) if ":" in args.network else 0
        if not 0 <= idx < len(state.teachers):
            raise ConfigurationError(f"checkpoint holds {len(state.teachers)} teachers, asked for {idx}")
        net = state.teachers[idx].net
    export_features(net, load_dataset(args.dataset), args.out)
    print(args.out)
    return EXIT_OK


# ----------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtda", description="Multi-target domain adaptation with distillation.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)

    def run_flags(sp):
        sp.add_argument("--mode")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--replications", type=int)

    g = sub.add_parser("generate-data", help="write source and shifted target domains")
    common(g)
    g.add_argument("--shift", action="append", help="kind[:strength[:seed]]; repeatable")
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train in the configured mode")
    common(t)
    run_flags(t)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="report accuracies of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--eval", nargs="+", required=True, help="labeled dataset directories")
    e.add_argument("--out", help="write the report here as well")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="run an ablation grid and print the comparison table")
    common(a)
    run_flags(a)
    a.add_argument("--grid", required=True, choices=GRIDS)
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export-features", help="write penultimate features as CSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--dataset", required=True)
    x.add_argument("--network", default="student", help="student or teacher:<index>")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_features)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    runtime.configure()
    try:
        return args.func(args)
    except argparse.ArgumentTypeError as exc:
        parser.error(str(exc))
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except AssertionError as exc:
        print(f"error: invariant violated: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (MTDAError, FormatError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
