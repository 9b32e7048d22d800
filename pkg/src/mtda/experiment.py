"""Replicated runs, ablation grids and comparison tables."""
from __future__ import annotations

import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .checkpoint import checkpoint_save
from .data import DomainDataset, load_dataset
from .errors import ConfigurationError
from .metrics import MetricsReport, build_report
from .trainer import RunLog, TrainConfig, order_permutations, run_training

log = logging.getLogger(__name__)

GRIDS = ("fusion", "order", "splits", "consistency", "teacher_count")


@dataclass
class DataBundle:
    """Labeled source, unlabeled training targets and labeled target eval splits."""

    source: DomainDataset
    targets: List[DomainDataset]
    eval_sets: List[DomainDataset]

    def __post_init__(self):
        if len(self.targets) != len(self.eval_sets):
            raise ConfigurationError(f"{len(self.targets)} targets but {len(self.eval_sets)} eval splits")
        self.targets = [t if t.role == "target" else t.as_target() for t in self.targets]
        for e in self.eval_sets:
            if not e.has_labels:
                raise ConfigurationError(f"eval split {e.domain_id!r} carries no labels")

    @property
    def target_ids(self) -> List[str]:
        return [t.domain_id for t in self.eval_sets]

    @classmethod
    def from_paths(cls, source, targets: Sequence, eval_sets: Sequence) -> "DataBundle":
        return cls(load_dataset(source, role="source"),
                   [load_dataset(p, role="target") for p in targets],
                   [load_dataset(p, role="target") for p in eval_sets])

    @classmethod
    def from_root(cls, root) -> "DataBundle":
        """Read the layout written by ``generate-data`` (``manifest.json`` at the root)."""
        root = Path(root)
        manifest = json.loads((root / "manifest.json").read_text())
        return cls.from_paths(root / manifest["source"]["train"],
                              [root / d["train"] for d in manifest["targets"]],
                              [root / d["eval"] for d in manifest["targets"]])


def replication_seeds(seed: int, replications: int) -> List[int]:
    return [seed + r for r in range(replications)]


def summarize(reports: Sequence[MetricsReport]) -> dict:
    """Mean and sample std of each per-target accuracy and of both aggregates."""
    if not reports:
        raise ValueError("no reports to summarize")
    ids = [t.domain_id for t in reports[0].per_target]

    def stat(values):
        values = [float(v) for v in values]
        sd = statistics.stdev(values) if len(values) > 1 else 0.0
        return {"mean": math.fsum(values) / len(values), "std": sd, "values": values}

    return {
        "replications": len(reports),
        "per_target": {d: stat(r.per_target[j].accuracy for r in reports) for j, d in enumerate(ids)},
        "equal_weight": stat(r.equal_weight for r in reports),
        "weighted": stat(r.weighted for r in reports),
    }


def run_once(config: TrainConfig, data: DataBundle, out_dir=None, *, tag: str = "",
             step_records: bool = False, checkpoint_every_epoch: bool = True,
             evaluate_teachers: bool = False, state_hook: Optional[Callable] = None) -> MetricsReport:
    """Train one replication, write its artifacts under ``out_dir`` and return the final report."""
    out = Path(out_dir) if out_dir is not None else None
    if out:
        (out / f"run_log{tag}.jsonl").unlink(missing_ok=True)
    run_log = RunLog(out / f"run_log{tag}.jsonl" if out else None, step_records=step_records)
    ckpt = out / "checkpoints" / f"last{tag}.ckpt" if out else None
    on_epoch = (lambda st: checkpoint_save(st, ckpt)) if (ckpt and checkpoint_every_epoch) else None
    try:
        state = run_training(config, data.source, data.targets, data.eval_sets, run_log,
                             on_epoch=on_epoch, evaluate_teachers=evaluate_teachers)
    finally:
        run_log.close()
    if ckpt:
        checkpoint_save(state, ckpt)
    if state_hook is not None:
        state_hook(state)
    report = build_report(state, data.eval_sets)
    if out:
        report.save(out / "reports" / f"report{tag}.json")
    return report


def run_replications(config: TrainConfig, data: DataBundle, replications: int = 3, out_dir=None,
                     **kwargs) -> tuple:
    """``replications`` runs with consecutive seeds; returns ``(reports, summary)``."""
    reports = []
    for seed in replication_seeds(config.seed, replications):
        cfg = config.replace(seed=seed)
        reports.append(run_once(cfg, data, out_dir, tag=f"-seed{seed}", **kwargs))
    summary = summarize(reports)
    if out_dir is not None:
        path = Path(out_dir) / "summary.json"
        path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return reports, summary


# --------------------------------------------------------------------- ablation


@dataclass
class Variant:
    name: str
    config: TrainConfig


def grid_variants(grid: str, config: TrainConfig, n_targets: int,
                  splits: Sequence[int] = (1, 2, 3, 4)) -> List[Variant]:
    """Rows of an ablation grid; every row shares seeds and hyper-parameters with ``config``."""
    base = config.replace(mode="mt_mtda", target_order=None, k_splits=None)
    if grid == "fusion":
        return [Variant("mean", base.replace(mode="fusion_mean")),
                Variant("sum", base.replace(mode="fusion_sum")),
                Variant("alternating", base)]
    if grid == "order":
        return [Variant("order " + ",".join(str(i) for i in p), base.replace(target_order=p))
                for p in order_permutations(n_targets)]
    if grid == "splits":
        return [Variant(f"k={k}", base.replace(mode="mt_mtda_mixed", k_splits=int(k))) for k in splits]
    if grid == "consistency":
        return [Variant("with CST", base), Variant("without CST", base.replace(consistency_enabled=False))]
    if grid == "teacher_count":
        return [Variant("single teacher (mixed)", base.replace(mode="single_teacher_mixed")),
                Variant("multi teacher", base)]
    raise ConfigurationError(f"unknown grid {grid!r}; expected one of {GRIDS}")


@dataclass
class AblationTable:
    grid: str
    target_ids: List[str]
    rows: Dict[str, dict] = field(default_factory=dict)

    def add(self, name: str, reports: Sequence[MetricsReport]) -> None:
        self.rows[name] = summarize(reports)

    def averages(self) -> Dict[str, float]:
        return {name: row["equal_weight"]["mean"] for name, row in self.rows.items()}

    def column_std(self) -> Dict[str, float]:
        """Std across rows of each target column and of the average (order grid)."""
        out = {}
        for d in self.target_ids:
            vals = [r["per_target"][d]["mean"] for r in self.rows.values()]
            out[d] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        avgs = list(self.averages().values())
        out["average"] = float(np.std(avgs, ddof=1)) if len(avgs) > 1 else 0.0
        return out

    def to_dict(self) -> dict:
        rows = [{"variant": name, **row} for name, row in self.rows.items()]
        d = {"grid": self.grid, "target_ids": self.target_ids, "rows": rows}
        if self.grid == "order":
            d["stdev"] = self.column_std()
        return d

    def render(self) -> str:
        """Plain-text table: rows are variants, columns are targets and the average."""
        head = ["variant"] + self.target_ids + ["average", "std"]
        lines = [head]
        for name, row in self.rows.items():
            cells = [name] + [f"{row['per_target'][d]['mean']:.1f}" for d in self.target_ids]
            cells += [f"{row['equal_weight']['mean']:.1f}", f"{row['equal_weight']['std']:.1f}"]
            lines.append(cells)
        if self.grid == "order":
            sd = self.column_std()
            lines.append(["STDev"] + [f"{sd[d]:.1f}" for d in self.target_ids] + [f"{sd['average']:.1f}", ""])
        widths = [max(len(r[j]) for r in lines) for j in range(len(head))]
        fmt = lambda r: "  ".join(c.ljust(w) if j == 0 else c.rjust(w) for j, (c, w) in enumerate(zip(r, widths)))
        out = [fmt(lines[0]), "  ".join("-" * w for w in widths)] + [fmt(r) for r in lines[1:]]
        return "\n".join(out) + "\n"


def run_ablation(grid: str, config: TrainConfig, data: DataBundle, replications: int = 3, out_dir=None,
                 splits: Sequence[int] = (1, 2, 3, 4), **kwargs) -> AblationTable:
    table = AblationTable(grid, data.target_ids)
    for v in grid_variants(grid, config, len(data.targets), splits):
        v.config.validate_targets(len(data.targets))
        sub = Path(out_dir) / _slug(v.name) if out_dir is not None else None
        log.info("ablation %s: %s", grid, v.name)
        reports, _ = run_replications(v.config, data, replications, sub, **kwargs)
        table.add(v.name, reports)
    if out_dir is not None:
        out = Path(out_dir)
        (out / f"ablation_{grid}.json").write_text(json.dumps(table.to_dict(), indent=2, sort_keys=True) + "\n")
        (out / f"ablation_{grid}.txt").write_text(table.render())
    return table


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name).strip("_")


# ------------------------------------------------------------ data generation


def generate_domains(base: DomainDataset, shifts: Sequence, out_dir, seed: int = 0,
                     eval_fraction: float = 0.1) -> dict:
    """Write the source and one shifted domain per spec, each with a train/eval split.

    The base is cut into ``1 + len(shifts)`` disjoint slices so no image appears
    in two domains. Returns the manifest that is also written to ``manifest.json``.
    """
    from .data import generate_shifted_domain, save_dataset, train_eval_split

    out = Path(out_dir)
    n_parts = 1 + len(shifts)
    if base.size < 2 * n_parts:
        raise ConfigurationError(f"base has {base.size} samples, too few for {n_parts} domains")
    perm = np.random.default_rng([seed, base.size]).permutation(base.size)
    slices = np.array_split(perm, n_parts)
    src = base.subset(np.sort(slices[0]), domain_id=base.domain_id).as_source()
    manifest = {"format": "mtda-manifest", "version": 1, "seed": seed, "eval_fraction": eval_fraction}
    tr, ev = train_eval_split(src, eval_fraction, seed)
    save_dataset(tr, out / "source" / "train")
    save_dataset(ev, out / "source" / "eval")
    manifest["source"] = {"domain_id": src.domain_id, "train": "source/train", "eval": "source/eval"}
    manifest["targets"] = []
    for j, spec in enumerate(shifts):
        part = base.subset(np.sort(slices[j + 1]), domain_id=base.domain_id)
        dom = generate_shifted_domain(part, spec)
        tr, ev = train_eval_split(dom, eval_fraction, seed + j + 1)
        name = dom.domain_id
        save_dataset(tr.without_labels(), out / name / "train")
        save_dataset(ev, out / name / "eval")
        manifest["targets"].append({"domain_id": name, "shift": spec.to_dict(),
                                    "train": f"{name}/train", "eval": f"{name}/eval"})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
