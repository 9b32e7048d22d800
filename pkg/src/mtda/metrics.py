"""Per-target accuracy, aggregate scores, domain-shift diagnostic and exports."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .data import DomainDataset
from .errors import NumericError
from .models import predict

REPORT_SCHEMA = "mtda-report"
REPORT_SCHEMA_VERSION = 1


def per_target_accuracy(net, eval_sets: Sequence[DomainDataset]) -> List[float]:
    """Percentage of correct argmax predictions on each labeled eval set."""
    out = []
    for ds in eval_sets:
        labels = ds.eval_labels
        pred = predict(net, torch.from_numpy(np.array(ds.samples)))
        out.append(100.0 * float(np.count_nonzero(pred == labels)) / ds.size)
    return out


def equal_weight_accuracy(accs: Sequence[float]) -> float:
    if len(accs) == 0:
        raise ValueError("no accuracies to average")
    return math.fsum(accs) / len(accs)


def weighted_accuracy(accs: Sequence[float], counts: Sequence[int]) -> float:
    """Accuracies weighted by sample share ``N_i / sum(N)``."""
    if len(accs) != len(counts):
        raise ValueError(f"{len(accs)} accuracies but {len(counts)} counts")
    if len(accs) == 0:
        raise ValueError("no accuracies to average")
    if any(c <= 0 for c in counts):
        raise ValueError("counts must be positive")
    total = math.fsum(counts)
    return math.fsum(a * (c / total) for a, c in zip(accs, counts))


def cosine_domain_shift(features_source, features_target) -> float:
    """``1 - cos`` between the source and target feature centroids."""
    a = np.asarray(features_source, dtype=np.float64)
    b = np.asarray(features_target, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("feature matrices must be 2-D with the same width")
    if len(a) == 0 or len(b) == 0:
        raise ValueError("feature matrices must be non-empty")
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    na, nb = np.linalg.norm(ca), np.linalg.norm(cb)
    if na == 0 or nb == 0:
        raise NumericError("zero-norm centroid; cosine is undefined")
    cos = float(np.dot(ca, cb) / (na * nb))
    return float(np.clip(1.0 - cos, 0.0, 2.0))


def extract_features(net, dataset: DomainDataset, batch_size: int = 512) -> np.ndarray:
    was_training = net.training
    net.eval()
    chunks = []
    try:
        with torch.no_grad():
            x = torch.from_numpy(np.array(dataset.samples))
            for start in range(0, dataset.size, batch_size):
                chunks.append(net.features(x[start : start + batch_size]).cpu().numpy())
    finally:
        net.train(was_training)
    return np.concatenate(chunks).astype(np.float64)


def export_features(net, dataset: DomainDataset, path) -> Path:
    """CSV with header ``domain_id,label,f0..f{F-1}``; one row per sample in dataset order.

    The label column is empty when the dataset carries no labels.
    """
    if dataset.size == 0:
        raise ValueError("dataset is empty")
    feats = extract_features(net, dataset)
    labels = dataset.labels
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain_id", "label"] + [f"f{j}" for j in range(feats.shape[1])])
        for k, row in enumerate(feats):
            label = "" if labels is None else int(labels[k])
            w.writerow([dataset.domain_id, label] + [repr(float(v)) for v in row])
    return path


def read_features(path):
    """Inverse of :func:`export_features`: ``(domain_ids, labels, features)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    ids = [r[0] for r in body]
    labels = [None if r[1] == "" else int(r[1]) for r in body]
    feats = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64)
    return ids, labels, feats


@dataclass
class TargetAccuracy:
    domain_id: str
    accuracy: float
    count: int


@dataclass
class MetricsReport:
    per_target: List[TargetAccuracy]
    equal_weight: float
    weighted: float
    teacher_accuracies: Optional[List[dict]] = None
    run_metadata: dict = field(default_factory=dict)

    @property
    def weights_uniform(self) -> bool:
        return len({t.count for t in self.per_target}) <= 1

    def check(self, tol: float = 1e-9) -> None:
        """Raise ``AssertionError`` if an aggregate invariant is broken."""
        accs = [t.accuracy for t in self.per_target]
        counts = [t.count for t in self.per_target]
        if not accs:
            return
        assert abs(self.equal_weight - equal_weight_accuracy(accs)) <= tol
        assert abs(self.weighted - weighted_accuracy(accs, counts)) <= tol
        lo, hi = min(accs) - tol, max(accs) + tol
        assert lo <= self.equal_weight <= hi and lo <= self.weighted <= hi

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "schema_version": REPORT_SCHEMA_VERSION,
            "per_target": [asdict(t) for t in self.per_target],
            "equal_weight": self.equal_weight,
            "weighted": self.weighted,
            "weights_uniform": self.weights_uniform,
            "teacher_accuracies": self.teacher_accuracies,
            "run_metadata": self.run_metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        if d.get("schema") != REPORT_SCHEMA or d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema')!r} v{d.get('schema_version')}")
        return cls(
            per_target=[TargetAccuracy(**t) for t in d["per_target"]],
            equal_weight=d["equal_weight"],
            weighted=d["weighted"],
            teacher_accuracies=d.get("teacher_accuracies"),
            run_metadata=d.get("run_metadata", {}),
        )

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def report_from_accuracies(domain_ids, accs, counts, teacher_accuracies=None, metadata=None) -> MetricsReport:
    per_target = [TargetAccuracy(d, float(a), int(c)) for d, a, c in zip(domain_ids, accs, counts)]
    if accs:
        eq, wt = equal_weight_accuracy(accs), weighted_accuracy(accs, counts)
    else:
        eq = wt = float("nan")
    report = MetricsReport(per_target, eq, wt, teacher_accuracies, dict(metadata or {}))
    report.check()
    return report


def build_report(state, eval_sets: Sequence[DomainDataset], metadata: Optional[dict] = None) -> MetricsReport:
    """Evaluate the student (and every teacher) of ``state`` on the eval sets."""
    accs = per_target_accuracy(state.student.net, eval_sets)
    teachers = None
    if state.teachers:
        teachers = []
        for i, t in enumerate(state.teachers):
            t_accs = per_target_accuracy(t.net, eval_sets)
            bound = state.target_ids[i] if i < len(state.target_ids) else f"teacher-{i}"
            teachers.append({"teacher": i, "adapted_to": bound, "accuracies": t_accs})
    meta = {
        "config": state.config.to_dict(),
        "seed": state.config.seed,
        "epochs_completed": state.epoch,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    meta.update(metadata or {})
    return report_from_accuracies([d.domain_id for d in eval_sets], accs, [d.size for d in eval_sets], teachers, meta)
