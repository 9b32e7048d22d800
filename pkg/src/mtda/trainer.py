"""Alternating multi-teacher training and the baseline modes.

One teacher (network + domain classifier + SGD optimizer) is built per
(pseudo-)target and a single student (network + domain classifier + SGD
optimizer) is shared. For every source batch the teachers are visited in the
configured order; each visit performs three separate optimizer steps:

1. teacher ``i`` minimises ``(1 - beta) * L_DA`` on ``(x_s, x_t^i)``;
2. the student minimises ``beta * L_KD_source`` on ``x_s``;
3. the student minimises ``beta * L_KD_target`` on ``x_t^i``.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from . import runtime
from .data import BatchPlan, DomainDataset, batch_indices, split_mixed_targets
from .errors import ConfigurationError, DivergenceError, NumericError
from .losses import (
    KD_STYLES,
    LossWeights,
    combined_teacher_objective,
    cross_entropy,
    kd_source_loss,
    kd_target_loss,
    teacher_da_loss,
    teacher_logits_for,
)
from .metrics import equal_weight_accuracy, per_target_accuracy, weighted_accuracy
from .models import PRESETS, ClassifierNetwork, DomainClassifier, build_backbone, channel_stats
from .schedule import GRANULARITIES, BetaSchedule

log = logging.getLogger(__name__)

MODES = ("mt_mtda", "mt_mtda_mixed", "single_teacher_mixed", "fusion_sum", "fusion_mean", "source_only")
DIVERGENCE_LIMIT = 1e6


@dataclass
class TrainConfig:
    mode: str = "mt_mtda"
    epochs: int = 100
    batch_size: int = 64
    tau: float = 20.0
    gamma: float = 0.5
    alpha: float = 0.5
    s: float = 0.1
    f: float = 0.8
    uda_learning_rate: float = 0.0005
    kd_learning_rate: float = 0.0005
    weight_decay: float = 0.0005
    momentum: float = 0.9
    seed: int = 0
    k_splits: Optional[int] = None
    target_order: Optional[List[int]] = None
    consistency_enabled: bool = True
    beta_granularity: str = "epoch"
    distill_updates_teacher: bool = False
    kd_style: str = "paper"
    grl_lambda: float = 1.0
    grad_clip_norm: Optional[float] = None
    student_preset: str = "student_compact"
    teacher_preset: str = "teacher_wide"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be positive")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2")
        for name in ("uda_learning_rate", "kd_learning_rate"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.weight_decay < 0 or self.momentum < 0:
            raise ConfigurationError("weight_decay and momentum must be nonnegative")
        if self.beta_granularity not in GRANULARITIES:
            raise ConfigurationError(f"beta_granularity must be one of {GRANULARITIES}")
        if self.kd_style not in KD_STYLES:
            raise ConfigurationError(f"kd_style must be one of {KD_STYLES}")
        if self.student_preset not in PRESETS or self.teacher_preset not in PRESETS:
            raise ConfigurationError(f"presets must be among {PRESETS}")
        if self.grl_lambda < 0:
            raise ConfigurationError("grl_lambda must be nonnegative")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0:
            raise ConfigurationError("grad_clip_norm must be positive when set")
        if self.mode == "mt_mtda_mixed" and (self.k_splits is None or self.k_splits < 1):
            raise ConfigurationError("mt_mtda_mixed requires k_splits >= 1")
        if self.target_order is not None:
            self.target_order = [int(i) for i in self.target_order]
        # validates the numeric ranges
        self.weights
        self.schedule

    @property
    def weights(self) -> LossWeights:
        return LossWeights(gamma=self.gamma, alpha=self.alpha, tau=self.tau)

    @property
    def schedule(self) -> BetaSchedule:
        return BetaSchedule(self.s, self.f, self.epochs, self.beta_granularity)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def validate_targets(self, n_targets: int) -> None:
        if self.mode != "source_only" and n_targets < 1:
            raise ConfigurationError(f"mode {self.mode} needs at least one target")
        if self.mode.startswith("fusion") and n_targets < 2:
            raise ConfigurationError("fusion modes need at least two targets")
        if self.target_order is not None:
            n_teachers = self.k_splits if self.mode == "mt_mtda_mixed" else n_targets
            if self.mode in ("single_teacher_mixed", "source_only"):
                n_teachers = 1 if self.mode == "single_teacher_mixed" else 0
            if sorted(self.target_order) != list(range(n_teachers)):
                raise ConfigurationError(f"target_order must be a permutation of range({n_teachers})")


# ---------------------------------------------------------------- state objects


def make_optimizer(params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> torch.optim.SGD:
    """SGD with classical momentum and L2 weight decay added to the gradient."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    if momentum < 0 or weight_decay < 0:
        raise ValueError("momentum and weight_decay must be nonnegative")
    return torch.optim.SGD(list(params), lr=lr, momentum=momentum, weight_decay=weight_decay)


@dataclass
class Slot:
    """A network with its domain classifier and the optimizer that owns both."""

    net: ClassifierNetwork
    dclf: DomainClassifier
    optimizer: torch.optim.Optimizer

    def modules(self):
        return self.net, self.dclf


@dataclass
class RunState:
    config: TrainConfig
    student: Slot
    teachers: List[Slot] = field(default_factory=list)
    target_ids: List[str] = field(default_factory=list)
    epoch: int = 0
    da_steps: int = 0
    kd_steps: int = 0
    beta: float = 0.0
    history: List[dict] = field(default_factory=list)

    @property
    def step(self) -> int:
        return self.da_steps + self.kd_steps


def _slot(preset, input_shape, num_classes, seed, lr, config: TrainConfig) -> Slot:
    net = build_backbone(preset, input_shape, num_classes, seed=runtime.derive_seed(seed, "net"))
    dclf = DomainClassifier(net.feature_dim, config.grl_lambda, seed=runtime.derive_seed(seed, "dclf"))
    opt = make_optimizer(list(net.parameters()) + list(dclf.parameters()), lr, config.momentum, config.weight_decay)
    return Slot(net, dclf, opt)


def init_state(config: TrainConfig, source: DomainDataset, target_ids: Sequence[str], n_teachers: int) -> RunState:
    """Fresh networks and optimizers; standardization constants come from the source."""
    mean, std = channel_stats(source.samples)
    student = _slot(config.student_preset, source.image_shape, source.num_classes,
                    runtime.derive_seed(config.seed, "student"), config.kd_learning_rate, config)
    student.net.set_input_stats(mean, std)
    teachers = []
    for i in range(n_teachers):
        t = _slot(config.teacher_preset, source.image_shape, source.num_classes,
                  runtime.derive_seed(config.seed, "teacher", i), config.uda_learning_rate, config)
        t.net.set_input_stats(mean, std)
        teachers.append(t)
    return RunState(config=config, student=student, teachers=teachers, target_ids=list(target_ids),
                    beta=config.schedule.at(0))


# ---------------------------------------------------------------------- run log


class RunLog:
    """Append-only JSON-lines stream of step and epoch records."""

    def __init__(self, path=None, step_records: bool = True):
        self.path = Path(path) if path else None
        self.step_records = step_records
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a")

    def write(self, record: dict) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def step(self, record: dict) -> None:
        if self.step_records:
            self.write({"kind": "step", **record})

    def epoch(self, record: dict) -> None:
        self.write({"kind": "epoch", **record})
        if self._fh is not None:
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


_NULL_LOG = RunLog(None)


# ----------------------------------------------------------------- inner steps


def _to_tensor(samples: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(samples.transpose(0, 3, 1, 2))).to(runtime.torch_dtype())


def _guard(value, what: str, context: dict, run_log: RunLog) -> float:
    v = float(value.detach()) if torch.is_tensor(value) else float(value)
    if not math.isfinite(v) or abs(v) > DIVERGENCE_LIMIT:
        record = {**context, "term": what, "value": v}
        run_log.write({"kind": "divergence", **record})
        raise DivergenceError(f"{what} diverged ({v}) at {context}", record)
    return v


def _descend(loss: torch.Tensor, *optimizers, clip: Optional[float] = None) -> None:
    for opt in optimizers:
        opt.zero_grad(set_to_none=True)
    loss.backward()
    for opt in optimizers:
        if clip is not None:
            params = [p for g in opt.param_groups for p in g["params"] if p.grad is not None]
            torch.nn.utils.clip_grad_norm_(params, clip)
        opt.step()


def _teacher_step(state, i, xs, ys, xt, beta, ctx, run_log) -> float:
    t = state.teachers[i]
    da = teacher_da_loss(t.net, t.dclf, xs, ys, xt, state.config.weights)
    value = _guard(da, "da", ctx, run_log)
    _descend((1.0 - beta) * da, t.optimizer, clip=state.config.grad_clip_norm)
    state.da_steps += 1
    return value


def _student_optimizers(state, teacher_idx):
    opts = [state.student.optimizer]
    if state.config.distill_updates_teacher and teacher_idx is not None:
        opts.append(state.teachers[teacher_idx].optimizer)
    return opts


def _kd_source_step(state, xs, ys, beta, ctx, run_log, teacher_idx=None, teacher_logits=None) -> float:
    cfg = state.config
    teacher = state.teachers[teacher_idx].net if teacher_idx is not None else None
    if teacher_logits is None and cfg.distill_updates_teacher:
        teacher_logits = teacher(xs)[1]
    loss = kd_source_loss(teacher, state.student.net, xs, ys, cfg.weights, kd_style=cfg.kd_style,
                          teacher_logits=teacher_logits)
    value = _guard(loss, "kd_source", ctx, run_log)
    _descend(beta * loss, *_student_optimizers(state, teacher_idx), clip=cfg.grad_clip_norm)
    state.kd_steps += 1
    return value


def _kd_target_step(state, xt, xs, beta, ctx, run_log, teacher_idx=None, teacher_logits=None) -> float:
    cfg = state.config
    teacher = state.teachers[teacher_idx].net if teacher_idx is not None else None
    if teacher_logits is None and cfg.distill_updates_teacher:
        teacher_logits = teacher(xt)[1]
    loss = kd_target_loss(teacher, state.student.net, xt, xs, state.student.dclf, cfg.weights,
                          consistency=cfg.consistency_enabled, kd_style=cfg.kd_style, teacher_logits=teacher_logits)
    value = _guard(loss, "kd_target", ctx, run_log)
    _descend(beta * loss, *_student_optimizers(state, teacher_idx), clip=cfg.grad_clip_norm)
    state.kd_steps += 1
    return value


def _alternating_batch(state, order, xs, ys, xts, beta, ctx, run_log):
    for i in order:
        c = {**ctx, "teacher": i}
        da = _teacher_step(state, i, xs, ys, xts[i], beta, c, run_log)
        kds = _kd_source_step(state, xs, ys, beta, c, run_log, teacher_idx=i)
        kdt = _kd_target_step(state, xts[i], xs, beta, c, run_log, teacher_idx=i)
        b = combined_teacher_objective(da, kds, kdt, beta)
        _guard(b.total, "total", c, run_log)
        run_log.step({**c, "step": state.step, **b.to_dict()})


def fuse_logits(logits: Sequence[torch.Tensor], how: str) -> torch.Tensor:
    """Sum or mean of teacher logits."""
    stacked = torch.stack(list(logits))
    if how == "sum":
        return stacked.sum(0)
    if how == "mean":
        return stacked.mean(0)
    raise ConfigurationError(f"unknown fusion {how!r}")


def _fusion_batch(state, order, xs, ys, xts, beta, ctx, run_log, how):
    da_terms = [_teacher_step(state, i, xs, ys, xts[i], beta, {**ctx, "teacher": i}, run_log) for i in order]
    nets = [state.teachers[i].net for i in order]
    fused = fuse_logits([teacher_logits_for(n, xs) for n in nets], how)
    kds = _kd_source_step(state, xs, ys, beta, {**ctx, "teacher": "fused"}, run_log, teacher_logits=fused)
    kdt_terms = []
    for i in order:
        fused = fuse_logits([teacher_logits_for(n, xts[i]) for n in nets], how)
        kdt_terms.append(_kd_target_step(state, xts[i], xs, beta, {**ctx, "teacher": "fused", "target": i},
                                         run_log, teacher_logits=fused))
    b = combined_teacher_objective(float(np.mean(da_terms)), kds, float(np.mean(kdt_terms)), beta)
    run_log.step({**ctx, "teacher": "fused", "step": state.step, **b.to_dict()})


def _source_only_batch(state, xs, ys, ctx, run_log):
    st = state.student
    loss = cross_entropy(st.net(xs)[1], ys)
    value = _guard(loss, "ce", ctx, run_log)
    _descend(loss, st.optimizer, clip=state.config.grad_clip_norm)
    state.kd_steps += 1
    run_log.step({**ctx, "step": state.step, "ce": value})


# ---------------------------------------------------------------- evaluation


def evaluate_state(state: RunState, eval_sets: Sequence[DomainDataset], teachers: bool = True) -> dict:
    """Student accuracies on every eval set, plus every teacher on every eval set."""
    student = per_target_accuracy(state.student.net, eval_sets)
    snap = {"student": student}
    if student:
        snap["equal_weight"] = equal_weight_accuracy(student)
        snap["weighted"] = weighted_accuracy(student, [d.size for d in eval_sets])
    if teachers:
        snap["teachers"] = [per_target_accuracy(t.net, eval_sets) for t in state.teachers]
    return snap


# ------------------------------------------------------------------ main loop


def fit(state: RunState, source: DomainDataset, targets: Sequence[DomainDataset],
        eval_sets: Sequence[DomainDataset] = (), run_log: Optional[RunLog] = None,
        scheme: str = "alternating", stop_after_epoch: Optional[int] = None,
        on_epoch: Optional[Callable[[RunState], None]] = None, evaluate_teachers: bool = True) -> RunState:
    """Continue training ``state`` from ``state.epoch`` up to ``config.epochs``.

    ``scheme`` is ``alternating``, ``sum``, ``mean`` or ``source_only``.
    ``stop_after_epoch`` halts early (used for checkpoint/resume).
    ``evaluate_teachers=False`` leaves teachers out of the per-epoch snapshots.
    """
    cfg = state.config
    run_log = run_log or _NULL_LOG
    sched = cfg.schedule
    xs_all = _to_tensor(source.samples)
    ys_all = torch.tensor(np.array(source.train_labels), dtype=torch.long)
    xt_all = [_to_tensor(t.samples) for t in targets]
    if scheme != "source_only" and len(xt_all) != len(state.teachers):
        raise ConfigurationError(f"{len(xt_all)} targets for {len(state.teachers)} teachers")
    order = list(cfg.target_order) if cfg.target_order is not None else list(range(len(state.teachers)))
    plan = BatchPlan.for_source(source.size, cfg.batch_size, cfg.seed)
    last = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)

    for epoch in range(state.epoch, last):
        da0, kd0 = state.da_steps, state.kd_steps
        state.beta = sched.at(epoch)
        run_log.epoch({"event": "start", "epoch": epoch, "beta": state.beta})
        for b, (s_idx, t_idx) in enumerate(batch_indices(source.size, [len(x) for x in xt_all], plan, epoch)):
            s_idx = torch.from_numpy(s_idx)
            xs, ys = xs_all[s_idx], ys_all[s_idx]
            ctx = {"epoch": epoch, "batch": b}
            try:
                if scheme == "source_only":
                    _source_only_batch(state, xs, ys, ctx, run_log)
                    continue
                xts = [x[torch.from_numpy(i)] for x, i in zip(xt_all, t_idx)]
                beta = sched.at(epoch, b, plan.epoch_length)
                state.beta = beta
                if scheme == "alternating":
                    _alternating_batch(state, order, xs, ys, xts, beta, ctx, run_log)
                else:
                    _fusion_batch(state, order, xs, ys, xts, beta, ctx, run_log, scheme)
            except NumericError as exc:
                # non-finite logits surface before a loss value exists
                _guard(float("nan"), f"logits ({exc})", ctx, run_log)
        snap = {"epoch": epoch, "beta": sched.at(epoch), "da_steps": state.da_steps - da0,
                "kd_steps": state.kd_steps - kd0}
        if eval_sets:
            snap.update(evaluate_state(state, eval_sets, teachers=evaluate_teachers))
        state.history.append(snap)
        state.epoch = epoch + 1
        run_log.epoch({"event": "end", **snap})
        log.info("epoch %d beta=%.4f acc=%s", epoch, snap["beta"], snap.get("equal_weight"))
        if on_epoch is not None:
            on_epoch(state)
    return state


# ----------------------------------------------------------------- entry points


def train_mt_mtda(config: TrainConfig, source: DomainDataset, targets: Sequence[DomainDataset],
                  eval_sets: Sequence[DomainDataset] = (), run_log: Optional[RunLog] = None,
                  **fit_kwargs) -> RunState:
    """Alternating multi-teacher adaptation; one teacher per entry of ``targets``."""
    if not targets:
        raise ConfigurationError("need at least one target")
    state = init_state(config, source, [t.domain_id for t in targets], len(targets))
    return fit(state, source, targets, eval_sets, run_log, "alternating", **fit_kwargs)


def train_mt_mtda_mixed(config: TrainConfig, source, targets, eval_sets=(), run_log=None, **fit_kwargs) -> RunState:
    """Pool the targets, cut ``k_splits`` random pseudo-targets, then run the alternating loop."""
    if config.k_splits is None:
        raise ConfigurationError("k_splits is required")
    parts = split_mixed_targets(targets, config.k_splits, config.seed)
    return train_mt_mtda(config, source, parts, eval_sets, run_log, **fit_kwargs)


def merge_targets(targets: Sequence[DomainDataset]) -> DomainDataset:
    if len(targets) == 1:
        return targets[0]
    return DomainDataset.concat(list(targets), "merged", role="target")


def train_single_teacher_mixed(config: TrainConfig, source, targets, eval_sets=(), run_log=None,
                               **fit_kwargs) -> RunState:
    """All targets merged into one; a single teacher adapts to the merge."""
    if not targets:
        raise ConfigurationError("need at least one target")
    return train_mt_mtda(config, source, [merge_targets(targets)], eval_sets, run_log, **fit_kwargs)


def train_fusion(config: TrainConfig, source, targets, fusion: str, eval_sets=(), run_log=None,
                 **fit_kwargs) -> RunState:
    """Teachers adapt exactly as in the alternating loop; the student distils a fused signal.

    Per batch the student takes one step on ``x_s`` and one on each ``x_t^i``
    against the sum (or mean) of all teachers' logits. The two-target minimum
    is enforced by :meth:`TrainConfig.validate_targets`, so a single target is
    accepted here.
    """
    if fusion not in ("sum", "mean"):
        raise ConfigurationError(f"unknown fusion {fusion!r}")
    if not targets:
        raise ConfigurationError("need at least one target")
    state = init_state(config, source, [t.domain_id for t in targets], len(targets))
    return fit(state, source, targets, eval_sets, run_log, fusion, **fit_kwargs)


def train_source_only(config: TrainConfig, source, targets=(), eval_sets=(), run_log=None, **fit_kwargs) -> RunState:
    """Student trained with plain source cross-entropy; no teachers."""
    state = init_state(config, source, [], 0)
    return fit(state, source, [], eval_sets, run_log, "source_only", **fit_kwargs)


def scheme_for(mode: str) -> str:
    return {"fusion_sum": "sum", "fusion_mean": "mean", "source_only": "source_only"}.get(mode, "alternating")


def training_targets(config: TrainConfig, targets: Sequence[DomainDataset]) -> list:
    """The (pseudo-)targets the teachers of ``config.mode`` are bound to."""
    if config.mode == "source_only":
        return []
    if config.mode == "mt_mtda_mixed":
        return split_mixed_targets(targets, config.k_splits, config.seed)
    if config.mode == "single_teacher_mixed":
        return [merge_targets(targets)]
    return list(targets)


def run_training(config: TrainConfig, source, targets, eval_sets=(), run_log=None, **fit_kwargs) -> RunState:
    """Dispatch on ``config.mode``."""
    config.validate_targets(len(targets))
    targets = [t if t.role == "target" else t.as_target() for t in targets]
    bound = training_targets(config, targets)
    state = init_state(config, source, [t.domain_id for t in bound], len(bound))
    return fit(state, source, bound, eval_sets, run_log, scheme_for(config.mode), **fit_kwargs)


def resume_training(state: RunState, source, targets, eval_sets=(), run_log=None, **fit_kwargs) -> RunState:
    cfg = state.config
    targets = [t if t.role == "target" else t.as_target() for t in targets]
    return fit(state, source, training_targets(cfg, targets), eval_sets, run_log, scheme_for(cfg.mode), **fit_kwargs)


def order_permutations(n: int) -> list:
    return [list(p) for p in permutations(range(n))]
