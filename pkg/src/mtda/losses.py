"""Domain-adaptation and distillation objectives.

All functions return scalar tensors that can be back-propagated, except
:func:`combined_teacher_objective`, which only does bookkeeping on floats.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ScheduleError
from .models import grl_apply, temperature_softmax

PROB_FLOOR = 1e-12
NORM_TOL = 1e-5
KD_STYLES = ("paper", "hinton")


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 0.5
    alpha: float = 0.5
    tau: float = 20.0

    def __post_init__(self):
        for name in ("gamma", "alpha", "tau"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ConfigurationError(f"{name} must be finite")
            object.__setattr__(self, name, v)
        if self.gamma < 0 or self.alpha < 0:
            raise ConfigurationError("gamma and alpha must be nonnegative")
        if self.tau <= 0:
            raise ConfigurationError("tau must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    da_term: float
    kd_source_term: float
    kd_target_term: float
    beta_used: float

    def to_dict(self) -> dict:
        return asdict(self)


def cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """Batch mean of ``-log softmax(logits)[label]``."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    c = logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    return F.cross_entropy(logits, labels)


def kl_divergence(p, q) -> torch.Tensor:
    """``sum_i p_i log(p_i / q_i)`` with ``0 log 0 = 0``; batch mean for 2-D input."""
    p = torch.as_tensor(p)
    q = torch.as_tensor(q, dtype=p.dtype) if not torch.is_tensor(q) else q
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(q.shape)}")
    with torch.no_grad():
        for name, d in (("p", p), ("q", q)):
            if (d < 0).any() or ((d.sum(-1) - 1).abs() > NORM_TOL).any():
                raise ValueError(f"{name} is not a probability distribution (tol {NORM_TOL})")
    terms = torch.where(
        p > 0,
        p * (torch.log(p.clamp_min(PROB_FLOOR)) - torch.log(q.clamp_min(PROB_FLOOR))),
        torch.zeros((), dtype=p.dtype),
    )
    per_row = terms.sum(-1)
    return per_row.mean() if per_row.ndim else per_row


def domain_confusion_loss(features_source, features_target, dclf) -> torch.Tensor:
    """Binary cross-entropy of ``dclf`` over the source (label 0) and target (label 1) rows.

    Wrap the features with :func:`grl_apply` beforehand to reverse the gradient
    reaching the feature extractor; the value is unaffected.
    """
    n_s, n_t = features_source.shape[0], features_target.shape[0]
    if n_s + n_t < 1:
        raise ValueError("need at least one row")
    for f in (features_source, features_target):
        if f.shape[-1] != dclf.feature_dim:
            raise ValueError(f"feature dim {f.shape[-1]} does not match domain classifier ({dclf.feature_dim})")
    feats = torch.cat([features_source, features_target])
    labels = torch.cat([torch.zeros(n_s, dtype=torch.long), torch.ones(n_t, dtype=torch.long)])
    return F.cross_entropy(dclf(feats), labels)


def teacher_da_loss(teacher, dclf, x_s, y_s, x_t, weights: LossWeights) -> torch.Tensor:
    """Source cross-entropy plus ``gamma`` times the GRL-reversed domain confusion."""
    n_s = len(x_s)
    feats, logits = teacher(torch.cat([torch.as_tensor(x_s), torch.as_tensor(x_t)]))
    ce = cross_entropy(logits[:n_s], y_s)
    if weights.gamma == 0:
        return ce
    rev = grl_apply(feats, dclf.grl_coefficient)
    return ce + weights.gamma * domain_confusion_loss(rev[:n_s], rev[n_s:], dclf)


def _distill(teacher_logits, student_logits, tau, kd_style):
    if kd_style == "paper":
        return kl_divergence(temperature_softmax(teacher_logits, tau), temperature_softmax(student_logits, 1.0))
    if kd_style == "hinton":
        kl = kl_divergence(temperature_softmax(teacher_logits, tau), temperature_softmax(student_logits, tau))
        return kl * tau * tau
    raise ConfigurationError(f"unknown kd_style {kd_style!r}")


def teacher_logits_for(teacher, x, grad: bool = False) -> torch.Tensor:
    if grad:
        return teacher(x)[1]
    with torch.no_grad():
        return teacher(x)[1]


def kd_source_loss(teacher, student, x_s, y_s, weights: LossWeights, *, kd_style="paper",
                   teacher_logits=None) -> torch.Tensor:
    """KL(teacher at tau || student at 1) on source plus ``alpha`` times student CE.

    ``teacher_logits`` may be passed directly (fused signals, or logits that
    keep their graph when the teacher is distilled into as well); otherwise
    they are computed without gradient and the teacher is a constant.
    """
    if teacher_logits is None:
        teacher_logits = teacher_logits_for(teacher, x_s)
    _, s_logits = student(x_s)
    if teacher_logits.shape != s_logits.shape:
        raise ValueError("teacher and student disagree on the number of classes")
    loss = _distill(teacher_logits, s_logits, weights.tau, kd_style)
    if weights.alpha:
        loss = loss + weights.alpha * cross_entropy(s_logits, y_s)
    return loss


def kd_target_loss(teacher, student, x_t, x_s, student_dclf, weights: LossWeights, *,
                   consistency: bool = True, kd_style="paper", teacher_logits=None) -> torch.Tensor:
    """KL(teacher at tau || student at 1) on target plus the ``alpha``-weighted consistency term.

    The consistency term is the GRL-reversed domain confusion of the student's
    features over ``x_s`` (label 0) and ``x_t`` (label 1).
    """
    if teacher_logits is None:
        teacher_logits = teacher_logits_for(teacher, x_t)
    use_dc = consistency and weights.alpha > 0
    if use_dc:
        n_s = len(x_s)
        feats, s_logits_all = student(torch.cat([torch.as_tensor(x_s), torch.as_tensor(x_t)]))
        s_logits = s_logits_all[n_s:]
    else:
        _, s_logits = student(x_t)
    if teacher_logits.shape != s_logits.shape:
        raise ValueError("teacher and student disagree on the number of classes")
    loss = _distill(teacher_logits, s_logits, weights.tau, kd_style)
    if use_dc:
        rev = grl_apply(feats, student_dclf.grl_coefficient)
        loss = loss + weights.alpha * domain_confusion_loss(rev[:n_s], rev[n_s:], student_dclf)
    return loss


def combined_teacher_objective(da_term: float, kd_source_term: float, kd_target_term: float,
                               beta: float) -> LossBreakdown:
    """``(1 - beta) * da + beta * (kd_source + kd_target)``."""
    if not beta > 0:
        raise ScheduleError(f"beta must be positive, got {beta}")
    da, kds, kdt, b = float(da_term), float(kd_source_term), float(kd_target_term), float(beta)
    return LossBreakdown((1.0 - b) * da + b * (kds + kdt), da, kds, kdt, b)
