"""Classifier networks, gradient reversal, domain classifier and temperature softmax."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, NumericError
from .runtime import seeded, torch_dtype

PRESETS = ("student_compact", "teacher_wide")
ROLE_OF_PRESET = {"student_compact": "student", "teacher_wide": "teacher"}


def temperature_softmax(logits, tau: float) -> torch.Tensor:
    """Softmax of ``logits / tau`` along the last axis, max-subtracted."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = torch.as_tensor(logits)
    if not z.is_floating_point():
        z = z.to(torch_dtype())
    if not torch.isfinite(z).all():
        raise NumericError("logits contain non-finite values")
    z = z / tau
    z = z - z.max(dim=-1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


class _ReverseGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.lam * grad_output, None


def grl_apply(features: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    """Identity forward; gradient ``g`` becomes ``-lam * g`` on the way back."""
    if lam < 0:
        raise ValueError("GRL coefficient must be nonnegative")
    return _ReverseGrad.apply(features, float(lam))


class GradientReversal(nn.Module):
    def __init__(self, lam: float = 1.0):
        super().__init__()
        if lam < 0:
            raise ValueError("GRL coefficient must be nonnegative")
        self.lam = float(lam)

    def forward(self, x):
        return grl_apply(x, self.lam)


class ClassifierNetwork(nn.Module):
    """Feature extractor followed by a class head.

    ``forward`` returns ``(features, logits)``. Inputs are NHWC or NCHW images in
    ``[0, 1]``; per-channel standardization (buffers ``input_mean`` and
    ``input_std``) is applied first.
    """

    def __init__(self, feature_extractor: nn.Module, class_head: nn.Module, *, role: str, preset: str,
                 input_shape: Sequence[int], num_classes: int, feature_dim: int, seed: int):
        super().__init__()
        self.feature_extractor = feature_extractor
        self.class_head = class_head
        self.role = role
        self.preset = preset
        self.input_shape = tuple(int(v) for v in input_shape)
        self.num_classes = int(num_classes)
        self.feature_dim = int(feature_dim)
        self.seed = int(seed)
        channels = self.input_shape[-1]
        self.register_buffer("input_mean", torch.zeros(channels))
        self.register_buffer("input_std", torch.ones(channels))

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def set_input_stats(self, mean, std) -> None:
        mean = torch.as_tensor(np.asarray(mean), dtype=self.input_mean.dtype)
        std = torch.as_tensor(np.asarray(std), dtype=self.input_std.dtype).clamp_min(1e-6)
        self.input_mean.copy_(mean)
        self.input_std.copy_(std)

    def _prepare(self, x) -> torch.Tensor:
        x = torch.as_tensor(x)
        if x.dtype != self.input_mean.dtype:
            x = x.to(self.input_mean.dtype)
        c = self.input_shape[-1]
        if x.ndim == 3:
            x = x.unsqueeze(0)
        if x.shape[-1] == c and x.shape[1] != c:
            x = x.permute(0, 3, 1, 2)
        elif x.shape[1] != c:
            raise ConfigurationError(f"expected {c} channels, got batch of shape {tuple(x.shape)}")
        x = (x - self.input_mean[:, None, None]) / self.input_std[:, None, None]
        # NHWC layout runs the small convolutions and pooling noticeably faster on CPU
        return x.contiguous(memory_format=torch.channels_last)

    def features(self, x) -> torch.Tensor:
        return self.feature_extractor(self._prepare(x))

    def forward(self, x):
        f = self.features(x)
        return f, self.class_head(f)

    def logits(self, x) -> torch.Tensor:
        return self.forward(x)[1]

    def describe(self) -> dict:
        return {
            "preset": self.preset,
            "role": self.role,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "seed": self.seed,
        }


class DomainClassifier(nn.Module):
    """Two-layer perceptron ``F -> F/2 -> 2`` predicting source (0) vs target (1).

    The GRL is not part of the module: callers wrap features with
    :func:`grl_apply` using :attr:`grl_coefficient` when reversal is wanted.
    """

    def __init__(self, feature_dim: int, grl_coefficient: float = 1.0, seed: int = 0):
        super().__init__()
        if grl_coefficient < 0:
            raise ValueError("GRL coefficient must be nonnegative")
        self.feature_dim = int(feature_dim)
        self.grl_coefficient = float(grl_coefficient)
        self.seed = int(seed)
        hidden = max(1, self.feature_dim // 2)
        with seeded(seed):
            self.head = nn.Sequential(nn.Linear(self.feature_dim, hidden), nn.ReLU(), nn.Linear(hidden, 2))
        self.to(torch_dtype())

    def forward(self, features):
        return self.head(features)


def _conv_block(cin, cout, pool):
    layers = [nn.Conv2d(cin, cout, kernel_size=3, padding=1), nn.ReLU()]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return layers


def build_backbone(preset: str, input_shape: Sequence[int], num_classes: int, seed: int = 0) -> ClassifierNetwork:
    """Build a randomly initialised classifier.

    ``student_compact``: two conv blocks (6, 16 channels, each pooled) and two
    fully connected layers, LeNet scale. ``teacher_wide``: four conv blocks
    (24, 24, 64, 64 channels; pooling after the 1st and 3rd) and two fully
    connected layers. ``input_shape`` is ``(H, W, C)`` with ``H`` and ``W``
    multiples of 4, at least 8.
    """
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    if len(input_shape) != 3:
        raise ConfigurationError(f"input_shape must be (H, W, C), got {tuple(input_shape)}")
    h, w, c = (int(v) for v in input_shape)
    if h < 8 or w < 8 or h % 4 or w % 4 or c < 1:
        raise ConfigurationError(f"input_shape {tuple(input_shape)} incompatible with two 2x poolings")
    if num_classes < 2:
        raise ConfigurationError("need at least two classes")
    spatial = (h // 4) * (w // 4)
    with seeded(seed):
        if preset == "student_compact":
            fx = nn.Sequential(*_conv_block(c, 6, True), *_conv_block(6, 16, True), nn.Flatten())
            feat = 16 * spatial
            head = nn.Sequential(nn.Linear(feat, 64), nn.ReLU(), nn.Linear(64, num_classes))
        else:
            fx = nn.Sequential(
                *_conv_block(c, 24, True),
                *_conv_block(24, 24, False),
                *_conv_block(24, 64, True),
                *_conv_block(64, 64, False),
                nn.Flatten(),
            )
            feat = 64 * spatial
            head = nn.Sequential(nn.Linear(feat, 256), nn.ReLU(), nn.Linear(256, num_classes))
    net = ClassifierNetwork(fx, head, role=ROLE_OF_PRESET[preset], preset=preset, input_shape=(h, w, c),
                            num_classes=num_classes, feature_dim=feat, seed=seed)
    return net.to(torch_dtype())


def predict(net: nn.Module, batch, batch_size: int = 512) -> np.ndarray:
    """Argmax class per row; ties go to the lowest index."""
    was_training = net.training
    net.eval()
    out = []
    try:
        with torch.no_grad():
            x = batch
            n = len(x)
            for start in range(0, n, batch_size):
                _, logits = net(x[start : start + batch_size])
                out.append(argmax_lowest(logits.detach().cpu().numpy()))
    finally:
        net.train(was_training)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def argmax_lowest(logits) -> np.ndarray:
    # np.argmax documents first-occurrence tie breaking
    return np.argmax(np.asarray(logits), axis=-1).astype(np.int64)


def parameter_checksum(*modules: nn.Module) -> str:
    """SHA-256 over all parameter bytes, in registration order."""
    import hashlib

    h = hashlib.sha256()
    for m in modules:
        for name, p in m.named_parameters():
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def channel_stats(samples: np.ndarray):
    """Per-channel mean and std of an ``(N, H, W, C)`` array, in float64."""
    x = np.asarray(samples, dtype=np.float64)
    return x.mean(axis=(0, 1, 2)), x.std(axis=(0, 1, 2))


__all__ = [
    "ClassifierNetwork",
    "DomainClassifier",
    "GradientReversal",
    "build_backbone",
    "channel_stats",
    "grl_apply",
    "parameter_checksum",
    "predict",
    "temperature_softmax",
]
