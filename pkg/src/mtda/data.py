"""Domain datasets: IDX ingestion, synthetic digits, domain shifts, splits and batching.

Images are stored as ``(N, H, W, C)`` float32 arrays scaled to ``[0, 1]``.
Standardization happens inside the network, never here.
"""
from __future__ import annotations

import gzip
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    ConfigurationError,
    ConsistencyError,
    FormatError,
    LabelLeakageError,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DATASET_FORMAT = "mtda-dataset"
DATASET_FORMAT_VERSION = 1

SHIFT_KINDS = ("invert", "noise_background", "blur", "affine_jitter", "color_remap")
ROLES = ("source", "target")


def _readonly(a: np.ndarray) -> np.ndarray:
    v = a.view()
    v.flags.writeable = False
    return v


@dataclass(frozen=True, eq=False)
class DomainDataset:
    """Image set tagged with a domain identity.

    ``role="source"`` exposes labels to training code via :attr:`train_labels`.
    ``role="target"`` keeps any labels it carries for evaluation only: reading
    :attr:`train_labels` raises :class:`LabelLeakageError`, while
    :attr:`eval_labels` remains available to the metrics code.
    """

    samples: np.ndarray
    labels: Optional[np.ndarray] = field(default=None, repr=False)
    domain_id: str = "source"
    num_classes: int = 10
    role: str = "source"
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        x = np.asarray(self.samples)
        if x.ndim != 4:
            raise ConsistencyError(f"samples must be (N, H, W, C), got shape {x.shape}")
        if x.dtype != np.float32:
            x = x.astype(np.float32)
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise ConsistencyError("sample values must lie in [0, 1]")
        if self.role not in ROLES:
            raise ConfigurationError(f"unknown role {self.role!r}")
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be positive")
        y = self.labels
        if y is not None:
            y = np.asarray(y, dtype=np.int64)
            if y.shape != (x.shape[0],):
                raise ConsistencyError(
                    f"{y.shape[0] if y.ndim else 0} labels for {x.shape[0]} samples"
                )
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise ConsistencyError(f"labels must lie in [0, {self.num_classes})")
            y = _readonly(y)
        elif self.role == "source":
            raise ConsistencyError("a source dataset needs labels")
        object.__setattr__(self, "samples", _readonly(x))
        object.__setattr__(self, "labels", y)

    @property
    def size(self) -> int:
        return int(self.samples.shape[0])

    def __len__(self) -> int:
        return self.size

    @property
    def image_shape(self) -> tuple:
        return tuple(self.samples.shape[1:])

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    @property
    def train_labels(self) -> np.ndarray:
        """Labels as seen by training code; only a source dataset has them."""
        if self.role != "source":
            raise LabelLeakageError(
                f"domain {self.domain_id!r} is an unlabeled target; its labels are evaluation-only"
            )
        return self.labels

    @property
    def eval_labels(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError(f"domain {self.domain_id!r} carries no labels to evaluate against")
        return self.labels

    def as_target(self) -> "DomainDataset":
        return DomainDataset(self.samples, self.labels, self.domain_id, self.num_classes, "target", dict(self.meta))

    def as_source(self) -> "DomainDataset":
        return DomainDataset(self.samples, self.labels, self.domain_id, self.num_classes, "source", dict(self.meta))

    def without_labels(self) -> "DomainDataset":
        return DomainDataset(self.samples, None, self.domain_id, self.num_classes, "target", dict(self.meta))

    def subset(self, indices, domain_id: Optional[str] = None) -> "DomainDataset":
        idx = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return DomainDataset(
            self.samples[idx], labels, domain_id or self.domain_id, self.num_classes, self.role, dict(self.meta)
        )

    @staticmethod
    def concat(parts: Sequence["DomainDataset"], domain_id: str, role: str = "target") -> "DomainDataset":
        if not parts:
            raise ValueError("nothing to concatenate")
        shapes = {p.image_shape for p in parts}
        if len(shapes) != 1:
            raise ConsistencyError(f"cannot pool images of different shapes {sorted(shapes)}")
        samples = np.concatenate([p.samples for p in parts])
        labels = None
        if all(p.has_labels for p in parts):
            labels = np.concatenate([p.labels for p in parts])
        return DomainDataset(samples, labels, domain_id, max(p.num_classes for p in parts), role)


# --------------------------------------------------------------------------- IDX


def _open_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: magic number 0x{magic:08X}, expected 0x{expected_magic:08X}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise FormatError(f"{path}: payload holds {len(raw) - header} bytes, header promises {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx_dataset(
    images_path,
    labels_path=None,
    domain_id: str = "mnist",
    num_classes: int = 10,
) -> DomainDataset:
    """Read an IDX image file (and optionally its label file).

    With labels the result is a source-role dataset; without, an unlabeled
    target. Gzipped files are accepted transparently.
    """
    images = _parse_idx(_open_maybe_gzip(images_path), IDX_IMAGES_MAGIC, images_path)
    x = (images.astype(np.float32) / 255.0)[..., None]
    if labels_path is None:
        return DomainDataset(x, None, domain_id, num_classes, role="target")
    labels = _parse_idx(_open_maybe_gzip(labels_path), IDX_LABELS_MAGIC, labels_path)
    if labels.shape[0] != images.shape[0]:
        raise ConsistencyError(f"{labels.shape[0]} labels for {images.shape[0]} images")
    return DomainDataset(x, labels.astype(np.int64), domain_id, num_classes, role="source")


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (3-D images or 1-D labels)."""
    a = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | a.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


# --------------------------------------------------------------- synthetic digits

_FONT_DIR = Path("/usr/share/fonts/truetype/dejavu")
_FONT_NAMES = (
    "DejaVuSans.ttf",
    "DejaVuSans-Bold.ttf",
    "DejaVuSerif.ttf",
    "DejaVuSerif-Bold.ttf",
    "DejaVuSansMono.ttf",
    "DejaVuSansMono-Bold.ttf",
)


def _fonts(size: int):
    from PIL import ImageFont

    found = []
    for name in _FONT_NAMES:
        p = _FONT_DIR / name
        if p.exists():
            found.append(ImageFont.truetype(str(p), size))
    if not found:
        found.append(ImageFont.load_default(size=size))
    return found


def synthesize_digits(
    n: int,
    image_size: int = 16,
    channels: int = 3,
    seed: int = 0,
    domain_id: str = "digits",
) -> DomainDataset:
    """Render ``n`` jittered digit glyphs 0-9 (white on black), balanced per class."""
    from PIL import Image, ImageDraw

    if n < 1:
        raise ConfigurationError("n must be positive")
    rng = np.random.default_rng(seed)
    canvas = image_size * 4
    fonts = _fonts(int(canvas * 0.7))
    labels = rng.permutation(np.arange(n) % 10)
    out = np.empty((n, image_size, image_size), dtype=np.float32)
    for k, digit in enumerate(labels):
        font = fonts[rng.integers(len(fonts))]
        img = Image.new("L", (canvas, canvas), 0)
        draw = ImageDraw.Draw(img)
        stroke = int(rng.integers(0, 3))
        draw.text(
            (canvas / 2, canvas / 2), str(digit), fill=255, font=font, anchor="mm", stroke_width=stroke, stroke_fill=255
        )
        angle = float(rng.uniform(-15, 15))
        dx, dy = rng.uniform(-0.08, 0.08, size=2) * canvas
        img = img.rotate(angle, resample=Image.BILINEAR, translate=(float(dx), float(dy)))
        img = img.resize((image_size, image_size), resample=Image.LANCZOS)
        out[k] = np.asarray(img, dtype=np.float32) / 255.0
    np.clip(out, 0.0, 1.0, out=out)
    x = np.repeat(out[..., None], channels, axis=-1)
    return DomainDataset(x, labels.astype(np.int64), domain_id, 10, role="source")


# ------------------------------------------------------------------ domain shifts


@dataclass(frozen=True)
class DomainShiftSpec:
    transform_kind: str
    strength: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.transform_kind not in SHIFT_KINDS:
            raise ConfigurationError(
                f"unknown transform_kind {self.transform_kind!r}; expected one of {SHIFT_KINDS}"
            )
        s = float(self.strength)
        if not (0.0 <= s <= 1.0) or math.isnan(s):
            raise ConfigurationError(f"strength must lie in [0, 1], got {self.strength}")
        object.__setattr__(self, "strength", s)

    def domain_id(self, base_id: str) -> str:
        return f"{base_id}-{self.transform_kind}-{self.strength:g}-s{self.seed}"

    def to_dict(self) -> dict:
        return {"transform_kind": self.transform_kind, "strength": self.strength, "seed": self.seed}


def _invert(x, s, rng):
    return (1.0 - s) * x + s * (1.0 - x)


def _noise_background(x, s, rng):
    n, h, w, c = x.shape
    coarse = rng.uniform(0.0, 1.0, size=(n, max(2, h // 4), max(2, w // 4), c)).astype(np.float32)
    zoom = (1, h / coarse.shape[1], w / coarse.shape[2], 1)
    texture = np.clip(ndimage.zoom(coarse, zoom, order=1)[:, :h, :w, :], 0.0, 1.0)
    return (1.0 - s) * x + s * np.abs(x - texture)


def _blur(x, s, rng):
    sigma = 2.0 * s
    return ndimage.gaussian_filter(x, sigma=(0, sigma, sigma, 0), mode="nearest")


def _affine_jitter(x, s, rng):
    n, h, w, c = x.shape
    out = np.empty_like(x)
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    for k in range(n):
        theta = np.deg2rad(rng.uniform(-45, 45) * s)
        scale = 1.0 + rng.uniform(-0.3, 0.3) * s
        shear = rng.uniform(-0.5, 0.5) * s
        shift = rng.uniform(-0.15, 0.15, size=2) * np.array([h, w]) * s
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        m = rot @ np.array([[1.0, shear], [0.0, 1.0]]) * scale
        inv = np.linalg.inv(m)
        offset = centre - inv @ (centre + shift)
        for ch in range(c):
            out[k, :, :, ch] = ndimage.affine_transform(x[k, :, :, ch], inv, offset=offset, order=1, mode="constant")
    return out


def _color_remap(x, s, rng):
    n = x.shape[0]
    gray = x.mean(axis=-1, keepdims=True)
    bg = rng.uniform(0.0, 1.0, size=(n, 1, 1, 3)).astype(np.float32)
    fg = np.mod(bg + rng.uniform(0.4, 0.6, size=(n, 1, 1, 3)), 1.0).astype(np.float32)
    mapped = bg + gray * (fg - bg)
    if x.shape[-1] != 3:
        mapped = np.broadcast_to(mapped.mean(axis=-1, keepdims=True), x.shape)
    return (1.0 - s) * x + s * mapped


_TRANSFORMS = {
    "invert": _invert,
    "noise_background": _noise_background,
    "blur": _blur,
    "affine_jitter": _affine_jitter,
    "color_remap": _color_remap,
}


def generate_shifted_domain(base: DomainDataset, spec: DomainShiftSpec) -> DomainDataset:
    """Apply a deterministic shift to ``base``; the result is an unlabeled-role target.

    Labels are carried along for evaluation only.
    """
    fn = _TRANSFORMS.get(spec.transform_kind)
    if fn is None:
        raise ConfigurationError(f"unknown transform_kind {spec.transform_kind!r}")
    if base.size == 0:
        raise ValueError("base dataset is empty")
    x = np.array(base.samples, dtype=np.float32)
    if spec.strength > 0.0:
        code = SHIFT_KINDS.index(spec.transform_kind)
        rng = np.random.default_rng([spec.seed, code])
        x = np.clip(fn(x, np.float32(spec.strength), rng), 0.0, 1.0).astype(np.float32)
    meta = {"generation": {"base": base.domain_id, **spec.to_dict()}}
    return DomainDataset(x, base.labels, spec.domain_id(base.domain_id), base.num_classes, "target", meta)


def train_eval_split(ds: DomainDataset, eval_fraction: float = 0.1, seed: int = 0):
    """Deterministic ``(train, eval)`` split; roles are preserved."""
    if not 0.0 < eval_fraction < 1.0:
        raise ConfigurationError("eval_fraction must lie in (0, 1)")
    perm = np.random.default_rng([seed, ds.size]).permutation(ds.size)
    n_eval = max(1, int(round(ds.size * eval_fraction)))
    return ds.subset(np.sort(perm[n_eval:])), ds.subset(np.sort(perm[:n_eval]))


# ------------------------------------------------------------------ mixed splits


def split_sizes(total: int, k: int) -> list:
    base, rem = divmod(total, k)
    return [base + 1 if j < rem else base for j in range(k)]


def split_mixed_targets(targets: Sequence[DomainDataset], k: int, seed: int) -> list:
    """Pool all targets, forget their domain identity, and cut ``k`` near-equal random parts."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if not targets:
        raise ValueError("no targets to pool")
    pool = DomainDataset.concat(list(targets), "mixed", role="target")
    if k > pool.size:
        raise ValueError(f"cannot cut {pool.size} pooled samples into {k} non-empty parts")
    perm = np.random.default_rng([seed, pool.size, k]).permutation(pool.size)
    out, start = [], 0
    for j, size in enumerate(split_sizes(pool.size, k)):
        out.append(pool.subset(perm[start : start + size], domain_id=f"mixed-{j}"))
        start += size
    return out


# ---------------------------------------------------------------------- batching


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    epoch_length: int
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2")
        if self.epoch_length < 1:
            raise ConfigurationError("epoch_length must be positive")

    @classmethod
    def for_source(cls, source_size: int, batch_size: int, seed: int = 0) -> "BatchPlan":
        if source_size < 1:
            raise ValueError("source dataset is empty")
        return cls(batch_size, math.ceil(source_size / batch_size), seed)


def _target_stream(size: int, need: int, seed: int, epoch: int, slot: int) -> np.ndarray:
    rng = np.random.default_rng([seed, epoch, 1 + slot])
    cycles = [rng.permutation(size) for _ in range(math.ceil(need / size))]
    return np.concatenate(cycles)[:need]


def batch_indices(source_size: int, target_sizes: Sequence[int], plan: BatchPlan, epoch: int = 0) -> Iterator:
    """Index-level view of :func:`multi_target_batch_iterator`.

    Yields ``(source_idx, [target_idx_0, ...])``. The source is reshuffled each
    epoch; every target stream is reshuffled independently and cycled whenever
    it runs out. Target batches are always full-sized.
    """
    if source_size < 1 or any(t < 1 for t in target_sizes):
        raise ValueError("all datasets must be non-empty")
    expected = math.ceil(source_size / plan.batch_size)
    if plan.epoch_length != expected:
        raise ConsistencyError(f"epoch_length {plan.epoch_length} != ceil({source_size}/{plan.batch_size})")
    order = np.random.default_rng([plan.seed, epoch]).permutation(source_size)
    need = plan.epoch_length * plan.batch_size
    streams = [_target_stream(n, need, plan.seed, epoch, i) for i, n in enumerate(target_sizes)]
    bs = plan.batch_size
    for b in range(plan.epoch_length):
        yield order[b * bs : (b + 1) * bs], [s[b * bs : (b + 1) * bs] for s in streams]


def multi_target_batch_iterator(
    source: DomainDataset, targets: Sequence[DomainDataset], plan: BatchPlan, epoch: int = 0
) -> Iterator:
    """Yield ``((x_s, y_s), [x_t_0, x_t_1, ...])`` for one epoch."""
    ys_all = source.train_labels
    for s_idx, t_idx in batch_indices(source.size, [t.size for t in targets], plan, epoch):
        yield (source.samples[s_idx], ys_all[s_idx]), [t.samples[i] for t, i in zip(targets, t_idx)]


# -------------------------------------------------------------- export / import


def save_dataset(ds: DomainDataset, path) -> Path:
    """Write ``meta.json`` plus ``samples.npy`` (and ``labels.npy``) into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": DATASET_FORMAT,
        "version": DATASET_FORMAT_VERSION,
        "domain_id": ds.domain_id,
        "num_classes": ds.num_classes,
        "role": ds.role,
        "size": ds.size,
        "shape": list(ds.image_shape),
        "has_labels": ds.has_labels,
        "generation": ds.meta.get("generation"),
    }
    np.save(path / "samples.npy", np.ascontiguousarray(ds.samples, dtype=np.float32))
    if ds.has_labels:
        np.save(path / "labels.npy", np.ascontiguousarray(ds.labels, dtype=np.int64))
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(path, role: Optional[str] = None) -> DomainDataset:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"{path}: no meta.json") from None
    if meta.get("format") != DATASET_FORMAT or meta.get("version") != DATASET_FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported dataset format {meta.get('format')!r} v{meta.get('version')}")
    x = np.load(path / "samples.npy")
    if list(x.shape[1:]) != meta["shape"] or x.shape[0] != meta["size"]:
        raise ConsistencyError(f"{path}: samples.npy does not match meta.json")
    y = np.load(path / "labels.npy") if meta["has_labels"] else None
    extra = {"generation": meta["generation"]} if meta.get("generation") else {}
    return DomainDataset(x, y, meta["domain_id"], meta["num_classes"], role or meta["role"], extra)
