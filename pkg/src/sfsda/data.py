"""Synthetic domain-shift datasets, strong augmentation, and batching.

The source and target domains share class-conditional templates (smooth
random color patterns, one per class); the target domain additionally
applies a configurable shift transform.  All generation is a pure
function of (config, seed).
"""

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Optional

import numpy as np
from scipy import ndimage

SHIFT_KINDS = ("rotation", "color-invert", "hue-shift", "noise-texture")


class ConfigError(ValueError):
    """Raised when a data/run configuration is invalid or incomplete."""


class Domain(str, Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass
class Sample:
    """One image with a stable id; label is None for unlabeled samples."""

    id: int
    image: np.ndarray  # (C, H, W) float32 in [0, 1]
    label: Optional[int]
    domain: Domain


@dataclass
class ShiftConfig:
    num_classes: int = 4
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    shots: int = 1
    n_source: int = 400
    n_unlabeled: int = 400
    shift_kind: str = "color-invert"
    seed: int = 0
    noise_level: float = 0.08

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.shots < 1:
            raise ConfigError("shots must be >= 1")
        if self.image_size % self.patch_size != 0:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.shift_kind not in SHIFT_KINDS:
            raise ConfigError(f"unknown shift_kind {self.shift_kind!r}")
        n_t = self.shots * self.num_classes
        if self.n_unlabeled < 10 * n_t:
            raise ConfigError("n_unlabeled must be >= 10 * shots * num_classes")


@dataclass
class DatasetSplit:
    source: list
    target_labeled: list
    target_unlabeled: list
    num_classes: int
    # held-out ground truth for the unlabeled pool, used only for evaluation
    unlabeled_truth: dict = field(default_factory=dict)

    def all_ids(self):
        return (
            [s.id for s in self.source]
            + [s.id for s in self.target_labeled]
            + [s.id for s in self.target_unlabeled]
        )


@dataclass
class AugmentedPair:
    """Weak (original) and strong view of one unlabeled sample."""

    weak: np.ndarray
    strong: np.ndarray
    id: int


@dataclass
class Batch:
    images: np.ndarray  # (B, C, H, W)
    labels: np.ndarray  # (B,) int
    ids: np.ndarray  # (B,) int


@dataclass
class UnlabeledBatch:
    weak: np.ndarray  # (B, C, H, W)
    strong: np.ndarray  # (B, C, H, W)
    ids: np.ndarray  # (B,) int


def _class_templates(cfg: ShiftConfig) -> np.ndarray:
    """Smooth per-class RGB patterns, shape (C_classes, channels, H, W)."""
    rng = np.random.default_rng(cfg.seed * 1000003 + 17)
    h = w = cfg.image_size
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    templates = np.zeros((cfg.num_classes, cfg.channels, h, w), dtype=np.float64)
    for c in range(cfg.num_classes):
        for ch in range(cfg.channels):
            img = np.zeros((h, w))
            for _ in range(3):
                fy, fx = rng.uniform(0.5, 3.0, size=2)
                phase = rng.uniform(0, 2 * np.pi)
                amp = rng.uniform(0.5, 1.0)
                img += amp * np.cos(2 * np.pi * (fy * yy + fx * xx) / h + phase)
            lo, hi = img.min(), img.max()
            templates[c, ch] = 0.15 + 0.7 * (img - lo) / (hi - lo + 1e-12)
    return templates


def _shift_texture(cfg: ShiftConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed * 1000003 + 71)
    tex = rng.uniform(0, 1, size=(cfg.channels, cfg.image_size, cfg.image_size))
    return ndimage.gaussian_filter(tex, sigma=(0, 1.0, 1.0))


def apply_shift(image: np.ndarray, kind: str, texture: Optional[np.ndarray] = None) -> np.ndarray:
    """Apply the target-domain shift transform to a (C, H, W) image."""
    if kind == "rotation":
        return np.ascontiguousarray(np.rot90(image, k=1, axes=(1, 2)))
    if kind == "color-invert":
        return 1.0 - image
    if kind == "hue-shift":
        return np.roll(image, shift=1, axis=0)
    if kind == "noise-texture":
        if texture is None:
            raise ValueError("noise-texture shift needs a texture")
        return np.clip(0.65 * image + 0.35 * texture, 0.0, 1.0)
    raise ConfigError(f"unknown shift_kind {kind!r}")


def _render(template: np.ndarray, rng: np.random.Generator, noise: float) -> np.ndarray:
    img = template + rng.normal(0, noise, size=template.shape)
    img = img + rng.uniform(-0.05, 0.05)  # per-sample brightness jitter
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_shift(cfg: ShiftConfig) -> DatasetSplit:
    """Generate disjoint source / labeled-target / unlabeled-target splits.

    Identical configs (including seed) produce bit-identical splits.
    """
    cfg.validate()
    templates = _class_templates(cfg)
    texture = _shift_texture(cfg) if cfg.shift_kind == "noise-texture" else None
    rng = np.random.default_rng(cfg.seed * 1000003 + 29)

    next_id = 0
    source = []
    for i in range(cfg.n_source):
        c = i % cfg.num_classes
        img = _render(templates[c], rng, cfg.noise_level).astype(np.float32)
        source.append(Sample(next_id, img, c, Domain.SOURCE))
        next_id += 1

    target_labeled = []
    for c in range(cfg.num_classes):
        for _ in range(cfg.shots):
            img = _render(templates[c], rng, cfg.noise_level)
            img = apply_shift(img, cfg.shift_kind, texture).astype(np.float32)
            target_labeled.append(Sample(next_id, img, c, Domain.TARGET))
            next_id += 1

    target_unlabeled = []
    truth = {}
    classes = rng.integers(0, cfg.num_classes, size=cfg.n_unlabeled)
    for c in classes:
        img = _render(templates[int(c)], rng, cfg.noise_level)
        img = apply_shift(img, cfg.shift_kind, texture).astype(np.float32)
        target_unlabeled.append(Sample(next_id, img, None, Domain.TARGET))
        truth[next_id] = int(c)
        next_id += 1

    return DatasetSplit(source, target_labeled, target_unlabeled, cfg.num_classes, truth)


# ---------------------------------------------------------------------------
# Strong augmentation: random selection of ops from a fixed geometric /
# photometric pool with a shared magnitude parameter.
# ---------------------------------------------------------------------------

_MAX_MAGNITUDE = 30.0


def _op_brightness(img, level, rng):
    return img + level * 0.6 * (1 if rng.random() < 0.5 else -1)


def _op_contrast(img, level, rng):
    factor = 1.0 + level * 1.5 * (1 if rng.random() < 0.5 else -1) * 0.5
    mean = img.mean()
    return (img - mean) * factor + mean


def _op_color(img, level, rng):
    scale = 1.0 + level * (rng.uniform(-1, 1, size=(img.shape[0], 1, 1)))
    return img * scale


def _op_translate_x(img, level, rng):
    shift = int(round(level * img.shape[2] / 3)) * (1 if rng.random() < 0.5 else -1)
    return np.roll(img, shift, axis=2)


def _op_translate_y(img, level, rng):
    shift = int(round(level * img.shape[1] / 3)) * (1 if rng.random() < 0.5 else -1)
    return np.roll(img, shift, axis=1)


def _op_rotate(img, level, rng):
    angle = level * 30.0 * (1 if rng.random() < 0.5 else -1)
    return ndimage.rotate(img, angle, axes=(1, 2), reshape=False, mode="nearest", order=1)


def _op_cutout(img, level, rng):
    h, w = img.shape[1:]
    size = max(1, int(round(level * h / 2)))
    y = rng.integers(0, h - size + 1)
    x = rng.integers(0, w - size + 1)
    out = img.copy()
    out[:, y : y + size, x : x + size] = 0.5
    return out


def _op_posterize(img, level, rng):
    bits = max(1, int(round(8 - 6 * level)))
    levels = 2**bits
    return np.floor(img * levels) / levels


def _op_solarize(img, level, rng):
    threshold = 1.0 - level
    return np.where(img >= threshold, 1.0 - img, img)


_AUGMENT_OPS = [
    _op_brightness,
    _op_contrast,
    _op_color,
    _op_translate_x,
    _op_translate_y,
    _op_rotate,
    _op_cutout,
    _op_posterize,
    _op_solarize,
]


def strong_augment(
    image: np.ndarray,
    rng: np.random.Generator,
    num_ops: int = 2,
    magnitude: float = 9.0,
) -> np.ndarray:
    """Apply `num_ops` randomly chosen ops at the given magnitude.

    Output has the same shape, values clamped to [0, 1]; deterministic for
    a fixed rng state.  num_ops=0 returns the input unchanged.
    """
    out = image.astype(np.float64, copy=True)
    level = magnitude / _MAX_MAGNITUDE
    for _ in range(num_ops):
        op = _AUGMENT_OPS[rng.integers(0, len(_AUGMENT_OPS))]
        out = op(out, level, rng)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def make_batches(
    split: DatasetSplit,
    batch_size: int,
    rng: np.random.Generator,
    num_ops: int = 2,
    magnitude: float = 9.0,
) -> Iterator[tuple]:
    """Yield (labeled Batch, unlabeled batch of weak/strong views) per step.

    One epoch covers every unlabeled sample exactly once (drop-last);
    labeled samples are resampled with replacement since N_t << N_u.
    """
    if batch_size < 2:
        raise ConfigError("batch_size must be >= 2")
    if not split.target_unlabeled or not split.target_labeled:
        raise ConfigError("split has an empty target subset")

    order = rng.permutation(len(split.target_unlabeled))
    n_full = len(order) // batch_size
    labeled = split.target_labeled
    for b in range(n_full):
        idx = order[b * batch_size : (b + 1) * batch_size]
        weak = np.stack([split.target_unlabeled[i].image for i in idx])
        strong = np.stack(
            [
                strong_augment(split.target_unlabeled[i].image, rng, num_ops, magnitude)
                for i in idx
            ]
        )
        ids = np.array([split.target_unlabeled[i].id for i in idx])
        lab_idx = rng.integers(0, len(labeled), size=batch_size)
        lab_batch = Batch(
            images=np.stack([labeled[i].image for i in lab_idx]),
            labels=np.array([labeled[i].label for i in lab_idx]),
            ids=np.array([labeled[i].id for i in lab_idx]),
        )
        yield lab_batch, UnlabeledBatch(weak=weak, strong=strong, ids=ids)


def export_split(split: DatasetSplit, out_dir: str) -> str:
    """Write `{split}/{class}/{id}.png` images plus a manifest.json.

    The manifest maps id -> (split name, label or null).  Returns the
    manifest path.
    """
    from PIL import Image

    manifest = {}
    groups = [
        ("source", split.source),
        ("target_labeled", split.target_labeled),
        ("target_unlabeled", split.target_unlabeled),
    ]
    for name, samples in groups:
        for s in samples:
            cls_dir = "unlabeled" if s.label is None else str(s.label)
            d = os.path.join(out_dir, name, cls_dir)
            os.makedirs(d, exist_ok=True)
            arr = (np.clip(s.image, 0, 1) * 255).round().astype(np.uint8)
            Image.fromarray(arr.transpose(1, 2, 0)).save(os.path.join(d, f"{s.id}.png"))
            manifest[str(s.id)] = [name, s.label]
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return path
