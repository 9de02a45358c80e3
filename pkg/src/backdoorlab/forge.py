"""Synthetic dataset generation, backdoor triggers, and poison bookkeeping.

Datasets are dense float64 arrays in [0,1]: images are N x C x H x W,
multivariate series are N x C x T. Poisoning keeps the hidden ground truth
(mask and pre-poison labels) next to the observed data so the evaluation
side can score detection and recovery without leaking anything into
training.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .container import (
    FileFormatError,
    Reader,
    Writer,
    fmt_float,
    fmt_floats,
    fmt_ints,
    parse_floats,
    parse_ints,
)

DATASET_MAGIC = b"ABLF"


def round_count(fraction: float, n: int) -> int:
    """Half-up rounding of fraction*n, shared by selection and partition sizes."""
    return int(math.floor(fraction * n + 0.5))


# ---------------------------------------------------------------------------
# core containers

@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim not in (3, 4):
            raise ValueError(f"features must be N x C x T or N x C x H x W, got {self.features.shape}")
        if len(self.labels) != len(self.features):
            raise ValueError(f"{len(self.labels)} labels for {len(self.features)} samples")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if len(self.features) < self.num_classes:
            raise ValueError("need at least one sample per class")
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) >= self.num_classes:
            raise ValueError("labels out of range")
        if not np.isfinite(self.features).all():
            raise ValueError("non-finite feature values")
        if self.features.min() < 0.0 or self.features.max() > 1.0:
            raise ValueError("feature values must lie in [0,1]")

    @property
    def kind(self) -> str:
        return "image" if self.features.ndim == 4 else "series"

    def __len__(self) -> int:
        return len(self.features)

    def subset(self, indices) -> "Dataset":
        return Dataset(self.features[indices].copy(), self.labels[indices].copy(), self.num_classes)


# ---------------------------------------------------------------------------
# triggers

@dataclass(frozen=True, eq=False)
class PatchTrigger:
    """Replace a window anchored at the lower-right corner with a fixed pattern."""

    pattern: np.ndarray  # C x h x w
    anchor: tuple[int, int] = (0, 0)  # (rows, cols) offset from the lower-right corner

    kind = "patch"


@dataclass(frozen=True, eq=False)
class BlendTrigger:
    """out = (1 - alpha) * x + alpha * overlay."""

    overlay: np.ndarray  # full feature shape
    alpha: float = 0.2

    kind = "blend"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be strictly inside (0,1), got {self.alpha}")


@dataclass(frozen=True)
class SinusoidTrigger:
    """Add amplitude*sin(2*pi*frequency*col/width) to every image row."""

    amplitude: float = 0.08
    frequency: int = 6

    kind = "sinusoid"

    def __post_init__(self):
        if self.amplitude <= 0:
            raise ValueError(f"amplitude must be positive, got {self.amplitude}")


@dataclass(frozen=True, eq=False)
class SeriesAdditiveTrigger:
    """Add a fixed C x k pattern over the final k timesteps (offset from the end)."""

    pattern: np.ndarray  # C x k
    position: int = 0  # extra offset from the series end

    kind = "series_additive"


Trigger = PatchTrigger | BlendTrigger | SinusoidTrigger | SeriesAdditiveTrigger


def default_patch_pattern(channels: int = 1, size: int = 3) -> np.ndarray:
    """BadNets-style checkerboard, ones in the corners."""
    tile = (np.indices((size, size)).sum(axis=0) + 1) % 2
    return np.broadcast_to(tile, (channels, size, size)).astype(np.float64).copy()


def default_blend_overlay(feature_shape: tuple[int, ...]) -> np.ndarray:
    """Fixed smooth diagonal-wave overlay covering the whole image."""
    c, h, w = feature_shape
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    wave = 0.5 + 0.5 * np.sin(2.0 * np.pi * 3.0 * (xx + yy) / (h + w))
    return np.broadcast_to(wave, (c, h, w)).copy()


def default_series_pattern(channels: int, length: int, amplitude: float = 0.1,
                           fraction: float = 0.1) -> np.ndarray:
    """Constant additive bump over the final `fraction` of timesteps."""
    k = max(1, round_count(fraction, length))
    return np.full((channels, k), amplitude, dtype=np.float64)


def apply_trigger(x: np.ndarray, trigger: Trigger) -> np.ndarray:
    """Compose a trigger onto one feature tensor; clamps to [0,1], never mutates x."""
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    if isinstance(trigger, PatchTrigger):
        if x.ndim != 3:
            raise ValueError(f"patch trigger needs a C x H x W image, got shape {x.shape}")
        pat = np.asarray(trigger.pattern, dtype=np.float64)
        c, h, w = x.shape
        pc, ph, pw = pat.shape
        dy, dx = trigger.anchor
        if pc != c or ph + dy > h or pw + dx > w:
            raise ValueError(f"patch {pat.shape} at anchor {trigger.anchor} does not fit image {x.shape}")
        out[:, h - dy - ph : h - dy, w - dx - pw : w - dx] = pat
    elif isinstance(trigger, BlendTrigger):
        overlay = np.asarray(trigger.overlay, dtype=np.float64)
        if overlay.shape != x.shape:
            raise ValueError(f"blend overlay {overlay.shape} does not match feature {x.shape}")
        out = (1.0 - trigger.alpha) * x + trigger.alpha * overlay
    elif isinstance(trigger, SinusoidTrigger):
        if x.ndim != 3:
            raise ValueError(f"sinusoid trigger needs a C x H x W image, got shape {x.shape}")
        width = x.shape[-1]
        wave = trigger.amplitude * np.sin(2.0 * np.pi * trigger.frequency * np.arange(width) / width)
        out = x + wave  # broadcast over channels and rows
    elif isinstance(trigger, SeriesAdditiveTrigger):
        if x.ndim != 2:
            raise ValueError(f"series trigger needs a C x T series, got shape {x.shape}")
        pat = np.asarray(trigger.pattern, dtype=np.float64)
        c, t = x.shape
        pc, k = pat.shape
        end = t - trigger.position
        if pc != c or k > end:
            raise ValueError(f"series pattern {pat.shape} at position {trigger.position} does not fit {x.shape}")
        out[:, end - k : end] += pat
    else:
        raise TypeError(f"unknown trigger {trigger!r}")
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# poisoning

@dataclass(frozen=True, eq=False)
class PoisonPlan:
    rate: float
    target_label: int
    trigger: Trigger | None
    clean_label_mode: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate < 0.20:
            raise ValueError(f"poison rate must lie in [0, 0.20), got {self.rate}")
        if self.target_label < 0:
            raise ValueError("target label must be non-negative")
        if self.rate > 0 and self.trigger is None:
            raise ValueError("a trigger is required when rate > 0")


@dataclass
class PoisonedDataset:
    data: Dataset
    poison_mask: np.ndarray
    plan: PoisonPlan
    true_labels: np.ndarray  # pre-poison labels (hidden evaluation ground truth)

    def __post_init__(self):
        self.poison_mask = np.ascontiguousarray(self.poison_mask, dtype=bool)
        self.true_labels = np.ascontiguousarray(self.true_labels, dtype=np.int64)
        if len(self.poison_mask) != len(self.data) or len(self.true_labels) != len(self.data):
            raise ValueError("mask/true_labels length does not match dataset")

    def __len__(self) -> int:
        return len(self.data)


def poison_dataset(clean: Dataset, plan: PoisonPlan) -> PoisonedDataset:
    """Apply a poison plan: seeded uniform selection, trigger injection, label flips.

    Clean-label mode restricts selection to samples whose true label already
    equals the target and leaves labels untouched; otherwise selected labels
    are flipped to the target.
    """
    n = len(clean)
    if plan.target_label >= clean.num_classes:
        raise ValueError(f"target label {plan.target_label} out of range for {clean.num_classes} classes")
    count = round_count(plan.rate, n)
    rng = np.random.default_rng(plan.seed)
    if plan.clean_label_mode:
        pool = np.nonzero(clean.labels == plan.target_label)[0]
        if len(pool) < count:
            raise ValueError(
                f"clean-label mode needs {count} target-class samples, only {len(pool)} available"
            )
        chosen = rng.choice(pool, size=count, replace=False)
    else:
        chosen = rng.choice(n, size=count, replace=False)
    chosen = np.sort(chosen)

    features = clean.features.copy()
    labels = clean.labels.copy()
    mask = np.zeros(n, dtype=bool)
    mask[chosen] = True
    for i in chosen:
        features[i] = apply_trigger(clean.features[i], plan.trigger)
        if not plan.clean_label_mode:
            labels[i] = plan.target_label
    data = Dataset(features, labels, clean.num_classes)
    return PoisonedDataset(data, mask, plan, clean.labels.copy())


# ---------------------------------------------------------------------------
# synthetic generators

def _class_template_image(cls: int, height: int, width: int) -> np.ndarray:
    fx = 1 + cls % 3
    fy = 1 + (cls // 3) % 3
    phase = 2.0 * np.pi * cls / 9.0
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    pattern = np.cos(2.0 * np.pi * fx * xx / width + phase) * np.cos(2.0 * np.pi * fy * yy / height + 0.5 * phase)
    return 0.5 + 0.35 * pattern


def make_synthetic_image_dataset(num_classes: int, per_class: int, height: int,
                                 width: int, seed: int) -> Dataset:
    """Smooth class-specific low-frequency templates plus Gaussian noise (sigma 0.15)."""
    if height < 8 or width < 8:
        raise ValueError(f"image extents must be at least 8, got {height}x{width}")
    if per_class < 20:
        raise ValueError(f"need at least 20 samples per class, got {per_class}")
    rng = np.random.default_rng(seed)
    n = num_classes * per_class
    features = np.empty((n, 1, height, width), dtype=np.float64)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    for cls in range(num_classes):
        template = _class_template_image(cls, height, width)
        block = template + rng.normal(0.0, 0.15, size=(per_class, 1, height, width))
        features[cls * per_class : (cls + 1) * per_class] = block
    np.clip(features, 0.0, 1.0, out=features)
    return Dataset(features, labels, num_classes)


def make_synthetic_series_dataset(num_classes: int, per_class: int, channels: int,
                                  length: int, seed: int) -> Dataset:
    """Class-specific sinusoids (frequency and phase) plus Gaussian noise."""
    if length < 32:
        raise ValueError(f"series length must be at least 32, got {length}")
    if per_class < 20:
        raise ValueError(f"need at least 20 samples per class, got {per_class}")
    rng = np.random.default_rng(seed)
    n = num_classes * per_class
    t = np.arange(length) / length
    features = np.empty((n, channels, length), dtype=np.float64)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    for cls in range(num_classes):
        freq = 2.0 * (cls + 1)
        phase = 2.0 * np.pi * cls / max(num_classes, 1)
        base = np.stack(
            [0.5 + 0.3 * np.sin(2.0 * np.pi * freq * t + phase + ch * np.pi / 2) for ch in range(channels)]
        )
        block = base + rng.normal(0.0, 0.08, size=(per_class, channels, length))
        features[cls * per_class : (cls + 1) * per_class] = block
    np.clip(features, 0.0, 1.0, out=features)
    return Dataset(features, labels, num_classes)


def split_dataset(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic stratified train/test split (before any poisoning)."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test fraction must be in (0,1), got {test_fraction}")
    rng = np.random.default_rng([seed, 0x5B17])
    test_idx = []
    for cls in range(dataset.num_classes):
        members = np.nonzero(dataset.labels == cls)[0]
        k = round_count(test_fraction, len(members))
        test_idx.append(rng.choice(members, size=k, replace=False))
    test_idx = np.sort(np.concatenate(test_idx))
    train_mask = np.ones(len(dataset), dtype=bool)
    train_mask[test_idx] = False
    return dataset.subset(np.nonzero(train_mask)[0]), dataset.subset(test_idx)


# ---------------------------------------------------------------------------
# file format

def _trigger_fields(trigger: Trigger | None) -> dict[str, str]:
    if trigger is None:
        return {"plan.trigger": "none"}
    fields = {"plan.trigger": trigger.kind}
    if isinstance(trigger, PatchTrigger):
        fields["plan.trigger.pattern_shape"] = fmt_ints(trigger.pattern.shape)
        fields["plan.trigger.pattern"] = fmt_floats(trigger.pattern.ravel())
        fields["plan.trigger.anchor"] = fmt_ints(trigger.anchor)
    elif isinstance(trigger, BlendTrigger):
        fields["plan.trigger.overlay_shape"] = fmt_ints(trigger.overlay.shape)
        fields["plan.trigger.overlay"] = fmt_floats(trigger.overlay.ravel())
        fields["plan.trigger.alpha"] = fmt_float(trigger.alpha)
    elif isinstance(trigger, SinusoidTrigger):
        fields["plan.trigger.amplitude"] = fmt_float(trigger.amplitude)
        fields["plan.trigger.frequency"] = str(trigger.frequency)
    elif isinstance(trigger, SeriesAdditiveTrigger):
        fields["plan.trigger.pattern_shape"] = fmt_ints(trigger.pattern.shape)
        fields["plan.trigger.pattern"] = fmt_floats(trigger.pattern.ravel())
        fields["plan.trigger.position"] = str(trigger.position)
    return fields


def _trigger_from_fields(fields: dict[str, str]) -> Trigger | None:
    kind = fields["plan.trigger"]
    if kind == "none":
        return None
    if kind == "patch":
        shape = tuple(parse_ints(fields["plan.trigger.pattern_shape"]))
        pattern = parse_floats(fields["plan.trigger.pattern"]).reshape(shape)
        anchor = tuple(int(v) for v in parse_ints(fields["plan.trigger.anchor"]))
        return PatchTrigger(pattern, anchor)
    if kind == "blend":
        shape = tuple(parse_ints(fields["plan.trigger.overlay_shape"]))
        overlay = parse_floats(fields["plan.trigger.overlay"]).reshape(shape)
        return BlendTrigger(overlay, float(fields["plan.trigger.alpha"]))
    if kind == "sinusoid":
        return SinusoidTrigger(float(fields["plan.trigger.amplitude"]), int(fields["plan.trigger.frequency"]))
    if kind == "series_additive":
        shape = tuple(parse_ints(fields["plan.trigger.pattern_shape"]))
        pattern = parse_floats(fields["plan.trigger.pattern"]).reshape(shape)
        return SeriesAdditiveTrigger(pattern, int(fields["plan.trigger.position"]))
    raise FileFormatError(f"unknown trigger kind {kind!r}")


def save_dataset(poisoned: PoisonedDataset, path: str):
    """Bit-exact container: features payload plus labels/mask/plan text block."""
    w = Writer()
    w.magic(DATASET_MAGIC)
    w.array(poisoned.data.features)
    fields = {
        "num_classes": str(poisoned.data.num_classes),
        "labels": fmt_ints(poisoned.data.labels),
        "true_labels": fmt_ints(poisoned.true_labels),
        "mask": fmt_ints(poisoned.poison_mask.astype(np.int64)),
        "plan.rate": fmt_float(poisoned.plan.rate),
        "plan.target": str(poisoned.plan.target_label),
        "plan.clean_label": str(int(poisoned.plan.clean_label_mode)),
        "plan.seed": str(poisoned.plan.seed),
    }
    fields.update(_trigger_fields(poisoned.plan.trigger))
    w.text_block(fields)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(w.tobytes())
    os.replace(tmp, path)


def load_dataset(path: str) -> PoisonedDataset:
    with open(path, "rb") as fh:
        reader = Reader(fh.read(), path=path)
    reader.magic(DATASET_MAGIC)
    features = reader.array()
    fields = reader.text_block()
    try:
        num_classes = int(fields["num_classes"])
        labels = parse_ints(fields["labels"])
        true_labels = parse_ints(fields["true_labels"])
        mask = parse_ints(fields["mask"]).astype(bool)
        plan = PoisonPlan(
            rate=float(fields["plan.rate"]),
            target_label=int(fields["plan.target"]),
            trigger=_trigger_from_fields(fields),
            clean_label_mode=bool(int(fields["plan.clean_label"])),
            seed=int(fields["plan.seed"]),
        )
    except KeyError as exc:
        raise FileFormatError(f"{path}: missing field {exc.args[0]!r} in text block") from exc
    if len(labels) != len(features) or len(mask) != len(features):
        raise FileFormatError(
            f"{path}: header says {len(features)} samples but text block has "
            f"{len(labels)} labels / {len(mask)} mask entries"
        )
    data = Dataset(features, labels, num_classes)
    return PoisonedDataset(data, mask, plan, true_labels)


def wrap_clean(dataset: Dataset) -> PoisonedDataset:
    """Rate-0 container for unpoisoned data (test splits on disk)."""
    plan = PoisonPlan(rate=0.0, target_label=0, trigger=None, clean_label_mode=False, seed=0)
    return PoisonedDataset(dataset, np.zeros(len(dataset), dtype=bool), plan, dataset.labels.copy())
