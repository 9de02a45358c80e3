"""Evaluation metrics: clean accuracy, attack success rate, detection and
recovery quality of a partition against hidden ground truth.

Models are duck-typed: anything with ``predict_logits(features) -> logits``
works, so tests can substitute stubs.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .container import fmt_float
from .forge import Dataset, Trigger, apply_trigger
from .ledger import Partition


def cross_entropy_values(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample stabilized cross-entropy from plain logit arrays."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(labels)), labels]


def clean_accuracy(model, clean_test: Dataset) -> float:
    """Fraction of untriggered test samples whose argmax matches the label."""
    if len(clean_test) == 0:
        raise ValueError("empty test set")
    preds = model.predict_logits(clean_test.features).argmax(axis=1)
    return float((preds == clean_test.labels).mean())


def attack_success_counts(model, clean_test: Dataset, trigger: Trigger,
                          target: int) -> tuple[int, int]:
    """(hits, denominator) with true-target-class samples excluded."""
    keep = np.nonzero(clean_test.labels != target)[0]
    if keep.size == 0:
        raise ValueError("attack success rate undefined: every test sample has the target label")
    triggered = np.stack([apply_trigger(clean_test.features[i], trigger) for i in keep])
    preds = model.predict_logits(triggered).argmax(axis=1)
    return int((preds == target).sum()), int(keep.size)


def attack_success_rate(model, clean_test: Dataset, trigger: Trigger, target: int) -> float:
    """Fraction of triggered non-target test samples classified as the target."""
    hits, total = attack_success_counts(model, clean_test, trigger, target)
    return hits / total


def detection_metrics(part: Partition, poison_mask: np.ndarray):
    """(precision_clean, precision_core, recall_suspect) against ground truth.

    recall_suspect is None when the mask contains no poisoned samples.
    """
    poison_mask = np.asarray(poison_mask, dtype=bool)
    n = len(part.clean_indices) + len(part.suspect_indices)
    if len(poison_mask) != n:
        raise ValueError(f"mask covers {len(poison_mask)} samples, partition covers {n}")
    precision_clean = float((~poison_mask[part.clean_indices]).mean())
    precision_core = float(poison_mask[part.core_indices].mean())
    total_poisoned = int(poison_mask.sum())
    if total_poisoned == 0:
        recall_suspect = None
    else:
        recall_suspect = float(poison_mask[part.suspect_indices].sum() / total_poisoned)
    return precision_clean, precision_core, recall_suspect


def recovery_precision(part: Partition, poison_mask: np.ndarray,
                       original_labels: np.ndarray):
    """Over truly poisoned suspects, the fraction whose rectified label equals
    the pre-poison label; None (absent) when no poisoned sample was suspected."""
    poison_mask = np.asarray(poison_mask, dtype=bool)
    original_labels = np.asarray(original_labels)
    hit = poison_mask[part.suspect_indices]
    if not hit.any():
        return None
    rectified = part.rectified_labels[hit]
    truth = original_labels[part.suspect_indices[hit]]
    return float((rectified == truth).mean())


_FRACTION_FIELDS = (
    "clean_accuracy",
    "attack_success_rate",
    "precision_clean",
    "precision_core",
    "recall_suspect",
    "recovery_precision",
)


@dataclass
class MetricsReport:
    clean_accuracy: float
    attack_success_rate: float | None = None
    precision_clean: float | None = None
    precision_core: float | None = None
    recall_suspect: float | None = None
    recovery_precision: float | None = None
    epoch_measured: int | None = None
    asr_numerator: int | None = None
    asr_denominator: int | None = None

    def __post_init__(self):
        for name in _FRACTION_FIELDS:
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0,1], got {value}")

    def to_fields(self, prefix: str = "") -> dict[str, str]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if f.name in _FRACTION_FIELDS:
                out[prefix + f.name] = fmt_float(value)
            else:
                out[prefix + f.name] = str(int(value))
        return out

    @classmethod
    def from_fields(cls, data: dict[str, str], prefix: str = "") -> "MetricsReport":
        kwargs = {}
        for f in fields(cls):
            key = prefix + f.name
            if key not in data:
                continue
            kwargs[f.name] = float(data[key]) if f.name in _FRACTION_FIELDS else int(data[key])
        return cls(**kwargs)
