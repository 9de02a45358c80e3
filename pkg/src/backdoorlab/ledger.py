"""Per-sample loss histories, the weighted loss-drop score, and the
clean/suspect/core partition with label rectification.

The score for a sample with recorded losses L_1..L_n is

    sum_{i=2..n} (L_i - L_{i-1}) / (i-1)^2

so early drops dominate and steeper declines give more negative values.
Samples are ranked ascending (most negative first): the top suspect
fraction becomes the suspect set, its head the recovery core.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forge import round_count


def loss_drop(history) -> float:
    """Early-epoch-weighted sum of per-epoch loss differences for one sample."""
    history = np.asarray(history, dtype=np.float64)
    n = len(history)
    if n < 2:
        raise ValueError(f"loss drop needs at least 2 recorded epochs, got {n}")
    diffs = history[1:] - history[:-1]
    weights = 1.0 / np.arange(1, n, dtype=np.float64) ** 2
    return float(np.sum(diffs * weights))


class LossLedger:
    """Append-only per-sample, per-epoch loss history."""

    def __init__(self, num_samples: int):
        if num_samples < 1:
            raise ValueError("ledger needs at least one sample")
        self.num_samples = num_samples
        self._epoch_ids: list[int] = []
        self._rows: list[np.ndarray] = []

    @property
    def epochs_recorded(self) -> int:
        return len(self._rows)

    @property
    def epoch_ids(self) -> list[int]:
        return list(self._epoch_ids)

    def record_epoch_losses(self, epoch_id: int, losses) -> None:
        losses = np.asarray(losses, dtype=np.float64)
        if losses.shape != (self.num_samples,):
            raise ValueError(
                f"expected one loss per sample ({self.num_samples}), got shape {losses.shape}"
            )
        missing = np.nonzero(~np.isfinite(losses))[0]
        if missing.size:
            shown = ", ".join(str(i) for i in missing[:10])
            raise ValueError(f"missing/non-finite losses for sample indices [{shown}]")
        if epoch_id in self._epoch_ids:
            raise ValueError(f"epoch {epoch_id} already recorded")
        self._epoch_ids.append(epoch_id)
        self._rows.append(losses.copy())

    def history(self, index: int) -> np.ndarray:
        return np.array([row[index] for row in self._rows])

    def loss_drops(self) -> np.ndarray:
        """Vectorized loss-drop score for every sample."""
        n = self.epochs_recorded
        if n < 2:
            raise ValueError(f"loss drop needs at least 2 recorded epochs, got {n}")
        table = np.stack(self._rows)  # n x N
        diffs = table[1:] - table[:-1]
        weights = 1.0 / np.arange(1, n, dtype=np.float64) ** 2
        return diffs.T @ weights


@dataclass(frozen=True)
class PartitionConfig:
    clean_fraction: float = 0.80
    core_fraction: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.core_fraction <= self.suspect_fraction < 0.5:
            raise ValueError(
                f"need 0 < core_fraction <= 1-clean_fraction < 0.5, got "
                f"clean={self.clean_fraction}, core={self.core_fraction}"
            )

    @property
    def suspect_fraction(self) -> float:
        return 1.0 - self.clean_fraction


@dataclass
class Partition:
    clean_indices: np.ndarray     # ascending
    suspect_indices: np.ndarray   # rank order, steepest drop first
    core_indices: np.ndarray      # head of the suspect ranking
    inferred_backdoor_class: int
    rectified_labels: np.ndarray  # aligned with suspect_indices
    vote_share: float


def partition(ledger: LossLedger, config: PartitionConfig,
              second_head_predictions: np.ndarray,
              main_head_probabilities: np.ndarray) -> Partition:
    """Split all samples into clean/suspect by ranked loss drop and rectify
    suspect labels away from the inferred backdoor class.

    Ranking ties break by ascending sample index. The backdoor class is the
    majority vote of the second head over the core (ties to the smallest
    class); each suspect's rectified label is the main head's most probable
    class excluding that vote (ties to the smallest class).
    """
    n = ledger.num_samples
    preds = np.asarray(second_head_predictions)
    probs = np.asarray(main_head_probabilities, dtype=np.float64)
    if preds.shape != (n,):
        raise ValueError(f"second-head predictions must cover all {n} samples, got {preds.shape}")
    if probs.ndim != 2 or probs.shape[0] != n:
        raise ValueError(f"main-head probabilities must be N x C, got {probs.shape}")
    num_classes = probs.shape[1]

    n_suspect = round_count(config.suspect_fraction, n)
    n_core = round_count(config.core_fraction, n)
    if n_core < 1:
        raise ValueError(f"core is empty: round({config.core_fraction} * {n}) = 0")

    drops = ledger.loss_drops()
    order = np.argsort(drops, kind="stable")  # stable sort ties -> ascending index
    suspect = order[:n_suspect]
    clean = np.sort(order[n_suspect:])
    core = order[:n_core]

    votes = np.bincount(preds[core].astype(np.int64), minlength=num_classes)
    inferred = int(votes.argmax())
    vote_share = float(votes[inferred]) / n_core

    masked = probs[suspect].copy()
    masked[:, inferred] = -np.inf
    rectified = masked.argmax(axis=1).astype(np.int64)

    return Partition(
        clean_indices=clean,
        suspect_indices=suspect.copy(),
        core_indices=core.copy(),
        inferred_backdoor_class=inferred,
        rectified_labels=rectified,
        vote_share=vote_share,
    )
