import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backdoorlab.forge import round_count
from backdoorlab.ledger import LossLedger, Partition, PartitionConfig, loss_drop, partition


def brute_force_drop(history):
    total = 0.0
    for i in range(2, len(history) + 1):
        total += (history[i - 1] - history[i - 2]) / (i - 1) ** 2
    return total


def random_inputs(rng, n, num_classes=4, epochs=5):
    ledger = LossLedger(n)
    for e in range(epochs):
        ledger.record_epoch_losses(e + 1, rng.uniform(0.0, 3.0, size=n))
    preds = rng.integers(0, num_classes, size=n)
    probs = rng.dirichlet(np.ones(num_classes), size=n)
    return ledger, preds, probs


def test_loss_drop_hand_case_exact():
    assert loss_drop([2.0, 1.0, 0.5]) == -1.125


def test_loss_drop_constant_history_is_zero():
    assert loss_drop([0.7] * 6) == 0.0


def test_loss_drop_requires_two_epochs():
    with pytest.raises(ValueError):
        loss_drop([1.0])


def test_loss_drop_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        history = rng.uniform(0.0, 5.0, size=rng.integers(2, 12))
        assert abs(loss_drop(history) - brute_force_drop(history)) < 1e-12


def test_ledger_records_and_vectorized_drops():
    ledger = LossLedger(3)
    ledger.record_epoch_losses(1, [2.0, 1.0, 0.5])
    ledger.record_epoch_losses(2, [1.0, 1.0, 0.5])
    assert ledger.epochs_recorded == 2
    ledger.record_epoch_losses(3, [0.5, 1.0, 0.5])
    drops = ledger.loss_drops()
    np.testing.assert_allclose(drops[0], -1.125, rtol=0, atol=0)
    assert drops[1] == 0.0 and drops[2] == 0.0
    np.testing.assert_array_equal(ledger.history(0), [2.0, 1.0, 0.5])


def test_ledger_rejects_duplicate_epoch():
    ledger = LossLedger(2)
    ledger.record_epoch_losses(1, [1.0, 2.0])
    with pytest.raises(ValueError, match="already recorded"):
        ledger.record_epoch_losses(1, [1.0, 2.0])


def test_ledger_rejects_wrong_length_and_lists_missing():
    ledger = LossLedger(4)
    with pytest.raises(ValueError, match="one loss per sample"):
        ledger.record_epoch_losses(1, [1.0, 2.0])
    with pytest.raises(ValueError, match=r"\[1, 3\]"):
        ledger.record_epoch_losses(1, [1.0, np.nan, 2.0, np.inf])


def test_partition_sizes_match_paper_defaults():
    rng = np.random.default_rng(1)
    ledger, preds, probs = random_inputs(rng, 100)
    part = partition(ledger, PartitionConfig(0.80, 0.01), preds, probs)
    assert len(part.suspect_indices) == 20
    assert len(part.core_indices) == 1
    assert len(part.clean_indices) == 80


def test_partition_tie_break_on_equal_drops():
    ledger = LossLedger(100)
    ledger.record_epoch_losses(1, np.ones(100))
    ledger.record_epoch_losses(2, np.ones(100))
    preds = np.zeros(100, dtype=int)
    probs = np.tile([0.1, 0.2, 0.3, 0.4], (100, 1))
    part = partition(ledger, PartitionConfig(0.80, 0.01), preds, probs)
    np.testing.assert_array_equal(part.suspect_indices, np.arange(20))
    np.testing.assert_array_equal(part.core_indices, [0])


def test_partition_matches_brute_force_recomputation():
    rng = np.random.default_rng(2)
    for _ in range(25):
        n = int(rng.integers(50, 250))
        ledger, preds, probs = random_inputs(rng, n)
        cfg = PartitionConfig(0.80, 0.01)
        part = partition(ledger, cfg, preds, probs)

        drops = np.array([brute_force_drop(ledger.history(i)) for i in range(n)])
        ranked = sorted(range(n), key=lambda i: (drops[i], i))
        n_suspect = round_count(cfg.suspect_fraction, n)
        n_core = round_count(cfg.core_fraction, n)
        assert list(part.suspect_indices) == ranked[:n_suspect]
        assert list(part.core_indices) == ranked[:n_core]
        assert set(part.core_indices) <= set(part.suspect_indices)


def test_partition_invariants_on_random_ledgers():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(50, 300))
        ledger, preds, probs = random_inputs(rng, n, epochs=int(rng.integers(2, 7)))
        cfg = PartitionConfig(0.80, 0.01)
        part = partition(ledger, cfg, preds, probs)
        combined = np.concatenate([part.clean_indices, part.suspect_indices])
        assert len(np.unique(combined)) == n  # disjoint and exhaustive
        assert len(part.suspect_indices) == round_count(cfg.suspect_fraction, n)
        assert len(part.core_indices) == round_count(cfg.core_fraction, n)
        assert (part.rectified_labels != part.inferred_backdoor_class).all()


def test_partition_is_pure_function_of_inputs():
    rng = np.random.default_rng(4)
    ledger, preds, probs = random_inputs(rng, 120)
    a = partition(ledger, PartitionConfig(), preds, probs)
    b = partition(ledger, PartitionConfig(), preds, probs)
    np.testing.assert_array_equal(a.suspect_indices, b.suspect_indices)
    np.testing.assert_array_equal(a.rectified_labels, b.rectified_labels)
    assert a.inferred_backdoor_class == b.inferred_backdoor_class


def test_partition_monotone_in_clean_fraction():
    rng = np.random.default_rng(5)
    ledger, preds, probs = random_inputs(rng, 200)
    suspects = {}
    for clean_fraction in (0.70, 0.80, 0.90):
        part = partition(ledger, PartitionConfig(clean_fraction, 0.01), preds, probs)
        suspects[clean_fraction] = set(part.suspect_indices)
    assert suspects[0.90] <= suspects[0.80] <= suspects[0.70]


def test_partition_majority_vote_ties_to_smallest_class():
    ledger = LossLedger(100)
    ledger.record_epoch_losses(1, np.arange(100, dtype=float))
    ledger.record_epoch_losses(2, np.zeros(100))
    # samples 98, 99 have the steepest drops; give them split votes
    preds = np.zeros(100, dtype=int)
    preds[99] = 3
    preds[98] = 1
    probs = np.tile([0.25, 0.25, 0.25, 0.25], (100, 1))
    part = partition(ledger, PartitionConfig(0.80, 0.02), preds, probs)
    np.testing.assert_array_equal(part.core_indices, [99, 98])
    assert part.inferred_backdoor_class == 1  # tie between 3 and 1 -> smallest
    assert part.vote_share == 0.5
    # rectified: uniform probabilities with class 1 masked -> smallest index 0
    assert (part.rectified_labels == 0).all()


def test_partition_empty_core_fails():
    rng = np.random.default_rng(6)
    ledger, preds, probs = random_inputs(rng, 30)
    with pytest.raises(ValueError, match="core is empty"):
        partition(ledger, PartitionConfig(0.80, 0.01), preds, probs)


def test_partition_config_validation():
    with pytest.raises(ValueError):
        PartitionConfig(clean_fraction=0.4, core_fraction=0.01)  # suspect >= 0.5
    with pytest.raises(ValueError):
        PartitionConfig(clean_fraction=0.9, core_fraction=0.2)  # core > suspect
    with pytest.raises(ValueError):
        PartitionConfig(clean_fraction=0.9, core_fraction=0.0)


@settings(max_examples=60, deadline=None)
@given(
    data=st.lists(
        st.lists(st.floats(0.0, 10.0, allow_nan=False), min_size=2, max_size=8),
        min_size=40,
        max_size=120,
    )
)
def test_partition_covers_everything_property(data):
    n_epochs = min(len(h) for h in data)
    n = len(data)
    ledger = LossLedger(n)
    for e in range(n_epochs):
        ledger.record_epoch_losses(e + 1, [h[e] for h in data])
    preds = np.zeros(n, dtype=int)
    probs = np.full((n, 3), 1.0 / 3.0)
    part = partition(ledger, PartitionConfig(0.80, 0.02), preds, probs)
    assert sorted(np.concatenate([part.clean_indices, part.suspect_indices])) == list(range(n))
    assert (part.rectified_labels != part.inferred_backdoor_class).all()
