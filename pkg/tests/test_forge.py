import numpy as np
import pytest

from backdoorlab.container import FileFormatError, Reader
from backdoorlab.forge import (
    BlendTrigger,
    Dataset,
    PatchTrigger,
    PoisonPlan,
    SeriesAdditiveTrigger,
    SinusoidTrigger,
    apply_trigger,
    default_blend_overlay,
    default_patch_pattern,
    default_series_pattern,
    load_dataset,
    make_synthetic_image_dataset,
    make_synthetic_series_dataset,
    poison_dataset,
    round_count,
    save_dataset,
    split_dataset,
    wrap_clean,
)


def small_image_dataset(seed=7):
    return make_synthetic_image_dataset(4, 50, 16, 16, seed)


def patch_plan(rate=0.1, seed=11, clean_label=False, target=0):
    return PoisonPlan(rate, target, PatchTrigger(default_patch_pattern(1, 3)), clean_label, seed)


def test_image_dataset_construction():
    ds = make_synthetic_image_dataset(4, 500, 16, 16, seed=7)
    assert len(ds) == 2000
    assert ds.features.shape == (2000, 1, 16, 16)
    np.testing.assert_array_equal(np.bincount(ds.labels), [500] * 4)
    assert ds.kind == "image"
    assert 0.0 <= ds.features.min() and ds.features.max() <= 1.0


def test_image_dataset_deterministic():
    a = make_synthetic_image_dataset(3, 30, 16, 16, seed=5)
    b = make_synthetic_image_dataset(3, 30, 16, 16, seed=5)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_image_dataset_rejects_degenerate_extents():
    with pytest.raises(ValueError):
        make_synthetic_image_dataset(4, 50, 7, 16, seed=0)
    with pytest.raises(ValueError):
        make_synthetic_image_dataset(4, 10, 16, 16, seed=0)


def test_series_dataset_construction():
    ds = make_synthetic_series_dataset(3, 400, 2, 64, seed=3)
    assert len(ds) == 1200
    assert ds.features.shape == (1200, 2, 64)
    assert ds.kind == "series"
    again = make_synthetic_series_dataset(3, 400, 2, 64, seed=3)
    np.testing.assert_array_equal(ds.features, again.features)


def test_series_dataset_rejects_short_length():
    with pytest.raises(ValueError):
        make_synthetic_series_dataset(3, 50, 2, 31, seed=0)


def test_patch_trigger_forced_pixels():
    x = np.zeros((1, 8, 8))
    out = apply_trigger(x, PatchTrigger(np.ones((1, 2, 2))))
    assert out.sum() == 4.0
    assert out[0, 6:, 6:].min() == 1.0
    assert x.sum() == 0.0  # input untouched


def test_patch_trigger_idempotent():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(1, 8, 8))
    t = PatchTrigger(default_patch_pattern(1, 3))
    once = apply_trigger(x, t)
    np.testing.assert_array_equal(apply_trigger(once, t), once)


def test_blend_trigger_uniform():
    out = apply_trigger(np.zeros((1, 4, 4)), BlendTrigger(np.ones((1, 4, 4)), alpha=0.2))
    np.testing.assert_allclose(out, 0.2, rtol=0, atol=1e-15)


def test_blend_alpha_validation():
    with pytest.raises(ValueError):
        BlendTrigger(np.ones((1, 4, 4)), alpha=1.0)


def test_sinusoid_trigger_column_profile():
    width = 16
    t = SinusoidTrigger(amplitude=0.04, frequency=3)
    out = apply_trigger(np.full((1, 8, width), 0.5), t)
    cols = np.arange(width)
    expected = 0.5 + 0.04 * np.sin(2 * np.pi * 3 * cols / width)
    np.testing.assert_allclose(out.mean(axis=(0, 1)), expected, rtol=0, atol=1e-12)


def test_series_additive_trigger():
    x = np.zeros((2, 64))
    pattern = default_series_pattern(2, 64, amplitude=0.1, fraction=0.1)
    out = apply_trigger(x, SeriesAdditiveTrigger(pattern))
    assert pattern.shape == (2, 6)
    np.testing.assert_allclose(out[:, -6:], 0.1, rtol=0, atol=0)
    assert out[:, :-6].sum() == 0.0


def test_trigger_shape_mismatch():
    with pytest.raises(ValueError):
        apply_trigger(np.zeros((1, 4, 4)), PatchTrigger(np.ones((1, 5, 5))))
    with pytest.raises(ValueError):
        apply_trigger(np.zeros((2, 64)), SeriesAdditiveTrigger(np.ones((3, 4))))


def test_poison_counts_at_ten_percent():
    ds = make_synthetic_image_dataset(4, 500, 16, 16, seed=7)
    poisoned = poison_dataset(ds, patch_plan(rate=0.1))
    assert poisoned.poison_mask.sum() == 200


def test_poison_rate_zero_is_identity():
    ds = small_image_dataset()
    poisoned = poison_dataset(ds, PoisonPlan(0.0, 0, None))
    assert not poisoned.poison_mask.any()
    np.testing.assert_array_equal(poisoned.data.features, ds.features)
    np.testing.assert_array_equal(poisoned.data.labels, ds.labels)


def test_dirty_label_flips_every_masked_label():
    ds = small_image_dataset()
    poisoned = poison_dataset(ds, patch_plan(target=2))
    for i in range(len(ds)):  # exhaustive scan
        if poisoned.poison_mask[i]:
            assert poisoned.data.labels[i] == 2
            assert (poisoned.data.features[i] != ds.features[i]).any()
        else:
            assert poisoned.data.labels[i] == ds.labels[i]
            np.testing.assert_array_equal(poisoned.data.features[i], ds.features[i])
    np.testing.assert_array_equal(poisoned.true_labels, ds.labels)


def test_poison_selection_deterministic():
    ds = small_image_dataset()
    a = poison_dataset(ds, patch_plan(seed=13))
    b = poison_dataset(ds, patch_plan(seed=13))
    np.testing.assert_array_equal(a.poison_mask, b.poison_mask)
    np.testing.assert_array_equal(a.data.features, b.data.features)


def test_clean_label_mode_keeps_labels():
    ds = small_image_dataset()
    plan = PoisonPlan(0.05, 1, SinusoidTrigger(), clean_label_mode=True, seed=3)
    poisoned = poison_dataset(ds, plan)
    np.testing.assert_array_equal(poisoned.data.labels, ds.labels)
    assert (ds.labels[poisoned.poison_mask] == 1).all()


def test_clean_label_mode_rejects_small_target_class():
    ds = small_image_dataset()
    labels = ds.labels[:80].copy()
    labels[labels == 1] = 0
    labels[:5] = 1  # only 5 samples of the target class
    unbalanced = Dataset(ds.features[:80], labels, 4)
    plan = PoisonPlan(0.19, 1, SinusoidTrigger(), clean_label_mode=True, seed=3)
    with pytest.raises(ValueError, match="clean-label"):
        poison_dataset(unbalanced, plan)  # needs 15 of 5


def test_save_load_round_trip(tmp_path):
    ds = small_image_dataset()
    poisoned = poison_dataset(ds, patch_plan())
    path = str(tmp_path / "data.abl")
    save_dataset(poisoned, path)
    loaded = load_dataset(path)
    np.testing.assert_array_equal(loaded.data.features, poisoned.data.features)
    np.testing.assert_array_equal(loaded.data.labels, poisoned.data.labels)
    np.testing.assert_array_equal(loaded.true_labels, poisoned.true_labels)
    np.testing.assert_array_equal(loaded.poison_mask, poisoned.poison_mask)
    assert loaded.plan.rate == poisoned.plan.rate
    assert loaded.plan.seed == poisoned.plan.seed
    np.testing.assert_array_equal(loaded.plan.trigger.pattern, poisoned.plan.trigger.pattern)


def test_save_load_all_trigger_kinds(tmp_path):
    ds = small_image_dataset()
    series = make_synthetic_series_dataset(3, 40, 2, 64, seed=1)
    cases = [
        (ds, BlendTrigger(default_blend_overlay(ds.features.shape[1:]), 0.2)),
        (ds, SinusoidTrigger(0.08, 6)),
        (series, SeriesAdditiveTrigger(default_series_pattern(2, 64))),
    ]
    for i, (base, trig) in enumerate(cases):
        poisoned = poison_dataset(base, PoisonPlan(0.1, 0, trig, seed=i))
        path = str(tmp_path / f"t{i}.abl")
        save_dataset(poisoned, path)
        loaded = load_dataset(path)
        np.testing.assert_array_equal(loaded.data.features, poisoned.data.features)
        assert loaded.plan.trigger.kind == trig.kind


def test_truncated_file_reports_offset(tmp_path):
    ds = small_image_dataset()
    path = str(tmp_path / "data.abl")
    save_dataset(poison_dataset(ds, patch_plan()), path)
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:100])
    with pytest.raises(FileFormatError, match="byte"):
        load_dataset(path)


def test_bad_magic_reports_offset(tmp_path):
    path = str(tmp_path / "junk.abl")
    open(path, "wb").write(b"NOPE" + b"\x00" * 64)
    with pytest.raises(FileFormatError, match="at byte 0"):
        load_dataset(path)


def test_payload_count_matches_header(tmp_path):
    ds = small_image_dataset()
    path = str(tmp_path / "data.abl")
    save_dataset(poison_dataset(ds, patch_plan()), path)
    reader = Reader(open(path, "rb").read(), path=path)
    reader.magic(b"ABLF")
    tag, rank = reader.u8(), reader.u8()
    shape = tuple(reader.u64() for _ in range(rank))
    assert tag == 1 and shape == ds.features.shape
    payload = reader.take(int(np.prod(shape)) * 8)
    assert len(payload) // 8 == ds.features.size


def test_wrap_clean_round_trip(tmp_path):
    ds = small_image_dataset()
    path = str(tmp_path / "clean.abl")
    save_dataset(wrap_clean(ds), path)
    loaded = load_dataset(path)
    assert loaded.plan.rate == 0.0 and loaded.plan.trigger is None
    np.testing.assert_array_equal(loaded.data.features, ds.features)


def test_split_dataset_stratified_and_deterministic():
    ds = small_image_dataset()
    train, test = split_dataset(ds, 0.2, seed=9)
    train2, test2 = split_dataset(ds, 0.2, seed=9)
    np.testing.assert_array_equal(train.features, train2.features)
    np.testing.assert_array_equal(test.labels, test2.labels)
    assert len(train) + len(test) == len(ds)
    np.testing.assert_array_equal(np.bincount(test.labels), [10] * 4)


def test_round_count_half_up():
    assert round_count(0.2, 100) == 20
    assert round_count(0.01, 100) == 1
    assert round_count(0.01, 50) == 1  # 0.5 rounds up
    assert round_count(0.1, 2000) == 200
