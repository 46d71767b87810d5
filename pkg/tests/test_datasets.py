import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proxytransfer.augment import write_image
from proxytransfer.datasets import (
    PatchDataset,
    compute_channel_stats,
    count_from_percent,
    generate_synthetic,
    holdout_split,
    kfold_split,
    load_folder,
    subsample_even,
    write_folder,
)
from proxytransfer.errors import ConfigError, ContractError, IngestionError, SamplingError, SplitError


def label_only(counts):
    """Dataset with 1×1 images, for sampling and split tests."""
    labels = np.repeat(np.arange(len(counts)), counts)
    images = np.zeros((len(labels), 3, 1, 1), dtype=np.uint8)
    return PatchDataset(images, labels, [f"c{i}" for i in range(len(counts))], [f"item{i}" for i in range(len(labels))])


def knn3_accuracy(train_x, train_y, test_x, test_y):
    train_x, test_x = train_x.astype(np.float64), test_x.astype(np.float64)
    d = (test_x**2).sum(1)[:, None] + (train_x**2).sum(1)[None] - 2 * test_x @ train_x.T
    nn = np.argsort(d, axis=1, kind="stable")[:, :3]
    votes = train_y[nn]
    pred = np.array([np.bincount(v).argmax() for v in votes])
    return float((pred == test_y).mean())


# -- synthetic ------------------------------------------------------------------------------

def test_synthetic_cardinality_and_determinism():
    ds = generate_synthetic(24, 200, 32, seed=0)
    assert len(ds) == 4800 and ds.image_size == (32, 32)
    assert ds.class_histogram().tolist() == [200] * 24
    again = generate_synthetic(24, 200, 32, seed=0)
    assert ds.images.tobytes() == again.images.tobytes()
    assert generate_synthetic(3, 2, 16, seed=1).images.tobytes() != generate_synthetic(3, 2, 16, seed=2).images.tobytes()


def test_synthetic_rejects_bad_arguments():
    with pytest.raises(ConfigError):
        generate_synthetic(1, 10, 32, seed=0)
    with pytest.raises(ConfigError):
        generate_synthetic(4, 10, 15, seed=0)


def test_synthetic_classes_are_learnable_by_knn():
    ds = generate_synthetic(24, 200, 32, seed=0)
    split = holdout_split(ds, 40, seed=0)  # 20% held out
    x = ds.images.reshape(len(ds), -1).astype(np.float32) / 255
    acc = knn3_accuracy(x[split.train_indices], ds.labels[split.train_indices],
                        x[split.test_indices], ds.labels[split.test_indices])
    assert acc > 0.70
    assert acc >= 0.99  # observed 1.0 when the oracle was first run


def test_target_families_differ_from_weak_families():
    weak = generate_synthetic(24, 20, 32, seed=0)
    target = generate_synthetic(8, 20, 32, seed=0, class_offset=24)
    assert target.class_names[0] == "class_24"
    means_w = np.stack([weak.images[weak.labels == c].mean(0) for c in range(24)]).reshape(24, -1)
    means_t = np.stack([target.images[target.labels == c].mean(0) for c in range(8)]).reshape(8, -1)
    d = np.abs(means_t[:, None] - means_w[None]).mean(-1)
    assert d.min() > 1.0


# -- folders ----------------------------------------------------------------------------------

def test_folder_round_trip(tmp_path):
    ds = generate_synthetic(3, 4, 16, seed=0)
    write_folder(ds, tmp_path / "d")
    back = load_folder(tmp_path / "d")
    assert back.class_names == ds.class_names
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["per_class_counts"] == {n: 4 for n in ds.class_names}
    assert manifest["provenance"]["seed"] == 0


def test_two_class_folder(tmp_path):
    for name in ("tumor", "normal"):
        (tmp_path / name).mkdir()
        for i in range(3):
            write_image(tmp_path / name / f"{i}.png", np.full((3, 8, 8), i, dtype=np.uint8))
    ds = load_folder(tmp_path)
    assert ds.num_classes == 2 and ds.class_names == ["normal", "tumor"] and len(ds) == 6
    assert ds.refs[0] == "normal/0.png"


def test_folder_errors(tmp_path):
    with pytest.raises(IngestionError):
        load_folder(tmp_path / "missing")
    (tmp_path / "a").mkdir()
    with pytest.raises(IngestionError, match="a"):
        load_folder(tmp_path)
    write_image(tmp_path / "a" / "0.png", np.zeros((3, 8, 8), dtype=np.uint8))
    (tmp_path / "a" / "1.png").write_bytes(b"garbage")
    with pytest.raises(IngestionError, match="1.png"):
        load_folder(tmp_path)
    (tmp_path / "a" / "1.png").unlink()
    write_image(tmp_path / "a" / "2.png", np.zeros((3, 9, 8), dtype=np.uint8))
    with pytest.raises(IngestionError, match="2.png"):
        load_folder(tmp_path)


# -- scarcity sampling ------------------------------------------------------------------------

@pytest.mark.parametrize("n_c", [12, 25, 50, 100, 625])
def test_subsample_even_is_flat(n_c):
    ds = label_only([625] * 8)
    sub = subsample_even(ds, n_c, seed=1)
    assert sub.class_histogram().tolist() == [n_c] * 8
    assert subsample_even(ds, n_c, seed=1).refs == sub.refs
    assert len(set(sub.refs)) == len(sub)


def test_subsample_pcam_sized_and_identity():
    ds = label_only([1200, 1300])
    assert subsample_even(ds, 1000, seed=0).class_histogram().tolist() == [1000, 1000]
    small = label_only([5, 5])
    assert sorted(subsample_even(small, 5, seed=3).refs) == sorted(small.refs)
    with pytest.raises(SamplingError):
        subsample_even(small, 6, seed=0)


def test_count_from_percent():
    assert count_from_percent(2, 625) == 13  # 12.5 rounds half up
    assert count_from_percent(9, 625) == 56
    assert count_from_percent(100, 625) == 625


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=2, max_size=6), st.integers(0, 10_000), st.data())
def test_subsample_property(counts, seed, data):
    n_c = data.draw(st.integers(1, min(counts)))
    sub = subsample_even(label_only(counts), n_c, seed)
    assert np.all(sub.class_histogram() == n_c)


# -- splits -------------------------------------------------------------------------------------

def test_kfold_625_per_class():
    ds = label_only([625] * 8)
    plans = kfold_split(ds, 10, seed=0)
    assert len(plans) == 10
    tests = [p.test_indices for p in plans]
    for t in tests:
        sizes = np.bincount(ds.labels[t], minlength=8)
        assert set(sizes.tolist()) <= {62, 63}
    per_class = np.array([np.bincount(ds.labels[t], minlength=8) for t in tests])
    assert per_class.sum(axis=0).tolist() == [625] * 8
    allt = np.concatenate(tests)
    assert len(allt) == len(ds) and len(np.unique(allt)) == len(ds)
    for p in plans:
        assert len(np.intersect1d(p.train_indices, p.test_indices)) == 0
        assert len(p.train_indices) + len(p.test_indices) == len(ds)
    again = kfold_split(ds, 10, seed=0)
    assert all(np.array_equal(a.test_indices, b.test_indices) for a, b in zip(plans, again))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(3, 30), min_size=2, max_size=5), st.integers(2, 3), st.integers(0, 1000))
def test_kfold_is_a_stratified_partition(counts, k, seed):
    ds = label_only(counts)
    plans = kfold_split(ds, k, seed)
    allt = np.concatenate([p.test_indices for p in plans])
    assert np.array_equal(np.sort(allt), np.arange(len(ds)))
    sizes = np.array([np.bincount(ds.labels[p.test_indices], minlength=len(counts)) for p in plans])
    assert np.all(sizes.max(axis=0) - sizes.min(axis=0) <= 1)


def test_kfold_rejects_small_classes():
    with pytest.raises(SplitError):
        kfold_split(label_only([10, 9]), 10, seed=0)


def test_holdout_split():
    ds = label_only([20, 30])
    plan = holdout_split(ds, 5, seed=2)
    assert np.bincount(ds.labels[plan.test_indices]).tolist() == [5, 5]
    assert len(np.intersect1d(plan.train_indices, plan.test_indices)) == 0
    assert len(plan.train_indices) + len(plan.test_indices) == 50
    with pytest.raises(SplitError):
        holdout_split(ds, 20, seed=0)


# -- channel statistics ----------------------------------------------------------------------

def test_channel_stats_hand_example():
    # two 2×2 images; channel 0 holds {0, 0.2, 0.4, 0.6} and {1, 1, 1, 1}
    a = np.zeros((3, 2, 2))
    a[0] = [[0.0, 0.2], [0.4, 0.6]]
    b = np.ones((3, 2, 2))
    mean, std = compute_channel_stats(np.stack([a, b]))
    assert mean[0] == pytest.approx(0.65, abs=1e-7)
    assert std[0] == pytest.approx(np.sqrt(np.mean((np.array([0, .2, .4, .6, 1, 1, 1, 1]) - 0.65) ** 2)), abs=1e-7)
    assert mean[1] == pytest.approx(0.5, abs=1e-7) and std[1] == pytest.approx(0.5, abs=1e-7)


def test_channel_stats_constant_and_black():
    half = np.full((2, 3, 4, 4), 0.5)
    assert np.allclose(compute_channel_stats(half)[0], 0.5)
    black = np.zeros((2, 3, 4, 4), dtype=np.uint8)
    mean, std = compute_channel_stats(black)
    assert np.all(mean == 0) and np.all(std == 0)
    from proxytransfer.augment import AugmentConfig
    with pytest.raises(ConfigError):
        AugmentConfig(channel_mean=tuple(mean), channel_std=tuple(std))
    with pytest.raises(ContractError):
        compute_channel_stats(np.zeros((0, 3, 4, 4)))


def test_channel_stats_use_only_given_indices():
    ds = label_only([2, 2])
    ds.images[2:] = 255
    assert np.all(compute_channel_stats(ds, [0, 1])[0] == 0)
    assert np.all(compute_channel_stats(ds, [2, 3])[0] == 1)
