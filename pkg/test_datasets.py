#!/usr/bin/env python3
"""
Tests for dataset loading and client partitioning (offline: synthetic data only)
"""

import tempfile
import warnings
from pathlib import Path

import numpy as np

from datasets import (
    LabeledDataset,
    load_dataset,
    load_partition_manifest,
    make_synthetic_dataset,
    merge_shards,
    partition_iid,
    partition_noniid,
    save_partition_manifest,
    stratified_subset,
)
from errors import DatasetError, PartitionError

# chi-square critical value, 9 degrees of freedom, alpha = 0.01
CHI2_CRITICAL_DF9 = 21.666


def chi_square_uniform(histogram, num_classes):
    counts = np.array([histogram.get(c, 0) for c in range(num_classes)], dtype=float)
    expected = counts.sum() / num_classes
    return float(((counts - expected) ** 2 / expected).sum())


def test_synthetic_is_deterministic_and_valid():
    a = make_synthetic_dataset(seed=4)
    b = make_synthetic_dataset(seed=4)
    assert np.array_equal(a.train.images, b.train.images)
    assert np.array_equal(a.test.labels, b.test.labels)
    assert a.train.image_shape == (28, 28, 1)
    assert len(a.train) == 2000 and len(a.test) == 500
    assert a.train.images.min() >= 0.0 and a.train.images.max() <= 1.0
    assert a.train.class_histogram() == {c: 200 for c in range(10)}


def test_load_dataset_synthetic_options():
    splits = load_dataset("synthetic", image_shape=(16, 16, 3), num_classes=4, train_per_class=5, test_per_class=2)
    assert splits.train.image_shape == (16, 16, 3)
    assert len(splits.train) == 20 and len(splits.test) == 8


def test_unknown_dataset_rejected():
    try:
        load_dataset("imagenet")
    except DatasetError as e:
        assert "imagenet" in str(e)
    else:
        raise AssertionError("expected DatasetError")


def test_missing_files_without_download():
    with tempfile.TemporaryDirectory() as tmp:
        try:
            load_dataset("mnist", root=tmp, download=False)
        except DatasetError:
            pass
        else:
            raise AssertionError("expected DatasetError")


def test_dataset_rejects_bad_pixels():
    try:
        LabeledDataset(np.full((2, 4, 4, 1), 1.5, dtype=np.float32), np.zeros(2, dtype=np.int64), "bad", 2)
    except DatasetError:
        pass
    else:
        raise AssertionError("expected DatasetError")


def test_tensors_are_nchw():
    ds = make_synthetic_dataset(image_shape=(12, 10, 3), train_per_class=2, test_per_class=1).train
    x, y = ds.tensors([0, 1, 2])
    assert tuple(x.shape) == (3, 3, 12, 10)
    assert y.dtype.is_floating_point is False


def test_single_channel_tensors_are_writable_copies():
    ds = make_synthetic_dataset(image_shape=(8, 8, 1), train_per_class=2, test_per_class=1).train
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        x, _ = ds.tensors()
    x += 1.0
    assert float(ds.images.max()) <= 1.0


def test_iid_partition_is_disjoint_and_balanced():
    train = make_synthetic_dataset().train
    shards = partition_iid(train, 20, 100, seed=0)
    assert [len(s) for s in shards] == [100] * 20
    assert len(merge_shards(shards)) == 2000
    for shard in shards:
        assert shard.class_histogram == {c: 10 for c in range(10)}
        assert chi_square_uniform(shard.class_histogram, 10) < CHI2_CRITICAL_DF9


def test_iid_partition_uneven_pool_stays_close_to_uniform():
    train = make_synthetic_dataset(train_per_class=150).train
    shards = partition_iid(train, 10, 70, seed=2)
    for shard in shards:
        assert chi_square_uniform(shard.class_histogram, 10) < CHI2_CRITICAL_DF9


def test_iid_partition_deficit_is_reported():
    train = make_synthetic_dataset(train_per_class=10).train
    try:
        partition_iid(train, 20, 10, seed=0)
    except PartitionError as e:
        assert "deficit 100" in str(e)
    else:
        raise AssertionError("expected PartitionError")


def test_partition_is_seed_deterministic():
    train = make_synthetic_dataset().train
    a = partition_iid(train, 5, 50, seed=9)
    b = partition_iid(train, 5, 50, seed=9)
    c = partition_iid(train, 5, 50, seed=10)
    assert [s.indices for s in a] == [s.indices for s in b]
    assert [s.indices for s in a] != [s.indices for s in c]


def test_noniid_partition_two_classes_per_client():
    train = make_synthetic_dataset().train
    shards = partition_noniid(train, 20, 2, seed=1)
    assert len(shards) == 20
    assert len(merge_shards(shards)) == sum(len(s) for s in shards)
    for shard in shards:
        assert len(shard) == 100
        assert 1 <= len(shard.class_histogram) <= 2
    covered = set()
    for shard in shards:
        covered.update(shard.class_histogram)
    assert covered == set(range(10))


def test_noniid_shrinks_shards_to_cover_clients():
    full = make_synthetic_dataset().train
    keep = np.concatenate([np.flatnonzero(full.labels == 0)[:20], np.flatnonzero(full.labels != 0)])
    train = full.subset(keep, name="imbalanced")
    # 1820 samples: size 45 yields only 36 pure shards, size 40 yields 45
    shards = partition_noniid(train, 20, 2, seed=0)
    assert [len(s) for s in shards] == [80] * 20
    assert 0 not in set().union(*[s.class_histogram for s in shards])
    assert len(merge_shards(shards)) == 1600


def test_merge_shards_rejects_overlap():
    train = make_synthetic_dataset(train_per_class=10).train
    shards = partition_iid(train, 2, 10, seed=0)
    try:
        merge_shards([shards[0], shards[0]])
    except PartitionError:
        pass
    else:
        raise AssertionError("expected PartitionError")


def test_partition_manifest_restores_shards():
    train = make_synthetic_dataset(train_per_class=20).train
    shards = partition_noniid(train, 4, 2, seed=3)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "partition.json"
        save_partition_manifest(shards, path, {"dataset": "synthetic"})
        restored = load_partition_manifest(path, train)
    assert [s.indices for s in restored] == [s.indices for s in shards]
    assert [s.class_histogram for s in restored] == [s.class_histogram for s in shards]


def test_stratified_subset_counts():
    train = make_synthetic_dataset().train
    subset = stratified_subset(train, 30, seed=0, name="mini")
    assert subset.class_histogram() == {c: 30 for c in range(10)}
    assert subset.name == "mini"
    try:
        stratified_subset(train, 500, seed=0)
    except DatasetError:
        pass
    else:
        raise AssertionError("expected DatasetError")


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"✓ {name}")
