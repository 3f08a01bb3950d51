#!/usr/bin/env python3
"""
Tests for watermark generation, auditing and persistence
"""

import tempfile
import warnings
from pathlib import Path

import numpy as np

from datasets import make_synthetic_dataset
from errors import ConfigError, TamperError
from watermark import (
    LOGO,
    MAX_FOOTPRINT,
    MIN_FOOTPRINT,
    WatermarkMethod,
    audit,
    generate_embedded_content,
    generate_unrelate,
    generate_unstruct,
    generate_waffle_pattern,
    generate_watermark,
    load_watermark,
    make_patterns,
    save_watermark,
)

MNIST_SHAPE = (28, 28, 1)


def test_waffle_pattern_is_balanced_and_audited():
    wm = generate_waffle_pattern(MNIST_SHAPE, 10, 100, seed=0)
    assert len(wm) == 100
    assert wm.class_counts() == {c: 10 for c in range(10)}
    assert wm.images.dtype == np.float32
    assert tuple(wm.images.shape) == (100, 28, 28, 1)
    assert all(audit(wm).values())


def test_waffle_pattern_is_seed_deterministic():
    a = generate_waffle_pattern(MNIST_SHAPE, 10, 100, seed=5)
    b = generate_waffle_pattern(MNIST_SHAPE, 10, 100, seed=5)
    c = generate_waffle_pattern(MNIST_SHAPE, 10, 100, seed=6)
    assert np.array_equal(a.images, b.images) and a.commitment == b.commitment
    assert a.commitment != c.commitment


def test_patterns_are_distinct_shapes_with_bounded_footprint():
    patterns = make_patterns(MNIST_SHAPE, 10, seed=1)
    assert len({p.shape_kind for p in patterns}) == 10
    assert len({p.key() for p in patterns}) == 10
    for p in patterns:
        ratio = p.scale ** 2 / (28 * 28)
        assert MIN_FOOTPRINT <= ratio <= MAX_FOOTPRINT
        row, col = p.position
        assert row + p.scale <= 28 and col + p.scale <= 28
        assert p.footprint().any()


def test_same_class_images_share_their_pattern():
    wm = generate_waffle_pattern(MNIST_SHAPE, 10, 100, seed=2)
    for pattern in wm.patterns:
        rows = np.flatnonzero(wm.labels == pattern.class_id)
        r, c = pattern.position
        region = wm.images[rows, r:r + pattern.scale, c:c + pattern.scale]
        stamped = region[:, pattern.footprint()]
        assert np.allclose(stamped, np.asarray(pattern.color, dtype=np.float32))


def test_size_must_divide_classes():
    try:
        generate_waffle_pattern(MNIST_SHAPE, 10, 95, seed=0)
    except ConfigError:
        pass
    else:
        raise AssertionError("expected ConfigError")


def test_embedded_content_relabels_and_stamps_logo():
    pool = make_synthetic_dataset(train_per_class=20).train
    wm = generate_embedded_content(pool, 10, 100, seed=0)
    assert wm.source_labels is not None
    assert all(int(t) != int(s) for t, s in zip(wm.labels, wm.source_labels))
    assert wm.class_counts() == {c: 10 for c in range(10)}
    h, w = LOGO.shape
    assert np.array_equal(wm.images[:, -h:, -w:, 0], np.broadcast_to(LOGO, (100, h, w)))
    assert audit(wm)["labels_differ_from_source"]


def test_embedded_content_single_class_pool():
    full = make_synthetic_dataset(train_per_class=30).train
    pool = full.subset(np.flatnonzero(full.labels == 3), name="class-3")
    wm = generate_embedded_content(pool, 10, 20, seed=0)
    assert 3 not in set(int(v) for v in wm.labels)
    assert all(int(s) == 3 for s in wm.source_labels)
    assert not audit(wm)["class_balanced"]


def test_unrelate_resizes_external_pool():
    external = make_synthetic_dataset(image_shape=(16, 16, 3), train_per_class=5, seed=8).train
    wm = generate_unrelate(external, 10, 40, seed=0, image_shape=MNIST_SHAPE)
    assert tuple(wm.images.shape) == (40, 28, 28, 1)
    assert list(wm.labels) == [i % 10 for i in range(40)]
    assert wm.images.min() >= 0.0 and wm.images.max() <= 1.0


def test_unrelate_needs_enough_images():
    external = make_synthetic_dataset(train_per_class=1).train
    try:
        generate_unrelate(external, 10, 20, seed=0)
    except ConfigError:
        pass
    else:
        raise AssertionError("expected ConfigError")


def test_unstruct_repeats_one_noise_image_per_class():
    wm = generate_unstruct(MNIST_SHAPE, 10, 50, seed=0)
    for cls in range(10):
        rows = wm.images[wm.labels == cls]
        assert len(rows) == 5
        assert all(np.array_equal(rows[0], r) for r in rows[1:])


def test_unstruct_noise_stays_centred_after_clamping():
    # clamping to [0, 1] is symmetric around the configured mean of 0.5
    pixels = int(np.prod(MNIST_SHAPE))
    bound = 4 * 0.25 / np.sqrt(pixels)
    for seed in range(10):
        wm = generate_unstruct(MNIST_SHAPE, 10, 10, seed=seed, noise_mean=0.5, noise_std=0.25)
        means = wm.images.reshape(len(wm), -1).mean(axis=1)
        assert np.all(np.abs(means - 0.5) <= bound), (seed, means)


def test_dispatcher_checks_its_inputs():
    assert generate_watermark("unStruct", MNIST_SHAPE, 10, 20, seed=0).method == WatermarkMethod.UNSTRUCT
    for method, kwargs in (("unRelate", {}), ("EmbeddedContent", {}), ("Bogus", {})):
        try:
            generate_watermark(method, MNIST_SHAPE, 10, 20, seed=0, **kwargs)
        except ConfigError:
            continue
        raise AssertionError(f"expected ConfigError for {method}")


def test_watermark_tensors_are_writable_copies():
    wm = generate_unstruct(MNIST_SHAPE, 10, 20, seed=0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        x, _ = wm.tensors()
    x.zero_()
    assert float(wm.images.max()) > 0.0
    assert audit(wm)["commitment_matches"]


def test_saved_watermark_keeps_commitment():
    wm = generate_waffle_pattern(MNIST_SHAPE, 10, 30, seed=4)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "wm.wm"
        commitment = save_watermark(wm, path)
        restored = load_watermark(path)
    assert commitment == wm.commitment == restored.commitment
    assert np.array_equal(restored.images, wm.images)
    assert restored.patterns == wm.patterns


def test_tampered_watermark_is_rejected():
    wm = generate_waffle_pattern(MNIST_SHAPE, 10, 30, seed=4)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "wm.wm"
        save_watermark(wm, path)
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0xFF
        path.write_bytes(bytes(raw))
        try:
            load_watermark(path)
        except TamperError:
            pass
        else:
            raise AssertionError("expected TamperError")


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"✓ {name}")
