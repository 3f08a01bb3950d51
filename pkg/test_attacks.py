#!/usr/bin/env python3
"""
Tests for the removal and evasion attacks (tiny MLP on synthetic data)
"""

import math

import numpy as np
import torch

from attacks import (
    AttackLog,
    AttackReport,
    EvasionDetector,
    apply_trigger,
    anomaly_index,
    build_evasion_detector,
    evaluate_evasion,
    finetune_attack,
    flag_infected_classes,
    magnitude_prune_mask,
    patch_via_unlearning,
    prune_attack,
    reverse_all_triggers,
    reverse_trigger,
    roc_auc,
    run_attack,
    select_coalition,
)
from datasets import make_synthetic_dataset, partition_iid
from errors import ConfigError
from training import TrainConfig, chained_seeds, init_model, train_epochs
from watermark import generate_waffle_pattern

SHAPE = (8, 8, 1)
CFG = TrainConfig(local_passes=1, learning_rate=0.1, batch_size=10)


def setup():
    splits = make_synthetic_dataset(image_shape=SHAPE, train_per_class=10, test_per_class=5)
    shards = partition_iid(splits.train, 4, 20, seed=0)
    wm = generate_waffle_pattern(SHAPE, 10, 20, seed=0)
    model = init_model("mlp", SHAPE, 10, seed=0)
    return splits, shards, wm, model


def expect(exc, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except exc:
        return
    raise AssertionError(f"expected {exc.__name__}")


# ---------------------------- Coalitions ----------------------------

def test_coalition_by_count_and_fraction():
    _, shards, _, _ = setup()
    half = select_coalition(shards, 0.5, seed=0)
    assert half.size == 2 and half.fraction == 0.5
    assert len(half.indices) == 40
    one = select_coalition(shards, 1, seed=0)
    assert one.size == 1 and set(one.indices) == set(shards[one.client_ids[0]].indices)
    assert select_coalition(shards, 0.5, seed=0) == half
    for bad in (0, 5, 0.0, 1.5):
        expect(ConfigError, select_coalition, shards, bad, 0)


# ---------------------------- Fine-tuning and pruning ----------------------------

def test_prune_mask_matches_sorted_magnitudes():
    _, _, _, model = setup()
    params = model.get_params()
    mask = magnitude_prune_mask(model, 0.5)
    slices = params.slices()
    values = params.values.numpy()
    prunable = np.concatenate([np.arange(slices[n].start, slices[n].stop) for n, s in params.layout if len(s) > 1])
    order = np.argsort(np.abs(values[prunable]), kind="stable")
    expected = np.ones(len(values), dtype=np.float32)
    expected[prunable[order[: len(prunable) // 2]]] = 0.0
    assert np.array_equal(mask.numpy(), expected)
    for name in ("fc1.bias", "head.bias"):
        assert bool((mask[slices[name]] == 1).all())


def test_prune_rate_bounds():
    _, _, _, model = setup()
    assert bool((magnitude_prune_mask(model, 0.0) == 1).all())
    expect(ConfigError, magnitude_prune_mask, model, 1.0)
    expect(ConfigError, magnitude_prune_mask, model, -0.1)


def test_finetune_keeps_input_model():
    splits, shards, _, model = setup()
    coalition = select_coalition(shards, 2, seed=0)
    samples = coalition.samples(splits.train)
    before = model.get_params()
    assert finetune_attack(model, samples, 0, CFG, seed=0).equals(before)
    after = finetune_attack(model, samples, 2, CFG, seed=0)
    assert model.get_params().equals(before)
    assert not after.equals(before)
    expect(ConfigError, finetune_attack, model, samples, -1, CFG, 0)


def test_finetune_trajectory_every_block():
    splits, shards, wm, model = setup()
    samples = select_coalition(shards, 4, seed=0).samples(splits.train)
    log = AttackLog()
    finetune_attack(model, samples, 45, CFG, seed=1, probe={"watermark": wm.tensors()}, log=log)
    assert [p["epoch"] for p in log.trajectory] == [20, 40, 45]
    assert all(0.0 <= p["watermark_accuracy"] <= 1.0 for p in log.trajectory)


def test_prune_rate_zero_is_plain_finetuning():
    splits, shards, _, model = setup()
    samples = select_coalition(shards, 2, seed=0).samples(splits.train)
    assert prune_attack(model, 0.0, samples, 2, CFG, seed=3).equals(finetune_attack(model, samples, 2, CFG, seed=3))


def test_pruned_weights_stay_zero():
    splits, shards, _, model = setup()
    samples = select_coalition(shards, 2, seed=0).samples(splits.train)
    mask = magnitude_prune_mask(model, 0.6)
    log = AttackLog()
    params = prune_attack(model, 0.6, samples, 3, CFG, seed=0, log=log)
    assert torch.count_nonzero(params.values[mask == 0]) == 0
    assert log.details["pruned_weights"] == int((mask == 0).sum())


# ---------------------------- Trigger reversal ----------------------------

def test_apply_trigger_identities():
    x = torch.rand(3, 1, 8, 8)
    pattern = torch.rand(1, 8, 8)
    assert torch.equal(apply_trigger(x, torch.zeros(8, 8), pattern), x)
    assert torch.allclose(apply_trigger(x, torch.ones(8, 8), pattern), pattern.expand_as(x))


def test_anomaly_index_example():
    norms = [2, 9, 10, 11, 10, 9, 10, 11, 10, 10]
    assert math.isclose(anomaly_index(norms), 8 / (1.4826 * 0.5), rel_tol=1e-9)
    assert flag_infected_classes(norms) == [0]
    assert anomaly_index([5, 5, 5]) == 0.0
    assert anomaly_index([1, 5, 5, 5]) == math.inf
    expect(ConfigError, anomaly_index, [1.0, 2.0])


def test_reverse_trigger_stays_in_range():
    splits, _, _, model = setup()
    trigger = reverse_trigger(model, 3, splits.train.tensors(), steps=30, batch_size=32, seed=0)
    assert tuple(trigger.mask.shape) == (8, 8)
    assert tuple(trigger.pattern.shape) == (1, 8, 8)
    assert float(trigger.mask.min()) >= 0.0 and float(trigger.mask.max()) <= 1.0
    assert float(trigger.pattern.min()) >= 0.0 and float(trigger.pattern.max()) <= 1.0
    assert 0.0 <= trigger.l1_norm <= 64.0
    assert 0.0 <= trigger.success_rate <= 1.0
    assert trigger.successful == (trigger.success_rate >= 0.75)
    expect(ConfigError, reverse_trigger, model, 10, splits.train.tensors())


def test_reversal_recovers_planted_backdoor():
    splits = make_synthetic_dataset(image_shape=(28, 28, 1), train_per_class=200, test_per_class=50, seed=4)
    target = 0
    mask = torch.zeros(28, 28)
    mask[20:23, 20:23] = 1.0
    # checkerboard stands out against the flat template blocks
    pattern = torch.zeros(1, 28, 28)
    pattern[0, 20:23, 20:23] = torch.tensor([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]])

    x, y = splits.train.tensors()
    poisoned = torch.randperm(len(x), generator=torch.Generator().manual_seed(0))[: len(x) // 10]
    x, y = x.clone(), y.clone()
    x[poisoned] = apply_trigger(x[poisoned], mask, pattern)
    y[poisoned] = target
    model = init_model("mlp", (28, 28, 1), 10, seed=0)
    train_epochs(model.module, (x, y), lr=0.1, batch_size=50, pass_seeds=chained_seeds(7, 20), momentum=0.5)

    tx, ty = splits.test.tensors()
    planted = float((model.predict(apply_trigger(tx[ty != target], mask, pattern)) == target).float().mean())
    assert planted >= 0.9, planted

    triggers = reverse_all_triggers(model, (tx, ty), steps=300, seed=0, show_progress=False)
    found = triggers[target]
    assert found.success_rate >= 0.75, found.success_rate
    assert found.l1_norm <= 3 * float(mask.sum()), found.l1_norm
    norms = [t.l1_norm for t in triggers]
    assert target in flag_infected_classes(norms), norms
    assert anomaly_index(norms) > 2.0


def test_patching_without_triggers_warns():
    splits, shards, _, model = setup()
    samples = select_coalition(shards, 1, seed=0).samples(splits.train)
    log = AttackLog()
    params = patch_via_unlearning(model, [], samples, 2, CFG, seed=0, log=log)
    assert params.equals(model.get_params())
    assert len(log.warnings) == 1


# ---------------------------- Evasion ----------------------------

def test_roc_auc():
    assert roc_auc(np.array([0.0, 1.0]), np.array([2.0, 3.0])) == 1.0
    assert roc_auc(np.array([2.0, 3.0]), np.array([0.0, 1.0])) == 0.0
    assert roc_auc(np.array([1.0, 1.0]), np.array([1.0, 1.0])) == 0.5


def test_evasion_curve_is_monotone():
    splits, _, wm, model = setup()
    noise = torch.rand(100, 1, 8, 8, generator=torch.Generator().manual_seed(0))
    in_dist = splits.train.tensors()[0]
    detector = build_evasion_detector(model, in_dist, noise, epochs=3, seed=0)
    assert isinstance(detector, EvasionDetector)
    assert np.mean(detector.score(in_dist) > detector.threshold) <= 0.05
    assert 0.0 <= detector.auc <= 1.0

    curve = evaluate_evasion(detector, wm, splits.test.tensors()[0])
    assert curve.thresholds[0] == -math.inf and curve.thresholds[-1] == math.inf
    assert curve.tpr[0] == curve.fpr[0] == 1.0
    assert curve.tpr[-1] == curve.fpr[-1] == 0.0
    assert all(a >= b for a, b in zip(curve.tpr, curve.tpr[1:]))
    assert all(a >= b for a, b in zip(curve.fpr, curve.fpr[1:]))
    assert curve.operating_tpr >= curve.min_tpr
    assert curve.operating_fpr == min(f for t, f in zip(curve.tpr, curve.fpr) if t >= curve.min_tpr)


def test_freeze_depth_bounds():
    _, _, _, model = setup()
    full = EvasionDetector(model)
    open_ = EvasionDetector(model, freeze_depth=0)
    assert len(full.trainable_parameters()) == 2
    assert len(open_.trainable_parameters()) == 4
    expect(ConfigError, EvasionDetector, model, 5)


# ---------------------------- Reports and runner ----------------------------

def test_attack_report_outcome():
    kept = AttackReport("finetune", 1, 0.1, 0.90, 0.89, 1.0, 0.2, True, 0.47)
    collapsed = AttackReport("prune", 1, 0.1, 0.90, 0.80, 1.0, 0.1, False, 0.47)
    removed = AttackReport("finetune", 1, 0.1, 0.90, 0.88, 1.0, 0.1, False, 0.47)
    assert math.isclose(kept.utility_drop, 1.0)
    assert kept.watermark_survives and collapsed.watermark_survives
    assert not removed.watermark_survives
    assert removed.to_dict()["watermark_survives"] is False


def test_run_attack_finetune():
    splits, shards, wm, model = setup()
    coalition = select_coalition(shards, 0.5, seed=0)
    report = run_attack("finetune", model, wm, splits.train, splits.test, coalition, CFG, seed=0, params={"epochs": 2})
    assert report.attack == "finetune" and report.parameters == {"epochs": 2}
    assert report.coalition_size == 2
    assert report.threshold == 1.0
    assert [p["epoch"] for p in report.trajectory] == [2]
    assert report.verdict == (report.post_watermark_accuracy >= report.threshold)


def test_run_attack_ncleanse_and_evasion():
    splits, shards, wm, model = setup()
    coalition = select_coalition(shards, 2, seed=0)
    report = run_attack(
        "ncleanse", model, wm, splits.train, splits.test, coalition, CFG, seed=0,
        params={"steps": 10, "patch_epochs": 1}, show_progress=False,
    )
    assert len(report.details["l1_norms"]) == 10
    assert report.details["anomaly_index"] >= 0.0

    ood = make_synthetic_dataset(image_shape=(16, 16, 3), train_per_class=5, seed=9).train
    evasion = run_attack(
        "evasion", model, wm, splits.train, splits.test, coalition, CFG, seed=0,
        params={"detector_epochs": 2}, ood_pool=ood,
    )
    assert {"auc", "operating_threshold", "operating_tpr"} <= set(evasion.details)


def test_run_attack_rejects_bad_requests():
    splits, shards, wm, model = setup()
    coalition = select_coalition(shards, 1, seed=0)
    args = (model, wm, splits.train, splits.test, coalition, CFG, 0)
    expect(ConfigError, run_attack, "finetune", *args, params={"bogus": 1})
    expect(ConfigError, run_attack, "distill", *args)
    expect(ConfigError, run_attack, "evasion", *args)


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"✓ {name}")
