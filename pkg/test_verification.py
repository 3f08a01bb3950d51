#!/usr/bin/env python3
"""
Tests for the ownership threshold and Verify
"""

from fractions import Fraction
from math import comb

import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ConfigError, ThresholdError
from training import Classifier, init_model
from verification import binomial_upper_tail, check_commitment, compute_t_acc, t_acc_count, verify
from watermark import generate_waffle_pattern


class Lookup(nn.Module):
    """Answers each stored image with a fixed label (nearest stored image)."""

    def __init__(self, keys: torch.Tensor, answers: torch.Tensor, num_classes: int):
        super().__init__()
        self.register_buffer("keys", keys.flatten(1))
        self.register_buffer("answers", answers)
        self.num_classes = num_classes

    def forward(self, x):
        idx = torch.cdist(x.flatten(1), self.keys).argmin(dim=1)
        return F.one_hot(self.answers[idx], self.num_classes).float()


def lookup_model(wm, correct: int) -> Classifier:
    x, y = wm.tensors()
    answers = y.clone()
    answers[correct:] = (answers[correct:] + 1) % wm.num_classes
    return Classifier("lookup", wm.image_shape, wm.num_classes, Lookup(x, answers, wm.num_classes))


def oracle_count(n: int, m: int, eps: Fraction) -> int:
    # tail(k) * m^n = sum_{i >= k} C(n, i) (m - 1)^(n - i)
    scaled = [comb(n, i) * (m - 1) ** (n - i) for i in range(n + 1)]
    total = m ** n
    tail = 0
    tails = [0] * (n + 2)
    for i in range(n, -1, -1):
        tail += scaled[i]
        tails[i] = tail
    for k in range(n + 1):
        if Fraction(tails[k], total) <= eps:
            return k
    return -1


def count_or_unreachable(n: int, m: int, eps: Fraction) -> int:
    try:
        return t_acc_count(n, m, eps)
    except ThresholdError:
        return -1


def test_default_threshold():
    assert compute_t_acc(100, 10, Fraction(1, 2 ** 64)) == 0.47
    assert t_acc_count(100, 10) == 47


def test_threshold_matches_exact_oracle():
    for eps in (Fraction(1, 2 ** 10), Fraction(1, 2 ** 64)):
        for m in (2, 10, 100):
            for n in range(1, 201):
                assert count_or_unreachable(n, m, eps) == oracle_count(n, m, eps), (n, m, eps)


def test_more_classes_never_raise_threshold():
    for eps, sizes in ((Fraction(1, 2 ** 10), (20, 50, 100)), (Fraction(1, 2 ** 64), (64, 100, 200))):
        for n in sizes:
            counts = [t_acc_count(n, m, eps) for m in (2, 10, 100)]
            assert counts == sorted(counts, reverse=True), (n, eps, counts)


def test_larger_epsilon_never_raises_threshold():
    previous = None
    for eps in (Fraction(1, 2 ** 64), Fraction(1, 2 ** 32), Fraction(1, 1000), Fraction(1, 10)):
        k = t_acc_count(100, 10, eps)
        assert previous is None or k <= previous
        previous = k


def test_epsilon_one_gives_zero_threshold():
    assert compute_t_acc(10, 10, 1) == 0.0


def test_unreachable_epsilon_raises():
    try:
        t_acc_count(1, 2, Fraction(1, 2 ** 64))
    except ThresholdError as e:
        assert "5.000e-01" in str(e)
    else:
        raise AssertionError("expected ThresholdError")


def test_invalid_arguments():
    for args in ((0, 10, 0.5), (10, 1, 0.5), (10, 10, 0), (10, 10, 1.5)):
        try:
            t_acc_count(*args)
        except ConfigError:
            continue
        raise AssertionError(f"expected ConfigError for {args}")


def test_binomial_tail_edges():
    assert binomial_upper_tail(5, 10, 0) == 1
    assert binomial_upper_tail(5, 10, 6) == 0
    assert binomial_upper_tail(2, 2, 1) == Fraction(3, 4)
    assert binomial_upper_tail(3, 10, 3) == Fraction(1, 1000)


def test_verify_passes_exactly_at_threshold():
    wm = generate_waffle_pattern((8, 8, 1), 10, 100, seed=3)
    at = verify(lookup_model(wm, 47), wm)
    below = verify(lookup_model(wm, 46), wm)
    assert at.watermark_accuracy == 0.47 and at.verdict
    assert below.watermark_accuracy == 0.46 and not below.verdict
    assert at.threshold == 0.47 and at.n == 100 and at.m == 10
    assert at.commitment == wm.commitment


def test_verify_perfect_model():
    wm = generate_waffle_pattern((8, 8, 1), 4, 20, seed=1)
    result = verify(lookup_model(wm, len(wm)), wm)
    assert result.watermark_accuracy == 1.0 and result.verdict
    assert set(result.to_dict()) >= {"watermark_accuracy", "threshold", "verdict", "epsilon"}


def test_random_models_fail_verification():
    wm = generate_waffle_pattern((8, 8, 1), 10, 100, seed=5)
    for seed in range(10):
        result = verify(init_model("mlp", (8, 8, 1), 10, seed=seed), wm)
        assert result.threshold == 0.47
        assert not result.verdict, (seed, result.watermark_accuracy)


def test_check_commitment():
    wm = generate_waffle_pattern((8, 8, 1), 4, 20, seed=1)
    assert check_commitment(wm, wm.commitment)
    assert check_commitment(wm, "  " + wm.commitment.upper() + "\n")
    assert not check_commitment(wm, "0" * 64)


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"✓ {name}")
