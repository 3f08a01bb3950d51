"""
Ownership verification: the binomial watermark-accuracy threshold T_acc and Verify.

A model that has never seen the watermark matches each trigger label with
probability 1/m. T_acc = k*/n where k* is the smallest count whose upper tail
P[X >= k*], X ~ Binomial(n, 1/m), is at most the confidence budget epsilon.
All tail arithmetic is exact (integers and Fractions).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction
from functools import lru_cache
from math import comb
from typing import Dict, Optional, Tuple

from errors import ConfigError, ThresholdError
from training import Classifier, accuracy
from watermark import WatermarkSet

DEFAULT_EPSILON = Fraction(1, 2 ** 64)


@dataclass(frozen=True)
class VerificationResult:
    watermark_accuracy: float
    threshold: float
    verdict: bool
    epsilon: float
    n: int
    m: int
    commitment: Optional[str] = None

    def to_dict(self) -> Dict:
        return asdict(self)


@lru_cache(maxsize=256)
def _tails(n: int, m: int) -> Tuple[int, ...]:
    """Integer numerators of P[X >= k] for k = 0..n, all over the common denominator m**n."""
    terms = [comb(n, i) * (m - 1) ** (n - i) for i in range(n + 1)]
    tails = [0] * (n + 2)
    for k in range(n, -1, -1):
        tails[k] = tails[k + 1] + terms[k]
    return tuple(tails[: n + 1])


def binomial_upper_tail(n: int, m: int, k: int) -> Fraction:
    if k <= 0:
        return Fraction(1)
    if k > n:
        return Fraction(0)
    return Fraction(_tails(n, m)[k], m ** n)


def _as_fraction(epsilon) -> Fraction:
    return epsilon if isinstance(epsilon, Fraction) else Fraction(epsilon)


def t_acc_count(n: int, m: int, epsilon=DEFAULT_EPSILON) -> int:
    if n < 1:
        raise ConfigError(f"Watermark size must be >= 1, got {n}")
    if m < 2:
        raise ConfigError(f"Class count must be >= 2, got {m}")
    eps = _as_fraction(epsilon)
    if not (0 < eps <= 1):
        raise ConfigError(f"epsilon must lie in (0, 1], got {epsilon}")
    tails = _tails(n, m)
    denominator = m ** n
    for k in range(n + 1):
        if Fraction(tails[k], denominator) <= eps:
            return k
    min_tail = Fraction(1, denominator)
    raise ThresholdError(
        f"No threshold reaches epsilon={float(eps):.3e} with n={n}, m={m}: "
        f"the smallest achievable tail is {float(min_tail):.3e}"
    )


def compute_t_acc(n: int, m: int, epsilon=DEFAULT_EPSILON) -> float:
    return t_acc_count(n, m, epsilon) / n


def verify(model: Classifier, wm: WatermarkSet, epsilon=DEFAULT_EPSILON) -> VerificationResult:
    acc = accuracy(model, wm.tensors())
    k = t_acc_count(len(wm), wm.num_classes, epsilon)
    threshold = k / len(wm)
    # compare on counts so accuracy exactly at T_acc is never lost to rounding
    correct = round(acc * len(wm))
    return VerificationResult(
        watermark_accuracy=acc,
        threshold=threshold,
        verdict=correct >= k,
        epsilon=float(_as_fraction(epsilon)),
        n=len(wm),
        m=wm.num_classes,
        commitment=wm.commitment,
    )


def check_commitment(wm: WatermarkSet, expected: str) -> bool:
    """Compare a watermark set against a previously registered digest."""
    return wm.compute_commitment() == expected.strip().lower()
