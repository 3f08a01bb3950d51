#!/usr/bin/env python3
"""
Watermark-removal and evasion attacks run by a coalition of malicious clients.

Removal attacks (return new parameters, input is never modified)
- finetune:  the clients' own local training procedure on the merged coalition shard
- prune:     global magnitude pruning of conv/fc weights, mask frozen, then fine-tuning
- ncleanse:  trigger reversal per class, MAD anomaly index, patching-via-unlearning

Evasion attack
- evasion:   a threshold detector on frozen features that flags watermark-like queries
             so the adversary can answer them with random labels
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from datasets import ClientShard, LabeledDataset, merge_shards
from errors import ConfigError
from settings import console, derive_seed
from training import Classifier, ParameterVector, Samples, TrainConfig, LOSSES, accuracy, chained_seeds, train_epochs
from verification import DEFAULT_EPSILON, compute_t_acc, t_acc_count
from watermark import WatermarkSet, resize_images

MAD_CONSISTENCY = 1.4826
ANOMALY_THRESHOLD = 2.0
TRIGGER_SUCCESS = 0.75
UTILITY_DROP_LIMIT_PP = 5.0
TRAJECTORY_EVERY = 20


class AttackKind(str, Enum):
    FINETUNE = "finetune"
    PRUNE = "prune"
    NCLEANSE = "ncleanse"
    EVASION = "evasion"


# ---------------------------- Domain types ----------------------------

@dataclass(frozen=True)
class Coalition:
    client_ids: tuple
    indices: tuple
    fraction: float

    @property
    def size(self) -> int:
        return len(self.client_ids)

    def samples(self, train: LabeledDataset) -> Samples:
        return train.tensors(list(self.indices))


def select_coalition(shards: Sequence[ClientShard], size: int | float, seed: int) -> Coalition:
    """Pick malicious clients by count (int >= 1) or by fraction of K (float in (0, 1])."""
    k = len(shards)
    if k == 0:
        raise ConfigError("Cannot form a coalition without clients")
    if isinstance(size, float):
        if not (0.0 < size <= 1.0):
            raise ConfigError(f"Coalition fraction must lie in (0, 1], got {size}")
        count = max(1, int(round(size * k)))
    else:
        count = int(size)
    if not (1 <= count <= k):
        raise ConfigError(f"Coalition size must lie in [1, {k}], got {count}")
    rng = np.random.default_rng(derive_seed(seed, "coalition", count))
    chosen = sorted(int(c) for c in rng.choice(k, size=count, replace=False))
    members = [shards[c] for c in chosen]
    return Coalition(tuple(chosen), tuple(merge_shards(members)), count / k)


@dataclass
class AttackLog:
    trajectory: List[Dict] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    details: Dict = field(default_factory=dict)

    def warn(self, message: str) -> None:
        console.print(f"[yellow]{message}[/yellow]")
        self.warnings.append(message)


@dataclass
class AttackReport:
    attack: str
    coalition_size: int
    coalition_fraction: float
    pre_test_accuracy: float
    post_test_accuracy: float
    pre_watermark_accuracy: float
    post_watermark_accuracy: float
    verdict: bool
    threshold: float
    parameters: Dict = field(default_factory=dict)
    trajectory: List[Dict] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    details: Dict = field(default_factory=dict)

    @property
    def utility_drop(self) -> float:
        """Percentage points of test accuracy lost to the attack."""
        return (self.pre_test_accuracy - self.post_test_accuracy) * 100.0

    @property
    def watermark_survives(self) -> bool:
        """Attack is unsuccessful: ownership still verifies or utility collapsed."""
        return self.verdict or self.utility_drop > UTILITY_DROP_LIMIT_PP

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["utility_drop"] = self.utility_drop
        data["watermark_survives"] = self.watermark_survives
        return data


# ---------------------------- Fine-tuning and pruning ----------------------------

def _probe(model: Classifier, epoch: int, probe: Optional[Dict[str, Samples]], log: Optional[AttackLog]) -> None:
    if probe is None or log is None:
        return
    point = {"epoch": epoch}
    for name, samples in probe.items():
        point[f"{name}_accuracy"] = accuracy(model, samples)
    log.trajectory.append(point)


def finetune_attack(
    model: Classifier,
    samples: Samples,
    epochs: int,
    cfg: TrainConfig,
    seed: int,
    mask: Optional[torch.Tensor] = None,
    probe: Optional[Dict[str, Samples]] = None,
    log: Optional[AttackLog] = None,
) -> ParameterVector:
    """Run the clients' local training procedure for `epochs` passes over the coalition data."""
    if len(samples[0]) == 0:
        raise ConfigError("Fine-tuning needs a nonempty coalition shard")
    if epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {epochs}")
    work = model.clone()
    if mask is not None:
        current = work.get_params()
        work.set_params(ParameterVector(current.values * mask, current.layout))
    seeds = chained_seeds(derive_seed(seed, "finetune"), epochs)
    for start in range(0, epochs, TRAJECTORY_EVERY):
        block = seeds[start:start + TRAJECTORY_EVERY]
        train_epochs(
            work.module,
            samples,
            lr=cfg.learning_rate,
            batch_size=cfg.batch_size,
            pass_seeds=block,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
            loss_fn=LOSSES[cfg.loss],
            mask=mask,
            where="fine-tuning attack",
        )
        _probe(work, start + len(block), probe, log)
    return work.get_params()


def magnitude_prune_mask(model: Classifier, rate: float) -> torch.Tensor:
    """Flat keep-mask zeroing the floor(rate * N) smallest-magnitude conv/fc weights (biases kept)."""
    if not (0.0 <= rate < 1.0):
        raise ConfigError(f"prune_rate must lie in [0, 1), got {rate}")
    params = model.get_params()
    mask = torch.ones_like(params.values)
    prunable = torch.zeros_like(params.values, dtype=torch.bool)
    slices = params.slices()
    for name, shape in params.layout:
        if len(shape) > 1:
            prunable[slices[name]] = True
    positions = torch.nonzero(prunable).flatten()
    count = int(math.floor(rate * len(positions)))
    if count:
        magnitudes = params.values[positions].abs()
        order = torch.argsort(magnitudes, stable=True)
        mask[positions[order[:count]]] = 0.0
    return mask


def _is_degenerate(model: Classifier, x: torch.Tensor) -> bool:
    return len(torch.unique(model.predict(x))) <= 1


def prune_attack(
    model: Classifier,
    rate: float,
    samples: Samples,
    finetune_epochs: int,
    cfg: TrainConfig,
    seed: int,
    probe: Optional[Dict[str, Samples]] = None,
    log: Optional[AttackLog] = None,
) -> ParameterVector:
    mask = magnitude_prune_mask(model, rate)
    params = finetune_attack(model, samples, finetune_epochs, cfg, seed, mask=mask, probe=probe, log=log)
    if log is not None:
        log.details["pruned_weights"] = int((mask == 0).sum().item())
        if _is_degenerate(model.with_params(params), samples[0]):
            log.warn(f"Pruning at rate {rate:.2f} left a constant classifier")
    return params


# ---------------------------- Trigger reversal ----------------------------

def apply_trigger(x: torch.Tensor, mask: torch.Tensor, pattern: torch.Tensor) -> torch.Tensor:
    """Blend a trigger into N x C x H x W inputs: (1 - mask) * x + mask * pattern."""
    if mask.ndim == 2:
        mask = mask.unsqueeze(0)
    return (1.0 - mask) * x + mask * pattern


@dataclass
class ReversedTrigger:
    target_class: int
    mask: torch.Tensor  # H x W opacity in [0,1]
    pattern: torch.Tensor  # C x H x W in [0,1]
    l1_norm: float
    success_rate: float
    successful: bool

    def to_dict(self) -> Dict:
        return {
            "target_class": self.target_class,
            "l1_norm": self.l1_norm,
            "success_rate": self.success_rate,
            "successful": self.successful,
        }


def _attack_success(model: Classifier, x: torch.Tensor, mask: torch.Tensor, pattern: torch.Tensor, target: int) -> float:
    with torch.no_grad():
        preds = model.predict(apply_trigger(x, mask, pattern))
    return float((preds == target).float().mean().item())


def reverse_trigger(
    model: Classifier,
    target_class: int,
    probe: Samples,
    steps: int = 500,
    lam: float = 1e-3,
    lr: float = 0.1,
    batch_size: int = 128,
    seed: int = 0,
    patience: int = 10,
    show_progress: bool = False,
) -> ReversedTrigger:
    """Smallest (mask, pattern) that sends probe inputs to `target_class`.

    Mask and pattern live in tanh space. The sparsity weight doubles while the
    running success rate stays above 75% and halves otherwise.
    """
    if not (0 <= target_class < model.num_classes):
        raise ConfigError(f"target_class {target_class} outside [0, {model.num_classes})")
    x, y = probe
    model.check_input(x)
    others = x[y != target_class]
    if len(others):
        x = others
    h, w, c = model.input_shape

    frozen = model.clone()
    for p in frozen.module.parameters():
        p.requires_grad_(False)
    frozen.module.eval()

    gen = torch.Generator().manual_seed(derive_seed(seed, "reverse", target_class))
    mask_raw = (torch.rand(1, h, w, generator=gen) * 2 - 1).requires_grad_(True)
    pattern_raw = (torch.rand(c, h, w, generator=gen) * 2 - 1).requires_grad_(True)
    optimizer = torch.optim.Adam([mask_raw, pattern_raw], lr=lr, betas=(0.5, 0.9))
    target = torch.full((min(batch_size, len(x)),), target_class, dtype=torch.long)

    best_mask, best_pattern, best_l1 = None, None, float("inf")
    window: List[float] = []
    for _ in tqdm(range(steps), desc=f"Reverse class {target_class}", leave=False, disable=not show_progress):
        idx = torch.randint(len(x), (len(target),), generator=gen)
        mask = (torch.tanh(mask_raw) + 1) / 2
        pattern = (torch.tanh(pattern_raw) + 1) / 2
        logits = frozen.module(apply_trigger(x[idx], mask, pattern))
        loss = F.cross_entropy(logits, target) + lam * mask.sum()
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        rate = float((logits.argmax(dim=1) == target).float().mean().item())
        l1 = float(mask.detach().sum().item())
        if rate >= TRIGGER_SUCCESS and l1 < best_l1:
            best_mask, best_pattern, best_l1 = mask.detach()[0].clone(), pattern.detach().clone(), l1
        window.append(rate)
        if len(window) == patience:
            lam = lam * 2 if np.mean(window) >= TRIGGER_SUCCESS else lam / 2
            window.clear()

    if best_mask is None:
        best_mask = ((torch.tanh(mask_raw) + 1) / 2).detach()[0]
        best_pattern = ((torch.tanh(pattern_raw) + 1) / 2).detach()
    success = _attack_success(frozen, x, best_mask, best_pattern, target_class)
    return ReversedTrigger(
        target_class=target_class,
        mask=best_mask,
        pattern=best_pattern,
        l1_norm=float(best_mask.sum().item()),
        success_rate=success,
        successful=success >= TRIGGER_SUCCESS,
    )


def reverse_all_triggers(
    model: Classifier,
    probe: Samples,
    steps: int = 500,
    lam: float = 1e-3,
    seed: int = 0,
    log: Optional[AttackLog] = None,
    show_progress: bool = True,
) -> List[ReversedTrigger]:
    triggers = []
    with tqdm(range(model.num_classes), desc="Neural Cleanse", unit="class", disable=not show_progress) as pbar:
        for cls in pbar:
            trigger = reverse_trigger(model, cls, probe, steps=steps, lam=lam, seed=seed)
            triggers.append(trigger)
            pbar.set_postfix({"l1": f"{trigger.l1_norm:.1f}", "asr": f"{trigger.success_rate:.2f}"})
            if not trigger.successful and log is not None:
                log.warn(f"Trigger reversal for class {cls} reached only {trigger.success_rate:.2f} success")
    return triggers


def _mad_scores(norms: Sequence[float]):
    values = np.asarray(norms, dtype=np.float64)
    if len(values) < 3:
        raise ConfigError(f"Anomaly index needs at least 3 classes, got {len(values)}")
    median = float(np.median(values))
    mad = float(np.median(np.abs(values - median)))
    return values, median, mad


def anomaly_index(l1_norms: Sequence[float]) -> float:
    """MAD-normalized deviation of the smallest mask norm from the median."""
    values, median, mad = _mad_scores(l1_norms)
    deviation = abs(float(values.min()) - median)
    if mad == 0.0:
        return 0.0 if deviation == 0.0 else math.inf
    return deviation / (MAD_CONSISTENCY * mad)


def flag_infected_classes(l1_norms: Sequence[float], threshold: float = ANOMALY_THRESHOLD) -> List[int]:
    """Classes whose norm sits below the median by more than `threshold` normalized deviations."""
    values, median, mad = _mad_scores(l1_norms)
    flagged = []
    for cls, value in enumerate(values):
        if value >= median:
            continue
        score = math.inf if mad == 0.0 else (median - value) / (MAD_CONSISTENCY * mad)
        if score > threshold:
            flagged.append(cls)
    return flagged


def patch_via_unlearning(
    model: Classifier,
    triggers: Sequence[ReversedTrigger],
    samples: Samples,
    epochs: int,
    cfg: TrainConfig,
    seed: int,
    stamped_fraction: float = 0.2,
    knows_distinct_patterns: bool = True,
    log: Optional[AttackLog] = None,
) -> ParameterVector:
    """Fine-tune on clean data where a fraction of each batch carries a reversed trigger but keeps its clean label.

    With `knows_distinct_patterns` every successful trigger is unlearned; otherwise
    only the classes flagged by the anomaly detector are.
    """
    if not (0.0 <= stamped_fraction <= 1.0):
        raise ConfigError(f"stamped_fraction must lie in [0, 1], got {stamped_fraction}")
    usable = [t for t in triggers if t.successful]
    if usable and not knows_distinct_patterns:
        flagged = set(flag_infected_classes([t.l1_norm for t in triggers])) if len(triggers) >= 3 else set()
        usable = [t for t in usable if t.target_class in flagged]
    if not usable or epochs == 0:
        if log is not None:
            log.warn("No usable reversed triggers; patching left the model unchanged")
        return model.get_params()

    masks = torch.stack([t.mask for t in usable])
    patterns = torch.stack([t.pattern for t in usable])

    def _stamp(bx: torch.Tensor, by: torch.Tensor, gen: torch.Generator):
        count = int(round(stamped_fraction * len(bx)))
        if count == 0:
            return bx, by
        rows = torch.randperm(len(bx), generator=gen)[:count]
        which = torch.randint(len(usable), (count,), generator=gen)
        bx = bx.clone()
        bx[rows] = apply_trigger(bx[rows], masks[which].unsqueeze(1), patterns[which])
        return bx, by

    work = model.clone()
    train_epochs(
        work.module,
        samples,
        lr=cfg.learning_rate,
        batch_size=cfg.batch_size,
        pass_seeds=chained_seeds(derive_seed(seed, "unlearn"), epochs),
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        loss_fn=LOSSES[cfg.loss],
        where="patching-via-unlearning",
        batch_transform=_stamp,
    )
    if log is not None:
        log.details["unlearned_classes"] = [t.target_class for t in usable]
    return work.get_params()


# ---------------------------- Evasion ----------------------------

class EvasionDetector:
    """Scalar out-of-distribution score on top of a (partly) frozen copy of the classifier.

    Higher scores mean "looks like a watermark query".
    """

    def __init__(self, model: Classifier, freeze_depth: Optional[int] = None):
        self.model = model.clone()
        layers = self.model.module.feature_layers()
        depth = len(layers) if freeze_depth is None else freeze_depth
        if not (0 <= depth <= len(layers)):
            raise ConfigError(f"freeze_depth must lie in [0, {len(layers)}], got {depth}")
        self.freeze_depth = depth
        for layer in layers[:depth]:
            for p in layer.parameters():
                p.requires_grad_(False)
        # the classification head is not part of the detector
        for p in self.model.module.head.parameters():
            p.requires_grad_(False)
        with torch.no_grad():
            h, w, c = self.model.input_shape
            feat_dim = self.model.module.features(torch.zeros(1, c, h, w)).shape[1]
        self.head = nn.Linear(feat_dim, 1)
        self.threshold = math.inf
        self.auc = 0.5

    def trainable_parameters(self) -> List[torch.Tensor]:
        params = [p for p in self.model.module.parameters() if p.requires_grad]
        return params + list(self.head.parameters())

    def _raw(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.model.module.features(x)).squeeze(1)

    @torch.no_grad()
    def score(self, x: torch.Tensor, batch_size: int = 500) -> np.ndarray:
        self.model.check_input(x)
        self.model.module.eval()
        parts = [self._raw(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        return torch.cat(parts).numpy().astype(np.float64) if parts else np.zeros(0)

    def flags(self, x: torch.Tensor, threshold: Optional[float] = None) -> np.ndarray:
        return self.score(x) > (self.threshold if threshold is None else threshold)


def roc_auc(negatives: np.ndarray, positives: np.ndarray) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    if len(negatives) == 0 or len(positives) == 0:
        return 0.5
    ranks = pd.Series(np.concatenate([negatives, positives])).rank(method="average").to_numpy()
    pos_ranks = ranks[len(negatives):].sum()
    n_pos, n_neg = len(positives), len(negatives)
    return float((pos_ranks - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def build_evasion_detector(
    model: Classifier,
    in_dist: torch.Tensor,
    surrogate_ood: torch.Tensor,
    freeze_depth: Optional[int] = None,
    epochs: int = 20,
    lr: float = 0.01,
    batch_size: int = 64,
    target_fpr: float = 0.05,
    seed: int = 0,
    log: Optional[AttackLog] = None,
) -> EvasionDetector:
    """Train the detector head (BCE, in-dist = 0, OOD = 1) and place the threshold at `target_fpr` on in-dist data."""
    if len(in_dist) == 0 or len(surrogate_ood) == 0:
        raise ConfigError("Evasion detector needs in-distribution and surrogate OOD samples")
    detector = EvasionDetector(model, freeze_depth)
    x = torch.cat([in_dist, surrogate_ood])
    y = torch.cat([torch.zeros(len(in_dist)), torch.ones(len(surrogate_ood))])
    pos_weight = torch.tensor([len(in_dist) / len(surrogate_ood)])
    optimizer = torch.optim.SGD(detector.trainable_parameters(), lr=lr, momentum=0.9)

    gen = torch.Generator().manual_seed(derive_seed(seed, "detector"))
    torch.nn.init.zeros_(detector.head.weight)
    torch.nn.init.zeros_(detector.head.bias)
    for _ in range(epochs):
        detector.model.module.train()
        order = torch.randperm(len(x), generator=gen)
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            loss = F.binary_cross_entropy_with_logits(detector._raw(x[idx]), y[idx], pos_weight=pos_weight)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    detector.model.module.eval()

    in_scores = detector.score(in_dist)
    ood_scores = detector.score(surrogate_ood)
    detector.threshold = float(np.quantile(in_scores, 1.0 - target_fpr, method="higher"))
    detector.auc = roc_auc(in_scores, ood_scores)
    if detector.auc < 0.5 and log is not None:
        log.warn(f"Evasion detector separates worse than chance (AUC {detector.auc:.3f})")
    return detector


@dataclass
class EvasionCurve:
    thresholds: List[float]
    tpr: List[float]
    fpr: List[float]
    operating_threshold: float
    operating_tpr: float
    operating_fpr: float
    min_tpr: float

    def to_dict(self) -> Dict:
        return {
            "operating_threshold": self.operating_threshold,
            "operating_tpr": self.operating_tpr,
            "operating_fpr": self.operating_fpr,
            "min_tpr": self.min_tpr,
            "points": len(self.thresholds),
        }


def evaluate_evasion(
    detector: EvasionDetector,
    wm: WatermarkSet,
    clean_test: torch.Tensor,
    min_tpr: Optional[float] = None,
    quantiles: int = 101,
) -> EvasionCurve:
    """Sweep thresholds over score quantiles. A query is flagged when score > threshold.

    The operating point is the lowest FPR among thresholds that flag enough of the
    watermark set to push its accuracy under T_acc (TPR >= 1 - T_acc).
    """
    wm_scores = detector.score(wm.tensors()[0])
    clean_scores = detector.score(clean_test)
    if min_tpr is None:
        min_tpr = 1.0 - compute_t_acc(len(wm), wm.num_classes)
    pooled = np.concatenate([wm_scores, clean_scores])
    inner = np.unique(np.quantile(pooled, np.linspace(0.0, 1.0, quantiles)))
    thresholds = [-math.inf] + [float(t) for t in inner] + [math.inf]

    tpr = [float(np.mean(wm_scores > t)) for t in thresholds]
    fpr = [float(np.mean(clean_scores > t)) for t in thresholds]
    best = 0
    for i in range(len(thresholds)):
        if tpr[i] >= min_tpr and fpr[i] <= fpr[best]:
            best = i
    return EvasionCurve(thresholds, tpr, fpr, thresholds[best], tpr[best], fpr[best], float(min_tpr))


def evasive_accuracy(model: Classifier, detector: EvasionDetector, samples: Samples, threshold: float, seed: int) -> float:
    """Accuracy when flagged queries are answered with a uniformly random label."""
    x, y = samples
    preds = model.predict(x).clone()
    flagged = torch.from_numpy(detector.flags(x, threshold))
    gen = torch.Generator().manual_seed(derive_seed(seed, "evasive-answers"))
    random_labels = torch.randint(model.num_classes, (len(x),), generator=gen)
    preds[flagged] = random_labels[flagged]
    return float((preds == y).float().mean().item())


# ---------------------------- Attack runner ----------------------------

ATTACK_DEFAULTS = {
    AttackKind.FINETUNE: {"epochs": 100},
    AttackKind.PRUNE: {"prune_rate": 0.9, "finetune_epochs": 20},
    AttackKind.NCLEANSE: {"steps": 500, "lam": 1e-3, "patch_epochs": None, "stamped_fraction": 0.2, "knows_distinct_patterns": True},
    AttackKind.EVASION: {"freeze_depth": None, "detector_epochs": 20, "target_fpr": 0.05},
}


def _matched_pool(pool: LabeledDataset, image_shape: Sequence[int]) -> torch.Tensor:
    images = pool.images
    if tuple(pool.image_shape) != tuple(image_shape):
        images = resize_images(images, image_shape)
    return torch.from_numpy(np.array(images.transpose(0, 3, 1, 2), dtype=np.float32, order="C"))


def run_attack(
    kind: str | AttackKind,
    model: Classifier,
    wm: WatermarkSet,
    train: LabeledDataset,
    test: LabeledDataset,
    coalition: Coalition,
    client_cfg: TrainConfig,
    seed: int,
    params: Optional[Dict] = None,
    ood_pool: Optional[LabeledDataset] = None,
    epsilon=DEFAULT_EPSILON,
    show_progress: bool = True,
) -> AttackReport:
    """Run one attack against `model` and measure it before and after."""
    try:
        kind = AttackKind(kind)
    except ValueError as e:
        raise ConfigError(f"Unknown attack '{kind}' (known: {', '.join(k.value for k in AttackKind)})") from e
    unknown = set(params or {}) - set(ATTACK_DEFAULTS[kind])
    if unknown:
        raise ConfigError(f"Unknown {kind.value} parameters: {', '.join(sorted(unknown))}")
    options = dict(ATTACK_DEFAULTS[kind], **(params or {}))

    test_samples = test.tensors()
    wm_samples = wm.tensors()
    coalition_samples = coalition.samples(train)
    k = t_acc_count(len(wm), wm.num_classes, epsilon)
    threshold = k / len(wm)
    pre_test = accuracy(model, test_samples)
    pre_wm = accuracy(model, wm_samples)
    log = AttackLog()
    probe = {"test": test_samples, "watermark": wm_samples}
    attack_seed = derive_seed(seed, "attack", kind.value, coalition.client_ids)

    console.print(f"[cyan]Attack {kind.value}: coalition of {coalition.size} client(s), {len(coalition.indices)} samples[/cyan]")
    if kind == AttackKind.FINETUNE:
        attacked = model.with_params(
            finetune_attack(model, coalition_samples, int(options["epochs"]), client_cfg, attack_seed, probe=probe, log=log)
        )
        post_test, post_wm = accuracy(attacked, test_samples), accuracy(attacked, wm_samples)
    elif kind == AttackKind.PRUNE:
        attacked = model.with_params(
            prune_attack(
                model, float(options["prune_rate"]), coalition_samples, int(options["finetune_epochs"]),
                client_cfg, attack_seed, probe=probe, log=log,
            )
        )
        post_test, post_wm = accuracy(attacked, test_samples), accuracy(attacked, wm_samples)
    elif kind == AttackKind.NCLEANSE:
        triggers = reverse_all_triggers(
            model, coalition_samples, steps=int(options["steps"]), lam=float(options["lam"]),
            seed=attack_seed, log=log, show_progress=show_progress,
        )
        norms = [t.l1_norm for t in triggers]
        log.details["l1_norms"] = norms
        log.details["anomaly_index"] = anomaly_index(norms)
        log.details["flagged_classes"] = flag_infected_classes(norms)
        epochs = options["patch_epochs"]
        epochs = client_cfg.local_passes if epochs is None else int(epochs)
        attacked = model.with_params(
            patch_via_unlearning(
                model, triggers, coalition_samples, epochs, client_cfg, attack_seed,
                stamped_fraction=float(options["stamped_fraction"]),
                knows_distinct_patterns=bool(options["knows_distinct_patterns"]),
                log=log,
            )
        )
        post_test, post_wm = accuracy(attacked, test_samples), accuracy(attacked, wm_samples)
    else:
        if ood_pool is None:
            raise ConfigError("The evasion attack needs a surrogate out-of-distribution pool")
        detector = build_evasion_detector(
            model, coalition_samples[0], _matched_pool(ood_pool, model.input_shape),
            freeze_depth=options["freeze_depth"], epochs=int(options["detector_epochs"]),
            target_fpr=float(options["target_fpr"]), seed=attack_seed, log=log,
        )
        curve = evaluate_evasion(detector, wm, test_samples[0])
        log.details.update(curve.to_dict(), auc=detector.auc)
        post_test = evasive_accuracy(model, detector, test_samples, curve.operating_threshold, attack_seed)
        post_wm = evasive_accuracy(model, detector, wm_samples, curve.operating_threshold, attack_seed)

    verdict = int(round(post_wm * len(wm))) >= k
    report = AttackReport(
        attack=kind.value,
        coalition_size=coalition.size,
        coalition_fraction=coalition.fraction,
        pre_test_accuracy=pre_test,
        post_test_accuracy=post_test,
        pre_watermark_accuracy=pre_wm,
        post_watermark_accuracy=post_wm,
        verdict=verdict,
        threshold=threshold,
        parameters=options,
        trajectory=log.trajectory,
        warnings=log.warnings,
        details=log.details,
    )
    colour = "green" if report.watermark_survives else "red"
    console.print(
        f"[{colour}]{kind.value}: WM {pre_wm:.3f} -> {post_wm:.3f}, test {pre_test:.3f} -> {post_test:.3f} "
        f"(drop {report.utility_drop:.1f}pp, verify={'pass' if verdict else 'fail'})[/{colour}]"
    )
    return report
