"""
Watermark (trigger set) generation, serialization and audit.

Methods
- WafflePattern:   Gaussian-noise images stamped with a unique geometric pattern per class
- EmbeddedContent: training images stamped with one fixed 5x5 corner logo, relabeled to a wrong class
- unRelate:        out-of-domain images resized to the task shape, labels round-robin over classes
- unStruct:        pure Gaussian noise, one base image per class repeated size/m times

Only EmbeddedContent accepts task training data; the other generators have no
parameter through which it could reach them.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from artifacts import read_container, write_container
from datasets import LabeledDataset
from errors import ConfigError, SeedExhaustedError
from settings import canonical_json, console, derive_seed

NOISE_MEAN = 0.5
NOISE_STD = 0.25
MIN_FOOTPRINT = 0.12
MAX_FOOTPRINT = 0.30
ORIENTATIONS = (0, 90, 180, 270)
MAX_PATTERN_RETRIES = 1000

SHAPE_KINDS = (
    "rectangle",
    "cross",
    "diagonal-stripe",
    "circle",
    "l-corner",
    "triangle",
    "ring",
    "x-mark",
    "checker",
    "h-bars",
    "diamond",
    "frame",
)

# Embedded Content logo, stamped opaque into the bottom-right corner
LOGO = np.array(
    [
        [1, 0, 0, 0, 1],
        [1, 0, 1, 0, 1],
        [1, 0, 1, 0, 1],
        [1, 1, 0, 1, 1],
        [1, 0, 0, 0, 1],
    ],
    dtype=np.float32,
)


class WatermarkMethod(str, Enum):
    WAFFLE_PATTERN = "WafflePattern"
    EMBEDDED_CONTENT = "EmbeddedContent"
    UNRELATE = "unRelate"
    UNSTRUCT = "unStruct"


# ---------------------------- Patterns ----------------------------

@dataclass(frozen=True)
class PatternSpec:
    class_id: int
    shape_kind: str
    color: Tuple[float, ...]
    position: Tuple[int, int]
    orientation: int
    scale: int

    def key(self) -> Tuple:
        return (self.shape_kind, self.color, self.position, self.orientation, self.scale)

    def footprint(self) -> np.ndarray:
        """Boolean scale x scale mask of the shape after rotation."""
        s = self.scale
        r, c = np.mgrid[0:s, 0:s].astype(np.float32)
        mid = (s - 1) / 2.0
        band = max(1, s // 4)
        kind = self.shape_kind
        if kind == "rectangle":
            m = (r >= s * 0.2) & (r < s * 0.8)
        elif kind == "cross":
            m = (np.abs(r - mid) < band / 2 + 0.5) | (np.abs(c - mid) < band / 2 + 0.5)
        elif kind == "diagonal-stripe":
            m = np.abs(r - c) <= max(1, s // 6)
        elif kind == "circle":
            m = (r - mid) ** 2 + (c - mid) ** 2 <= (s / 2.0) ** 2
        elif kind == "l-corner":
            m = (c < band) | (r >= s - band)
        elif kind == "triangle":
            m = r >= c
        elif kind == "ring":
            d2 = (r - mid) ** 2 + (c - mid) ** 2
            m = (d2 <= (s / 2.0) ** 2) & (d2 >= (s / 2.0 - band) ** 2)
        elif kind == "x-mark":
            m = (np.abs(r - c) <= max(1, s // 8)) | (np.abs(r + c - (s - 1)) <= max(1, s // 8))
        elif kind == "checker":
            b = max(1, s // 4)
            m = ((r // b + c // b) % 2) == 0
        elif kind == "h-bars":
            b = max(1, s // 5)
            m = ((r // b) % 2) == 0
        elif kind == "diamond":
            m = np.abs(r - mid) + np.abs(c - mid) <= s / 2.0
        elif kind == "frame":
            b = max(1, s // 5)
            m = (r < b) | (r >= s - b) | (c < b) | (c >= s - b)
        else:
            raise ConfigError(f"Unknown shape kind '{kind}'")
        return np.rot90(m, k=self.orientation // 90)

    def stamp(self, image: np.ndarray) -> np.ndarray:
        out = image.copy()
        row, col = self.position
        s = self.scale
        region = out[row:row + s, col:col + s]
        mask = self.footprint()
        region[mask] = np.asarray(self.color, dtype=np.float32)
        return out

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "PatternSpec":
        return cls(
            class_id=int(data["class_id"]),
            shape_kind=data["shape_kind"],
            color=tuple(float(v) for v in data["color"]),
            position=tuple(int(v) for v in data["position"]),
            orientation=int(data["orientation"]),
            scale=int(data["scale"]),
        )


def scale_range(image_shape: Sequence[int]) -> Tuple[int, int]:
    h, w = int(image_shape[0]), int(image_shape[1])
    lo = math.ceil(math.sqrt(MIN_FOOTPRINT * h * w))
    hi = math.floor(math.sqrt(MAX_FOOTPRINT * h * w))
    hi = min(hi, h, w)
    return min(lo, hi), hi


def _random_pattern(rng: np.random.Generator, class_id: int, kind: str, image_shape: Sequence[int]) -> PatternSpec:
    h, w, c = (int(d) for d in image_shape)
    lo, hi = scale_range(image_shape)
    scale = int(rng.integers(lo, hi + 1))
    # keep colors away from the noise mean so the pattern stands out
    color = tuple(
        round(float(v if v < 0.2 else v + 0.6), 4) for v in rng.uniform(0.0, 0.4, size=c)
    )
    position = (int(rng.integers(0, h - scale + 1)), int(rng.integers(0, w - scale + 1)))
    orientation = int(rng.choice(ORIENTATIONS))
    return PatternSpec(class_id, kind, color, position, orientation, scale)


def make_patterns(image_shape: Sequence[int], num_classes: int, seed: int) -> List[PatternSpec]:
    rng = np.random.default_rng(derive_seed(seed, "patterns", *image_shape, num_classes))
    if num_classes <= len(SHAPE_KINDS):
        kinds = [SHAPE_KINDS[i] for i in rng.permutation(len(SHAPE_KINDS))[:num_classes]]
    else:
        kinds = [SHAPE_KINDS[i] for i in rng.integers(0, len(SHAPE_KINDS), size=num_classes)]
    patterns: List[PatternSpec] = []
    seen = set()
    for class_id, kind in enumerate(kinds):
        for _ in range(MAX_PATTERN_RETRIES):
            spec = _random_pattern(rng, class_id, kind, image_shape)
            if spec.key() not in seen:
                break
        else:
            raise SeedExhaustedError(
                f"Could not draw a unique pattern for class {class_id} after {MAX_PATTERN_RETRIES} tries"
            )
        seen.add(spec.key())
        patterns.append(spec)
    return patterns


# ---------------------------- Watermark set ----------------------------

@dataclass(frozen=True)
class WatermarkSet:
    images: np.ndarray  # (n, H, W, C) float32 in [0,1]
    labels: np.ndarray  # (n,) int64 target labels
    method: WatermarkMethod
    seed: int
    image_shape: Tuple[int, int, int]
    num_classes: int
    patterns: Tuple[PatternSpec, ...] = ()
    source_labels: Optional[Tuple[int, ...]] = None
    params: Dict = field(default_factory=dict)
    commitment: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConfigError(f"{len(self.images)} watermark images but {len(self.labels)} labels")
        if tuple(self.images.shape[1:]) != tuple(self.image_shape):
            raise ConfigError(f"Watermark images have shape {self.images.shape[1:]}, expected {self.image_shape}")
        if len(self.images) and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ConfigError("Watermark pixels outside [0,1]")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)
        if not self.commitment:
            object.__setattr__(self, "commitment", self.compute_commitment())

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def size(self) -> int:
        return len(self.labels)

    def metadata(self) -> Dict:
        return {
            "method": self.method.value,
            "seed": int(self.seed),
            "image_shape": list(self.image_shape),
            "num_classes": int(self.num_classes),
            "size": len(self),
            "patterns": [p.to_dict() for p in self.patterns],
            "source_labels": list(self.source_labels) if self.source_labels is not None else None,
            "params": self.params,
        }

    def payload(self) -> bytes:
        images = np.ascontiguousarray(self.images, dtype="<f4").tobytes()
        labels = np.ascontiguousarray(self.labels, dtype="<i8").tobytes()
        return images + labels

    def canonical_bytes(self) -> bytes:
        return self.payload() + canonical_json(self.metadata()).encode("utf-8")

    def compute_commitment(self) -> str:
        return hashlib.sha256(self.canonical_bytes()).hexdigest()

    def class_counts(self) -> Dict[int, int]:
        counts = np.bincount(self.labels, minlength=self.num_classes)
        return {int(c): int(n) for c, n in enumerate(counts)}

    def tensors(self) -> Tuple[torch.Tensor, torch.Tensor]:
        x = torch.from_numpy(np.array(self.images.transpose(0, 3, 1, 2), dtype=np.float32, order="C"))
        return x, torch.from_numpy(self.labels.astype(np.int64).copy())


def audit(wm: WatermarkSet) -> Dict[str, bool]:
    """Structural checks a verifier can run on a stored set."""
    counts = wm.class_counts()
    per_class = len(wm) // max(wm.num_classes, 1)
    checks = {
        "class_balanced": all(n == per_class for n in counts.values()) and per_class * wm.num_classes == len(wm),
        "pixels_in_range": bool(wm.images.min() >= 0.0 and wm.images.max() <= 1.0) if len(wm) else True,
        "commitment_matches": wm.commitment == wm.compute_commitment(),
    }
    if wm.method == WatermarkMethod.WAFFLE_PATTERN:
        keys = [p.key() for p in wm.patterns]
        checks["patterns_unique"] = len(set(keys)) == len(keys)
    if wm.source_labels is not None:
        checks["labels_differ_from_source"] = all(
            int(t) != int(s) for t, s in zip(wm.labels, wm.source_labels)
        )
    return checks


def _check_divisible(size: int, num_classes: int) -> int:
    if num_classes < 1 or size < 1:
        raise ConfigError("size and num_classes must be >= 1")
    if size % num_classes:
        raise ConfigError(f"Watermark size {size} is not divisible by {num_classes} classes")
    return size // num_classes


def _balanced_labels(rng: np.random.Generator, num_classes: int, per_class: int) -> np.ndarray:
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    return labels[rng.permutation(len(labels))]


def _noise(rng: np.random.Generator, shape, mean: float, std: float) -> np.ndarray:
    return np.clip(rng.normal(mean, std, size=shape), 0.0, 1.0).astype(np.float32)


# ---------------------------- Generators ----------------------------

def generate_waffle_pattern(
    image_shape: Sequence[int],
    num_classes: int,
    size: int,
    seed: int,
    noise_mean: float = NOISE_MEAN,
    noise_std: float = NOISE_STD,
) -> WatermarkSet:
    image_shape = tuple(int(d) for d in image_shape)
    per_class = _check_divisible(size, num_classes)
    patterns = make_patterns(image_shape, num_classes, seed)
    rng = np.random.default_rng(derive_seed(seed, "waffle-pattern", *image_shape, num_classes, size))
    background = _noise(rng, (size,) + image_shape, noise_mean, noise_std)
    labels = _balanced_labels(rng, num_classes, per_class)
    images = np.stack([patterns[int(label)].stamp(img) for img, label in zip(background, labels)])
    return WatermarkSet(
        images=images,
        labels=labels,
        method=WatermarkMethod.WAFFLE_PATTERN,
        seed=seed,
        image_shape=image_shape,
        num_classes=num_classes,
        patterns=tuple(patterns),
        params={"noise_mean": noise_mean, "noise_std": noise_std},
    )


def stamp_logo(image: np.ndarray) -> np.ndarray:
    out = image.copy()
    h, w = LOGO.shape
    out[-h:, -w:, :] = LOGO[:, :, None]
    return out


def generate_embedded_content(train_pool: LabeledDataset, num_classes: int, size: int, seed: int) -> WatermarkSet:
    """Requires training data: kept as a comparison baseline."""
    if len(train_pool) == 0:
        raise ConfigError("Embedded Content needs a nonempty training pool")
    if size > len(train_pool):
        raise ConfigError(f"Embedded Content needs {size} source images, pool has {len(train_pool)}")
    per_class = _check_divisible(size, num_classes)
    rng = np.random.default_rng(derive_seed(seed, "embedded-content", train_pool.name, num_classes, size))

    present = set(int(v) for v in np.unique(train_pool.labels))
    eligible = [t for t in range(num_classes) if present - {t}]
    if len(eligible) == num_classes:
        targets = _balanced_labels(rng, num_classes, per_class)
    else:
        console.print(
            f"[yellow]Embedded Content: pool only holds class(es) {sorted(present)}; "
            f"targets drawn from {len(eligible)} other classes[/yellow]"
        )
        targets = np.asarray([eligible[i % len(eligible)] for i in range(size)], dtype=np.int64)
        targets = targets[rng.permutation(size)]

    order = rng.permutation(len(train_pool))
    used = np.zeros(len(train_pool), dtype=bool)
    picked: List[int] = []
    for target in targets:
        for idx in order:
            if not used[idx] and int(train_pool.labels[idx]) != int(target):
                used[idx] = True
                picked.append(int(idx))
                break
        else:
            raise ConfigError(f"Not enough pool images with a label other than {int(target)}")

    images = np.stack([stamp_logo(train_pool.images[i]) for i in picked])
    return WatermarkSet(
        images=images,
        labels=targets.astype(np.int64),
        method=WatermarkMethod.EMBEDDED_CONTENT,
        seed=seed,
        image_shape=train_pool.image_shape,
        num_classes=num_classes,
        source_labels=tuple(int(train_pool.labels[i]) for i in picked),
        params={"pool": train_pool.name, "requires_training_data": True},
    )


def resize_images(images: np.ndarray, image_shape: Sequence[int]) -> np.ndarray:
    """Resize N x H x W x C images to image_shape, converting channels as needed."""
    h, w, c = (int(d) for d in image_shape)
    x = torch.from_numpy(np.array(images.transpose(0, 3, 1, 2), dtype=np.float32, order="C"))
    if x.shape[1] == 3 and c == 1:
        weights = torch.tensor([0.299, 0.587, 0.114]).view(1, 3, 1, 1)
        x = (x * weights).sum(dim=1, keepdim=True)
    elif x.shape[1] == 1 and c == 3:
        x = x.repeat(1, 3, 1, 1)
    elif x.shape[1] != c:
        raise ConfigError(f"Cannot convert {x.shape[1]} channels to {c}")
    if tuple(x.shape[2:]) != (h, w):
        x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False, antialias=True)
    return x.clamp(0.0, 1.0).numpy().transpose(0, 2, 3, 1).astype(np.float32)


def generate_unrelate(
    external_pool: LabeledDataset,
    num_classes: int,
    size: int,
    seed: int,
    image_shape: Optional[Sequence[int]] = None,
) -> WatermarkSet:
    _check_divisible(size, num_classes)
    if len(external_pool) < size:
        raise ConfigError(f"unRelate needs {size} images, external pool has {len(external_pool)}")
    image_shape = tuple(int(d) for d in (image_shape or external_pool.image_shape))
    rng = np.random.default_rng(derive_seed(seed, "unrelate", external_pool.name, num_classes, size))
    picked = np.sort(rng.choice(len(external_pool), size=size, replace=False))
    picked = picked[rng.permutation(size)]
    images = resize_images(external_pool.images[picked], image_shape)
    labels = np.arange(size, dtype=np.int64) % num_classes
    return WatermarkSet(
        images=images,
        labels=labels,
        method=WatermarkMethod.UNRELATE,
        seed=seed,
        image_shape=image_shape,
        num_classes=num_classes,
        params={"pool": external_pool.name},
    )


def generate_unstruct(
    image_shape: Sequence[int],
    num_classes: int,
    size: int,
    seed: int,
    noise_mean: float = NOISE_MEAN,
    noise_std: float = NOISE_STD,
) -> WatermarkSet:
    image_shape = tuple(int(d) for d in image_shape)
    per_class = _check_divisible(size, num_classes)
    rng = np.random.default_rng(derive_seed(seed, "unstruct", *image_shape, num_classes, size))
    bases = _noise(rng, (num_classes,) + image_shape, noise_mean, noise_std)
    labels = _balanced_labels(rng, num_classes, per_class)
    images = bases[labels]
    return WatermarkSet(
        images=images,
        labels=labels,
        method=WatermarkMethod.UNSTRUCT,
        seed=seed,
        image_shape=image_shape,
        num_classes=num_classes,
        params={"noise_mean": noise_mean, "noise_std": noise_std},
    )


def generate_watermark(
    method: str | WatermarkMethod,
    image_shape: Sequence[int],
    num_classes: int,
    size: int,
    seed: int,
    train_pool: Optional[LabeledDataset] = None,
    external_pool: Optional[LabeledDataset] = None,
) -> WatermarkSet:
    try:
        method = WatermarkMethod(method)
    except ValueError as e:
        raise ConfigError(f"Unknown watermark method '{method}'") from e
    if method == WatermarkMethod.WAFFLE_PATTERN:
        return generate_waffle_pattern(image_shape, num_classes, size, seed)
    if method == WatermarkMethod.UNSTRUCT:
        return generate_unstruct(image_shape, num_classes, size, seed)
    if method == WatermarkMethod.UNRELATE:
        if external_pool is None:
            raise ConfigError("unRelate needs an external (out-of-domain) pool")
        return generate_unrelate(external_pool, num_classes, size, seed, image_shape)
    if train_pool is None:
        raise ConfigError("Embedded Content needs the training pool")
    return generate_embedded_content(train_pool, num_classes, size, seed)


# ---------------------------- Persistence ----------------------------

def _watermark_digest(header: Dict, payload: bytes) -> str:
    meta = {k: header[k] for k in ("method", "seed", "image_shape", "num_classes", "size", "patterns", "source_labels", "params")}
    return hashlib.sha256(payload + canonical_json(meta).encode("utf-8")).hexdigest()


def save_watermark(wm: WatermarkSet, path: str | Path) -> str:
    header = dict(wm.metadata(), kind="watermark", digest=wm.commitment)
    write_container(path, header, wm.payload())
    return wm.commitment


def load_watermark(path: str | Path) -> WatermarkSet:
    header, payload = read_container(path, _watermark_digest)
    h, w, c = header["image_shape"]
    n = header["size"]
    image_bytes = n * h * w * c * 4
    images = np.frombuffer(payload[:image_bytes], dtype="<f4").reshape(n, h, w, c).astype(np.float32)
    labels = np.frombuffer(payload[image_bytes:], dtype="<i8").astype(np.int64)
    source = header.get("source_labels")
    wm = WatermarkSet(
        images=images,
        labels=labels,
        method=WatermarkMethod(header["method"]),
        seed=int(header["seed"]),
        image_shape=(h, w, c),
        num_classes=int(header["num_classes"]),
        patterns=tuple(PatternSpec.from_dict(p) for p in header["patterns"]),
        source_labels=tuple(source) if source is not None else None,
        params=header.get("params") or {},
    )
    return wm
