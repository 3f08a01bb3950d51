#!/usr/bin/env python3
"""
Dataset loading and client partitioning for the federated simulator.

- Loads MNIST, Fashion-MNIST and CIFAR10 from a local cache (auto-download with
  retries when permitted), plus an offline `synthetic` task and the desk-scale
  `mnist-mini` stratified subset
- Pixels are normalized once to [0,1], images are stored H x W x C
- IID partitioning is a stratified shuffle; non-IID follows the
  sort-by-label / split-into-shards / deal-shards-per-client scheme

Cache layout
  <root>/mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte.gz
  <root>/fashion-mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte.gz
  <root>/cifar10/cifar-10-python.tar.gz
"""

from __future__ import annotations

import gzip
import hashlib
import json
import pickle
import tarfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import requests
import torch
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

import settings
from errors import DatasetError, PartitionError
from settings import console, derive_seed

IDX_FILES = {
    "train_images": "train-images-idx3-ubyte.gz",
    "train_labels": "train-labels-idx1-ubyte.gz",
    "test_images": "t10k-images-idx3-ubyte.gz",
    "test_labels": "t10k-labels-idx1-ubyte.gz",
}

SOURCES = {
    "mnist": {
        "base_url": "https://ossci-datasets.s3.amazonaws.com/mnist/",
        "md5": {
            "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
            "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
            "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
            "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
        },
    },
    "fashion-mnist": {
        "base_url": "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
        "md5": {
            "train-images-idx3-ubyte.gz": "8d4fb7e6c68d591d4c3dfef9ec88bf0d",
            "train-labels-idx1-ubyte.gz": "25c81989df183df01b3e8a0aad5dffbe",
            "t10k-images-idx3-ubyte.gz": "bef4ecab320f06d8554ea6380940ec79",
            "t10k-labels-idx1-ubyte.gz": "bb300cfdad3c16e7a12a480ee83cd310",
        },
    },
    "cifar10": {
        "base_url": "https://www.cs.toronto.edu/~kriz/",
        "md5": {"cifar-10-python.tar.gz": "c58f30108f718f92721af3b95e74349a"},
    },
}

MINI_TRAIN_PER_CLASS = 600
MINI_TEST_PER_CLASS = 100

DATASET_NAMES = ("mnist", "mnist-mini", "fashion-mnist", "cifar10", "synthetic")


# ---------------------------- Domain types ----------------------------

@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # (N, H, W, C) float32 in [0,1]
    labels: np.ndarray  # (N,) int64 in [0, num_classes)
    name: str
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"{self.name}: images must be N x H x W x C, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{self.name}: {len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"{self.name}: labels outside [0, {self.num_classes})")
        if len(self.images) and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DatasetError(f"{self.name}: pixel values outside [0,1]")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.images.shape[1:])

    def class_histogram(self, indices: Optional[Sequence[int]] = None) -> Dict[int, int]:
        labels = self.labels if indices is None else self.labels[np.asarray(indices, dtype=np.int64)]
        counts = np.bincount(labels, minlength=self.num_classes)
        return {int(c): int(n) for c, n in enumerate(counts) if n}

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            images=self.images[idx].copy(),
            labels=self.labels[idx].copy(),
            name=name or self.name,
            num_classes=self.num_classes,
        )

    def tensors(self, indices: Optional[Sequence[int]] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """Return (x, y) with x as N x C x H x W float32, y as int64."""
        if indices is None:
            images, labels = self.images, self.labels
        else:
            idx = np.asarray(indices, dtype=np.int64)
            images, labels = self.images[idx], self.labels[idx]
        x = torch.from_numpy(np.array(images.transpose(0, 3, 1, 2), dtype=np.float32, order="C"))
        y = torch.from_numpy(np.asarray(labels, dtype=np.int64).copy())
        return x, y


class DatasetSplits(NamedTuple):
    train: LabeledDataset
    test: LabeledDataset


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    indices: Tuple[int, ...]
    class_histogram: Dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.indices)

    @classmethod
    def from_indices(cls, client_id: int, indices: Iterable[int], labels: np.ndarray) -> "ClientShard":
        idx = sorted(int(i) for i in indices)
        if len(set(idx)) != len(idx):
            raise PartitionError(f"Client {client_id}: duplicate indices in shard")
        hist: Dict[int, int] = {}
        for label in labels[np.asarray(idx, dtype=np.int64)] if idx else []:
            hist[int(label)] = hist.get(int(label), 0) + 1
        return cls(client_id=client_id, indices=tuple(idx), class_histogram=dict(sorted(hist.items())))

    def to_manifest(self) -> Dict:
        return {"client_id": self.client_id, "indices": list(self.indices)}


# ---------------------------- Download + parsing ----------------------------

def _md5(path: Path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@retry(
    reraise=True,
    stop=stop_after_attempt(5),
    wait=wait_exponential(multiplier=1, min=1, max=20),
    retry=retry_if_exception_type(requests.RequestException),
)
def _download(url: str, target: Path) -> None:
    console.print(f"[cyan]Downloading {url}[/cyan]")
    with requests.get(url, stream=True, timeout=60) as resp:
        resp.raise_for_status()
        tmp = target.with_suffix(target.suffix + ".part")
        with open(tmp, "wb") as f:
            for chunk in resp.iter_content(chunk_size=1 << 20):
                f.write(chunk)
        tmp.replace(target)


def _ensure_files(source: str, root: Path, download: bool) -> Path:
    spec = SOURCES[source]
    folder = root / source
    for filename, md5 in spec["md5"].items():
        path = folder / filename
        if not path.exists():
            if not download:
                raise DatasetError(
                    f"Missing dataset file {path} (set WAFFLE_ALLOW_DOWNLOAD=1 to fetch it)"
                )
            folder.mkdir(parents=True, exist_ok=True)
            try:
                _download(spec["base_url"] + filename, path)
            except requests.RequestException as e:
                raise DatasetError(f"Download of {filename} failed: {e}") from e
        actual = _md5(path)
        if actual != md5:
            raise DatasetError(f"Checksum mismatch for {path}: expected {md5}, got {actual}")
    return folder


def _read_idx(path: Path) -> np.ndarray:
    with gzip.open(path, "rb") as f:
        data = f.read()
    magic = int.from_bytes(data[0:4], "big")
    ndim = magic & 0xFF
    dims = [int.from_bytes(data[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    return np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def _load_idx_family(source: str, root: Path, download: bool) -> DatasetSplits:
    folder = _ensure_files(source, root, download)
    splits = []
    for split in ("train", "test"):
        images = _read_idx(folder / IDX_FILES[f"{split}_images"]).astype(np.float32) / 255.0
        labels = _read_idx(folder / IDX_FILES[f"{split}_labels"]).astype(np.int64)
        splits.append(LabeledDataset(images[..., None], labels, f"{source}-{split}", 10))
    return DatasetSplits(*splits)


def _load_cifar10(root: Path, download: bool) -> DatasetSplits:
    folder = _ensure_files("cifar10", root, download)
    batches: Dict[str, dict] = {}
    with tarfile.open(folder / "cifar-10-python.tar.gz", "r:gz") as tar:
        for member in tar.getmembers():
            base = Path(member.name).name
            if base.startswith("data_batch_") or base == "test_batch":
                batches[base] = pickle.load(tar.extractfile(member), encoding="bytes")

    def _stack(names: List[str], split: str) -> LabeledDataset:
        data = np.concatenate([batches[n][b"data"] for n in names])
        labels = np.concatenate([np.asarray(batches[n][b"labels"]) for n in names]).astype(np.int64)
        images = data.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float32) / 255.0
        return LabeledDataset(images, labels, f"cifar10-{split}", 10)

    return DatasetSplits(
        _stack([f"data_batch_{i}" for i in range(1, 6)], "train"),
        _stack(["test_batch"], "test"),
    )


def make_synthetic_dataset(
    image_shape: Sequence[int] = (28, 28, 1),
    num_classes: int = 10,
    train_per_class: int = 200,
    test_per_class: int = 50,
    seed: int = 0,
    noise_std: float = 0.15,
) -> DatasetSplits:
    """Offline class-template task: each class is a fixed random blocky template plus noise."""
    h, w, c = (int(d) for d in image_shape)
    rng = np.random.default_rng(derive_seed(seed, "synthetic", h, w, c, num_classes))
    # coarse 4x4 block templates upsampled to the image size keep classes well separated
    coarse = rng.random((num_classes, 4, 4, c)) > 0.5
    rows = (np.arange(h) * 4) // h
    cols = (np.arange(w) * 4) // w
    templates = coarse[:, rows][:, :, cols].astype(np.float32) * 0.7 + 0.15

    def _draw(per_class: int, split: str) -> LabeledDataset:
        split_rng = np.random.default_rng(derive_seed(seed, "synthetic", split, h, w, c, num_classes))
        labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
        noise = split_rng.normal(0.0, noise_std, size=(len(labels), h, w, c)).astype(np.float32)
        images = np.clip(templates[labels] + noise, 0.0, 1.0).astype(np.float32)
        order = split_rng.permutation(len(labels))
        return LabeledDataset(images[order], labels[order], f"synthetic-{split}", num_classes)

    return DatasetSplits(_draw(train_per_class, "train"), _draw(test_per_class, "test"))


def stratified_subset(ds: LabeledDataset, per_class: int, seed: int, name: Optional[str] = None) -> LabeledDataset:
    """Deterministic subset holding exactly `per_class` samples of every class."""
    rng = np.random.default_rng(derive_seed(seed, "stratified", ds.name, per_class))
    picked: List[np.ndarray] = []
    for cls in range(ds.num_classes):
        pool = np.flatnonzero(ds.labels == cls)
        if len(pool) < per_class:
            raise DatasetError(f"{ds.name}: class {cls} has {len(pool)} samples, {per_class} requested")
        picked.append(np.sort(rng.choice(pool, size=per_class, replace=False)))
    return ds.subset(np.sort(np.concatenate(picked)), name=name)


def load_dataset(
    name: str,
    root: Optional[str | Path] = None,
    download: Optional[bool] = None,
    **options,
) -> DatasetSplits:
    """Load train and test splits of a named dataset."""
    root = Path(root) if root is not None else settings.data_root()
    download = settings.allow_download() if download is None else download

    if name == "synthetic":
        return make_synthetic_dataset(**options)
    if name in ("mnist", "fashion-mnist"):
        return _load_idx_family(name, root, download)
    if name == "mnist-mini":
        full = _load_idx_family("mnist", root, download)
        seed = int(options.get("seed", 0))
        return DatasetSplits(
            stratified_subset(full.train, MINI_TRAIN_PER_CLASS, seed, name="mnist-mini-train"),
            stratified_subset(full.test, MINI_TEST_PER_CLASS, seed, name="mnist-mini-test"),
        )
    if name == "cifar10":
        return _load_cifar10(root, download)
    raise DatasetError(f"Unknown dataset '{name}' (known: {', '.join(DATASET_NAMES)})")


# ---------------------------- Partitioning ----------------------------

def _class_pools(ds: LabeledDataset, rng: np.random.Generator) -> List[List[int]]:
    pools = []
    for cls in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == cls)
        pools.append([int(i) for i in rng.permutation(idx)])
    return pools


def partition_iid(ds: LabeledDataset, num_clients: int, per_client: int, seed: int) -> List[ClientShard]:
    """Stratified shuffle: classes are interleaved before dealing so shards stay balanced."""
    if num_clients < 1 or per_client < 1:
        raise PartitionError("num_clients and per_client must be >= 1")
    needed = num_clients * per_client
    if needed > len(ds):
        raise PartitionError(
            f"{num_clients} clients x {per_client} samples needs {needed}, "
            f"{ds.name} has {len(ds)} (deficit {needed - len(ds)})"
        )
    rng = np.random.default_rng(derive_seed(seed, "partition", "iid", ds.name, len(ds), num_clients, per_client))
    pools = _class_pools(ds, rng)

    # pick `needed` samples round-robin over classes so the selection is stratified
    selected: List[int] = []
    depth = 0
    while len(selected) < needed:
        for cls in rng.permutation(ds.num_classes):
            if depth < len(pools[cls]) and len(selected) < needed:
                selected.append(pools[cls][depth])
        depth += 1

    # class-major order dealt cyclically spreads every class evenly over clients
    class_order = {int(c): r for r, c in enumerate(rng.permutation(ds.num_classes))}
    ranked = sorted(range(needed), key=lambda j: (class_order[int(ds.labels[selected[j]])], j))
    assigned: List[List[int]] = [[] for _ in range(num_clients)]
    for pos, j in enumerate(ranked):
        assigned[pos % num_clients].append(selected[j])

    return [ClientShard.from_indices(k, assigned[k], ds.labels) for k in range(num_clients)]


def partition_noniid(ds: LabeledDataset, num_clients: int, classes_per_client: int, seed: int) -> List[ClientShard]:
    """Label-sorted shards: every client receives `classes_per_client` single-class shards."""
    if classes_per_client < 1 or num_clients < 1:
        raise PartitionError("num_clients and classes_per_client must be >= 1")
    num_shards = num_clients * classes_per_client
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    # largest shard size whose single-class shards still cover every client
    shard_size = len(ds) // num_shards
    while shard_size >= 1 and int(np.sum(counts // shard_size)) < num_shards:
        shard_size -= 1
    if shard_size < 1:
        raise PartitionError(
            f"{num_clients} clients x {classes_per_client} classes needs {num_shards} label shards, "
            f"{ds.name} has only {len(ds)} samples"
        )

    rng = np.random.default_rng(
        derive_seed(seed, "partition", "noniid", ds.name, len(ds), num_clients, classes_per_client)
    )
    pools = _class_pools(ds, rng)
    label_shards: List[List[List[int]]] = [
        [pool[i * shard_size:(i + 1) * shard_size] for i in range(len(pool) // shard_size)]
        for pool in pools
    ]

    # interleave shards class-by-class so consecutive shards belong to different classes
    sequence: List[List[int]] = []
    depth = 0
    while len(sequence) < num_shards:
        order = rng.permutation(ds.num_classes)
        for cls in order:
            if depth < len(label_shards[cls]) and len(sequence) < num_shards:
                sequence.append(label_shards[cls][depth])
        depth += 1

    shards = []
    for k in range(num_clients):
        picked = sequence[k * classes_per_client:(k + 1) * classes_per_client]
        shards.append(ClientShard.from_indices(k, [i for s in picked for i in s], ds.labels))
    return shards


def merge_shards(shards: Sequence[ClientShard]) -> List[int]:
    merged: List[int] = []
    for shard in shards:
        merged.extend(shard.indices)
    if len(set(merged)) != len(merged):
        raise PartitionError("Shards overlap; a partition must be disjoint")
    return sorted(merged)


def save_partition_manifest(shards: Sequence[ClientShard], path: str | Path, meta: Optional[Dict] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = {"meta": meta or {}, "shards": [s.to_manifest() for s in shards]}
    with open(path, "w") as f:
        json.dump(data, f)


def load_partition_manifest(path: str | Path, ds: LabeledDataset) -> List[ClientShard]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"Partition manifest not found: {path}")
    with open(path, "r") as f:
        data = json.load(f)
    return [ClientShard.from_indices(s["client_id"], s["indices"], ds.labels) for s in data["shards"]]
