#!/usr/bin/env python3
"""
Client-server FedAvg simulation with the WAFFLE aggregator extension.

- Clients run the same local_update in every embedding mode
- The aggregator averages client parameters (pairwise float64 summation)
- WAFFLE: Pretrain embeds the watermark once before round 1, Retrain re-embeds it
  after every aggregation until watermark accuracy >= th or E_r epochs are spent
- Retrain only ever sees parameter vectors and the watermark set
- History is persisted as one JSON line per round, flushed immediately; resumable
  runs also checkpoint the global model after every round
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm

from datasets import ClientShard, LabeledDataset
from errors import ConfigError, LayoutMismatchError, LabError
from settings import CODE_VERSION, SCHEMA_VERSION, console, derive_seed, digest_of
from training import (
    Classifier,
    ParameterVector,
    TrainConfig,
    accuracy,
    chained_seeds,
    init_model,
    load_checkpoint,
    local_update,
    save_checkpoint,
    train_epochs,
)
from watermark import WatermarkSet


class EmbeddingMode(str, Enum):
    NONE = "none"
    PRE_EMBED = "pre_embed"
    POST_EMBED = "post_embed"
    WAFFLE = "waffle"


# ---------------------------- Configuration ----------------------------

@dataclass
class WaffleConfig:
    enabled: bool = True
    threshold: float = 0.98
    max_retrain_rounds: int = 100
    pretrain_epochs: int = 25
    pretrain_lr: float = 0.1
    retrain_lr: float = 0.005
    momentum: float = 0.5
    weight_decay: float = 5e-5
    # Retrain runs plain SGD unless overridden
    retrain_momentum: float = 0.0
    retrain_weight_decay: float = 0.0
    batch_size: int = 50
    pretrain_target: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.threshold <= 1.0):
            raise ConfigError(f"waffle.threshold must lie in (0, 1], got {self.threshold}")
        if self.max_retrain_rounds < 1:
            raise ConfigError(f"waffle.max_retrain_rounds must be >= 1, got {self.max_retrain_rounds}")
        if self.pretrain_epochs < 0:
            raise ConfigError(f"waffle.pretrain_epochs must be >= 0, got {self.pretrain_epochs}")
        if self.batch_size < 1:
            raise ConfigError("waffle.batch_size must be >= 1")


@dataclass
class FederationConfig:
    num_clients: int = 20
    clients_per_round: int = 5
    aggregation_rounds: int = 20
    client: TrainConfig = field(default_factory=TrainConfig)
    waffle: WaffleConfig = field(default_factory=WaffleConfig)
    embedding_mode: EmbeddingMode = EmbeddingMode.WAFFLE
    seed: int = 0
    arch: str = "cnn5"
    # execution options: they never change results, so they stay out of the digest
    parallel_clients: int = 1
    resumable: bool = False

    def __post_init__(self):
        self.embedding_mode = EmbeddingMode(self.embedding_mode)
        if not (1 <= self.clients_per_round <= self.num_clients):
            raise ConfigError(
                f"clients_per_round must lie in [1, num_clients={self.num_clients}], got {self.clients_per_round}"
            )
        if self.aggregation_rounds < 0:
            raise ConfigError("aggregation_rounds must be >= 0")
        if self.parallel_clients < 1:
            raise ConfigError("parallel_clients must be >= 1")
        if self.embedding_mode in (EmbeddingMode.WAFFLE, EmbeddingMode.PRE_EMBED, EmbeddingMode.POST_EMBED):
            self.waffle.enabled = True

    @classmethod
    def from_dict(cls, data: Dict) -> "FederationConfig":
        data = dict(data)
        try:
            client = TrainConfig.from_dict(data.pop("client", {}))
            waffle = WaffleConfig(**data.pop("waffle", {}))
            return cls(client=client, waffle=waffle, **data)
        except TypeError as e:
            raise ConfigError(f"Invalid federation config: {e}") from e
        except ValueError as e:
            raise ConfigError(f"Invalid federation config: {e}") from e

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["embedding_mode"] = self.embedding_mode.value
        return data

    def digest(self) -> str:
        data = self.to_dict()
        data.pop("parallel_clients")
        data.pop("resumable")
        return digest_of(data)


# ---------------------------- Records ----------------------------

@dataclass
class RoundRecord:
    round: int
    selected_clients: List[int]
    test_accuracy: float
    watermark_accuracy: Optional[float]
    retrain_rounds_used: int
    stop_reason: Optional[str]
    local_passes: int
    wall_time: float
    config_digest: str = ""
    code_version: str = CODE_VERSION
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "RoundRecord":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


@dataclass
class EmbeddingRecord:
    phase: str  # "pretrain" | "post_embed"
    epochs: int
    watermark_accuracy: float
    reached_target: bool
    warning: Optional[str] = None

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class PretrainResult:
    params: ParameterVector
    watermark_accuracy: float
    epochs: int
    reached_target: bool
    warning: Optional[str] = None


@dataclass
class RetrainResult:
    params: ParameterVector
    retrain_rounds: int
    stop_reason: str  # "threshold" | "max_rounds"
    watermark_accuracy: float


@dataclass
class FederationResult:
    history: List[RoundRecord]
    final_params: ParameterVector
    model: Classifier
    embedding: List[EmbeddingRecord] = field(default_factory=list)


# ---------------------------- Core operations ----------------------------

def select_clients(num_clients: int, clients_per_round: int, round_idx: int, seed: int) -> List[int]:
    if not (1 <= clients_per_round <= num_clients):
        raise ConfigError(f"Cannot select {clients_per_round} of {num_clients} clients")
    rng = np.random.default_rng(derive_seed(seed, "select", round_idx))
    return sorted(int(c) for c in rng.choice(num_clients, size=clients_per_round, replace=False))


def _pairwise_sum(terms: List[torch.Tensor]) -> torch.Tensor:
    while len(terms) > 1:
        paired = [terms[i] + terms[i + 1] for i in range(0, len(terms) - 1, 2)]
        if len(terms) % 2:
            paired.append(terms[-1])
        terms = paired
    return terms[0]


def fedavg_aggregate(params_list: Sequence[ParameterVector], weights: Sequence[float]) -> ParameterVector:
    """Element-wise weighted mean of parameter vectors."""
    if not params_list:
        raise ConfigError("fedavg_aggregate needs at least one parameter vector")
    if len(weights) != len(params_list):
        raise ConfigError(f"{len(params_list)} parameter vectors but {len(weights)} weights")
    first = params_list[0]
    for other in params_list[1:]:
        if other.layout != first.layout:
            raise LayoutMismatchError("Cannot aggregate parameter vectors with different layouts")
    w = [float(x) for x in weights]
    if any(x < 0 for x in w) or math.fsum(w) <= 0:
        raise ConfigError(f"Aggregation weights must be nonnegative with a positive sum, got {w}")
    total = math.fsum(w)
    terms = [p.values.double() * (wi / total) for p, wi in zip(params_list, w)]
    return ParameterVector(_pairwise_sum(terms).float().contiguous(), first.layout)


def _embed(model: Classifier, wm: WatermarkSet, cfg: WaffleConfig, epochs: int, seed: int) -> Classifier:
    work = model.clone()
    if epochs > 0:
        train_epochs(
            work.module,
            wm.tensors(),
            lr=cfg.pretrain_lr,
            batch_size=cfg.batch_size,
            pass_seeds=chained_seeds(derive_seed(seed, "pretrain"), epochs),
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
            where="pretrain",
        )
    return work


def pretrain(model: Classifier, wm: WatermarkSet, cfg: WaffleConfig, seed: int, epochs: Optional[int] = None) -> PretrainResult:
    """One-time embedding of the watermark into the initial global model."""
    if not cfg.enabled:
        raise ConfigError("pretrain called with WAFFLE disabled")
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    if epochs == 0:
        params = model.get_params()
        return PretrainResult(params, accuracy(model, wm.tensors()), 0, False, None)
    work = _embed(model, wm, cfg, epochs, seed)
    acc = accuracy(work, wm.tensors())
    reached = acc >= cfg.pretrain_target
    warning = None
    if not reached:
        warning = (
            f"Pretrain reached watermark accuracy {acc:.3f} after {epochs} epochs "
            f"(target {cfg.pretrain_target:.2f}); consider raising pretrain_epochs"
        )
        console.print(f"[yellow]{warning}[/yellow]")
    return PretrainResult(work.get_params(), acc, epochs, reached, warning)


def retrain(
    model: Classifier,
    client_params: Sequence[ParameterVector],
    weights: Sequence[float],
    wm: WatermarkSet,
    cfg: WaffleConfig,
    seed: int,
) -> RetrainResult:
    """Aggregate, then re-embed the watermark until accuracy >= th or E_r epochs are used."""
    if not cfg.enabled:
        raise ConfigError("retrain called with WAFFLE disabled")
    aggregate = fedavg_aggregate(client_params, weights)
    work = model.with_params(aggregate)
    samples = wm.tensors()
    acc = accuracy(work, samples)
    t_r = 0
    while acc < cfg.threshold and t_r < cfg.max_retrain_rounds:
        train_epochs(
            work.module,
            samples,
            lr=cfg.retrain_lr,
            batch_size=cfg.batch_size,
            pass_seeds=[derive_seed(seed, "retrain", t_r)],
            momentum=cfg.retrain_momentum,
            weight_decay=cfg.retrain_weight_decay,
            where="retrain",
        )
        t_r += 1
        acc = accuracy(work, samples)
    stop_reason = "threshold" if acc >= cfg.threshold else "max_rounds"
    params = aggregate if t_r == 0 else work.get_params()
    return RetrainResult(params, t_r, stop_reason, acc)


def computational_overhead(history: Sequence[RoundRecord]) -> float:
    """Total retrain epochs divided by total client local passes."""
    if not history:
        raise ConfigError("computational_overhead needs a nonempty history")
    retrain_total = sum(r.retrain_rounds_used for r in history)
    client_total = sum(len(r.selected_clients) * r.local_passes for r in history)
    return retrain_total / client_total if client_total else 0.0


# ---------------------------- History persistence ----------------------------

class HistoryWriter:
    """Append-only JSON-lines history, flushed after every record."""

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def reset(self, keep: Sequence[RoundRecord] = ()) -> None:
        if not self.path:
            return
        with open(self.path, "w") as f:
            for record in keep:
                f.write(json.dumps(record.to_dict()) + "\n")

    def append(self, record: RoundRecord) -> None:
        if not self.path:
            return
        with open(self.path, "a") as f:
            f.write(json.dumps(record.to_dict()) + "\n")
            f.flush()


def read_history(path: Path) -> List[RoundRecord]:
    path = Path(path)
    if not path.exists():
        return []
    records = []
    with open(path, "r") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(RoundRecord.from_dict(json.loads(line)))
    return records


# ---------------------------- Federation run ----------------------------

class Federation:
    """One federated run: owns the global model, history and resume state."""

    def __init__(
        self,
        cfg: FederationConfig,
        train: LabeledDataset,
        test: LabeledDataset,
        shards: Sequence[ClientShard],
        wm: Optional[WatermarkSet] = None,
        run_dir: Optional[str | Path] = None,
        show_progress: bool = True,
    ):
        if len(shards) != cfg.num_clients:
            raise ConfigError(f"{len(shards)} shards given for {cfg.num_clients} clients")
        if cfg.embedding_mode != EmbeddingMode.NONE and wm is None:
            raise ConfigError(f"Embedding mode '{cfg.embedding_mode.value}' needs a watermark set")
        if wm is not None and tuple(wm.image_shape) != train.image_shape:
            raise ConfigError(f"Watermark shape {wm.image_shape} does not match task shape {train.image_shape}")
        self.cfg = cfg
        self.wm = wm
        self.shards = list(shards)
        self.digest = cfg.digest()
        self.show_progress = show_progress
        self.client_samples = [train.tensors(s.indices) for s in self.shards]
        self.client_weights = [float(len(s)) for s in self.shards]
        self.test_samples = test.tensors()
        self.wm_samples = wm.tensors() if wm is not None else None
        self.run_dir = Path(run_dir) if run_dir else None
        self.history_writer = HistoryWriter(self.run_dir / "history.jsonl" if self.run_dir else None)
        self.model = init_model(cfg.arch, train.image_shape, train.num_classes, derive_seed(cfg.seed, "global-init"))

    # -- persistence helpers --

    def _checkpoint_paths(self):
        return self.run_dir / "checkpoint.ckpt", self.run_dir / "checkpoint.json"

    def _save_checkpoint(self, round_idx: int) -> None:
        if not (self.run_dir and self.cfg.resumable):
            return
        ckpt, meta = self._checkpoint_paths()
        save_checkpoint(self.model, ckpt)
        with open(meta, "w") as f:
            json.dump({"round": round_idx, "config_digest": self.digest}, f)

    def _try_resume(self) -> Optional[int]:
        if not (self.run_dir and self.cfg.resumable):
            return None
        ckpt, meta = self._checkpoint_paths()
        if not (ckpt.exists() and meta.exists()):
            return None
        with open(meta, "r") as f:
            info = json.load(f)
        if info.get("config_digest") != self.digest:
            console.print("[yellow]Checkpoint belongs to a different config - starting fresh[/yellow]")
            return None
        self.model = load_checkpoint(ckpt)
        return int(info["round"])

    def _write_embedding(self, records: List[EmbeddingRecord]) -> None:
        if not self.run_dir:
            return
        with open(self.run_dir / "embedding.json", "w") as f:
            json.dump([r.to_dict() for r in records], f, indent=2)

    def _read_embedding(self) -> List[EmbeddingRecord]:
        path = self.run_dir / "embedding.json" if self.run_dir else None
        if not path or not path.exists():
            return []
        with open(path, "r") as f:
            return [EmbeddingRecord(**r) for r in json.load(f)]

    # -- round structure --

    def _embedding_record(self, phase: str, result: PretrainResult) -> EmbeddingRecord:
        return EmbeddingRecord(phase, result.epochs, result.watermark_accuracy, result.reached_target, result.warning)

    def _client_updates(self, selected: List[int], round_idx: int) -> List[ParameterVector]:
        def _train(cid: int) -> ParameterVector:
            return local_update(
                self.model,
                self.client_samples[cid],
                self.cfg.client,
                derive_seed(self.cfg.seed, "client", round_idx, cid),
            )

        if self.cfg.parallel_clients > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.parallel_clients) as pool:
                return list(pool.map(_train, selected))
        return [_train(cid) for cid in selected]

    def run_round(self, round_idx: int) -> RoundRecord:
        started = time.perf_counter()
        cfg = self.cfg
        selected = select_clients(cfg.num_clients, cfg.clients_per_round, round_idx, cfg.seed)
        updates = self._client_updates(selected, round_idx)
        weights = [self.client_weights[c] for c in selected]

        t_r, stop_reason = 0, None
        if cfg.embedding_mode == EmbeddingMode.WAFFLE:
            result = retrain(self.model, updates, weights, self.wm, cfg.waffle, derive_seed(cfg.seed, "round", round_idx))
            new_params, t_r, stop_reason = result.params, result.retrain_rounds, result.stop_reason
        else:
            new_params = fedavg_aggregate(updates, weights)
        self.model.set_params(new_params)

        return RoundRecord(
            round=round_idx,
            selected_clients=selected,
            test_accuracy=accuracy(self.model, self.test_samples),
            watermark_accuracy=accuracy(self.model, self.wm_samples) if self.wm_samples is not None else None,
            retrain_rounds_used=t_r,
            stop_reason=stop_reason,
            local_passes=cfg.client.local_passes,
            wall_time=time.perf_counter() - started,
            config_digest=self.digest,
        )

    def run(self, resume: bool = False) -> FederationResult:
        cfg = self.cfg
        history: List[RoundRecord] = []
        embedding: List[EmbeddingRecord] = []
        start_round = 1

        resumed_at = self._try_resume() if resume else None
        if resumed_at is not None:
            history = [r for r in read_history(self.history_writer.path) if r.round <= resumed_at]
            embedding = [e for e in self._read_embedding() if e.phase == "pretrain"]
            self.history_writer.reset(history)
            start_round = resumed_at + 1
            console.print(f"[blue]Resuming {self.run_dir} after round {resumed_at}[/blue]")
        else:
            self.history_writer.reset()
            if cfg.embedding_mode in (EmbeddingMode.PRE_EMBED, EmbeddingMode.WAFFLE):
                result = pretrain(self.model, self.wm, cfg.waffle, derive_seed(cfg.seed, "embed"))
                self.model.set_params(result.params)
                embedding.append(self._embedding_record("pretrain", result))
                self._write_embedding(embedding)
            self._save_checkpoint(0)

        rounds = range(start_round, cfg.aggregation_rounds + 1)
        with tqdm(rounds, desc=f"FedAvg [{cfg.embedding_mode.value}]", unit="round", disable=not self.show_progress) as pbar:
            for t in pbar:
                record = self.run_round(t)
                history.append(record)
                self.history_writer.append(record)
                self._save_checkpoint(t)
                postfix = {"test": f"{record.test_accuracy:.3f}"}
                if record.watermark_accuracy is not None:
                    postfix["wm"] = f"{record.watermark_accuracy:.3f}"
                if cfg.embedding_mode == EmbeddingMode.WAFFLE:
                    postfix["t_r"] = record.retrain_rounds_used
                pbar.set_postfix(postfix)

        if cfg.embedding_mode == EmbeddingMode.POST_EMBED:
            result = pretrain(self.model, self.wm, cfg.waffle, derive_seed(cfg.seed, "embed"))
            self.model.set_params(result.params)
            embedding.append(self._embedding_record("post_embed", result))
        self._write_embedding(embedding)

        return FederationResult(history, self.model.get_params(), self.model, embedding)


def run_federation(
    cfg: FederationConfig,
    train: LabeledDataset,
    test: LabeledDataset,
    shards: Sequence[ClientShard],
    wm: Optional[WatermarkSet] = None,
    run_dir: Optional[str | Path] = None,
    resume: bool = False,
    show_progress: bool = True,
) -> FederationResult:
    """Run E_a aggregation rounds in the configured embedding mode."""
    federation = Federation(cfg, train, test, shards, wm, run_dir, show_progress)
    try:
        return federation.run(resume=resume)
    except LabError as e:
        console.print(f"[red]Federation run failed: {e}[/red]")
        raise
