"""
Trainable classifier substrate: architectures, flat parameter views, the shared
mini-batch SGD loop, evaluation, gradient checking and checkpoints.

Architectures
- cnn5: conv(32,5x5)-pool, conv(64,5x5)-pool, fc(512), fc(128), fc(m); ReLU, no batch norm
- mlp:  flatten, fc(hidden), fc(m); used for gradient checks and fast tests
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from artifacts import read_container, write_container
from errors import ConfigError, DivergenceError, LayoutMismatchError, ShapeMismatchError
from settings import derive_seed

Samples = Tuple[torch.Tensor, torch.Tensor]  # (x: N x C x H x W float32, y: N int64)

LOSSES = {"cross-entropy": F.cross_entropy}


def configure_determinism() -> None:
    torch.use_deterministic_algorithms(True, warn_only=True)


# ---------------------------- Architectures ----------------------------

class CNN5(nn.Module):
    def __init__(self, input_shape: Sequence[int], num_classes: int):
        super().__init__()
        h, w, c = input_shape
        self.conv1 = nn.Conv2d(c, 32, kernel_size=5, padding=2)
        self.conv2 = nn.Conv2d(32, 64, kernel_size=5, padding=2)
        self.fc1 = nn.Linear(64 * (h // 4) * (w // 4), 512)
        self.fc2 = nn.Linear(512, 128)
        self.head = nn.Linear(128, num_classes)

    def feature_layers(self) -> List[nn.Module]:
        return [self.conv1, self.conv2, self.fc1, self.fc2]

    def features(self, x: torch.Tensor) -> torch.Tensor:
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = torch.flatten(x, 1)
        x = F.relu(self.fc1(x))
        return F.relu(self.fc2(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


class MLP(nn.Module):
    def __init__(self, input_shape: Sequence[int], num_classes: int, hidden: int = 32):
        super().__init__()
        self.fc1 = nn.Linear(int(np.prod(input_shape)), hidden)
        self.head = nn.Linear(hidden, num_classes)

    def feature_layers(self) -> List[nn.Module]:
        return [self.fc1]

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.fc1(torch.flatten(x, 1)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


ARCHITECTURES: Dict[str, Callable[[Sequence[int], int], nn.Module]] = {
    "cnn5": CNN5,
    "mlp": MLP,
}


# ---------------------------- Domain types ----------------------------

@dataclass(frozen=True)
class ParameterVector:
    values: torch.Tensor  # flat float32, detached
    layout: Tuple[Tuple[str, Tuple[int, ...]], ...]

    def __post_init__(self):
        expected = sum(int(np.prod(shape)) for _, shape in self.layout)
        if self.values.ndim != 1 or self.values.numel() != expected:
            raise LayoutMismatchError(f"{self.values.numel()} values for a layout of {expected} elements")

    def __len__(self) -> int:
        return self.values.numel()

    def check_compatible(self, other: "ParameterVector") -> None:
        if self.layout != other.layout:
            raise LayoutMismatchError("ParameterVectors have different layouts")

    def scaled(self, alpha: float) -> "ParameterVector":
        return ParameterVector((self.values * alpha).contiguous(), self.layout)

    def equals(self, other: "ParameterVector") -> bool:
        return self.layout == other.layout and torch.equal(self.values, other.values)

    def slices(self) -> Dict[str, slice]:
        out, offset = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = slice(offset, offset + n)
            offset += n
        return out

    def to_bytes(self) -> bytes:
        return self.values.numpy().astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, payload: bytes, layout) -> "ParameterVector":
        values = torch.from_numpy(np.frombuffer(payload, dtype="<f4").astype(np.float32).copy())
        return cls(values, tuple((name, tuple(shape)) for name, shape in layout))


@dataclass
class TrainConfig:
    local_passes: int = 1
    learning_rate: float = 0.1
    batch_size: int = 50
    momentum: float = 0.0
    weight_decay: float = 0.0
    loss: str = "cross-entropy"

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.local_passes < 1:
            raise ConfigError(f"local_passes must be >= 1, got {self.local_passes}")
        if self.loss not in LOSSES:
            raise ConfigError(f"Unsupported loss '{self.loss}'")

    @classmethod
    def from_dict(cls, data: Dict) -> "TrainConfig":
        return cls(**data)

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class Classifier:
    arch: str
    input_shape: Tuple[int, int, int]
    num_classes: int
    module: nn.Module

    def get_params(self) -> ParameterVector:
        layout = tuple((name, tuple(p.shape)) for name, p in self.module.named_parameters())
        flat = torch.cat([p.detach().reshape(-1) for p in self.module.parameters()]).float().clone()
        return ParameterVector(flat, layout)

    def set_params(self, params: ParameterVector) -> None:
        own = tuple((name, tuple(p.shape)) for name, p in self.module.named_parameters())
        if own != params.layout:
            raise LayoutMismatchError(f"Parameter layout does not match architecture '{self.arch}'")
        with torch.no_grad():
            offset = 0
            for p in self.module.parameters():
                n = p.numel()
                p.copy_(params.values[offset:offset + n].view_as(p))
                offset += n

    def with_params(self, params: ParameterVector) -> "Classifier":
        clone = self.clone()
        clone.set_params(params)
        return clone

    def clone(self) -> "Classifier":
        return Classifier(self.arch, self.input_shape, self.num_classes, copy.deepcopy(self.module))

    def check_input(self, x: torch.Tensor) -> None:
        h, w, c = self.input_shape
        if x.ndim != 4 or tuple(x.shape[1:]) != (c, h, w):
            raise ShapeMismatchError(f"Model expects N x {c} x {h} x {w}, got {tuple(x.shape)}")

    @torch.no_grad()
    def logits(self, x: torch.Tensor, batch_size: int = 500) -> torch.Tensor:
        self.check_input(x)
        self.module.eval()
        return torch.cat([self.module(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])

    def predict(self, x: torch.Tensor, batch_size: int = 500) -> torch.Tensor:
        return self.logits(x, batch_size).argmax(dim=1)


def init_model(arch: str, input_shape: Sequence[int], num_classes: int, seed: int) -> Classifier:
    """Deterministic fan-in scaled uniform initialization."""
    if arch not in ARCHITECTURES:
        raise ConfigError(f"Unknown architecture '{arch}' (known: {', '.join(ARCHITECTURES)})")
    input_shape = tuple(int(d) for d in input_shape)
    module = ARCHITECTURES[arch](input_shape, num_classes)
    gen = torch.Generator().manual_seed(derive_seed(seed, "init", arch))
    with torch.no_grad():
        for layer in module.modules():
            if isinstance(layer, (nn.Conv2d, nn.Linear)):
                fan_in = layer.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                layer.weight.copy_(torch.empty_like(layer.weight).uniform_(-bound, bound, generator=gen))
                layer.bias.copy_(torch.empty_like(layer.bias).uniform_(-bound, bound, generator=gen))
    return Classifier(arch, input_shape, num_classes, module)


# ---------------------------- Training loop ----------------------------

def next_seed(seed: int) -> int:
    return derive_seed(seed, "next")


def chained_seeds(seed: int, passes: int) -> List[int]:
    """Pass p of a multi-pass call uses the p-th link of the chain starting at `seed`."""
    seeds, s = [], seed
    for _ in range(passes):
        seeds.append(s)
        s = next_seed(s)
    return seeds


def train_epochs(
    module: nn.Module,
    samples: Samples,
    *,
    lr: float,
    batch_size: int,
    pass_seeds: Sequence[int],
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    loss_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor] = F.cross_entropy,
    mask: Optional[torch.Tensor] = None,
    where: str = "training",
    batch_transform: Optional[Callable[[torch.Tensor, torch.Tensor, torch.Generator], Samples]] = None,
) -> nn.Module:
    """In-place mini-batch SGD over `samples`, one shuffled pass per seed.

    `mask` (flat, same layout as the module parameters) pins masked-out weights to
    zero after every step. `batch_transform` may rewrite a batch (attack mixtures).
    """
    x, y = samples
    if len(x) == 0:
        raise ConfigError(f"No samples to train on during {where}")
    params = [p for p in module.parameters()]
    optimizer = torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    masks = _split_mask(mask, params) if mask is not None else None
    step = 0
    module.train()
    for seed in pass_seeds:
        gen = torch.Generator().manual_seed(int(seed))
        order = torch.randperm(len(x), generator=gen)
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            bx, by = x[idx], y[idx]
            if batch_transform is not None:
                bx, by = batch_transform(bx, by, gen)
            optimizer.zero_grad()
            loss = loss_fn(module(bx), by)
            if not torch.isfinite(loss):
                raise DivergenceError(step, float(loss), where)
            loss.backward()
            optimizer.step()
            if masks is not None:
                with torch.no_grad():
                    for p, m in zip(params, masks):
                        p.mul_(m)
            step += 1
    module.eval()
    return module


def _split_mask(mask: torch.Tensor, params: List[torch.Tensor]) -> List[torch.Tensor]:
    out, offset = [], 0
    for p in params:
        n = p.numel()
        out.append(mask[offset:offset + n].view_as(p).to(p.dtype))
        offset += n
    return out


def local_update(model: Classifier, samples: Samples, cfg: TrainConfig, seed: int) -> ParameterVector:
    """Client-side training: E_c shuffled passes of SGD. `model` is left untouched."""
    if len(samples[0]) == 0:
        raise ConfigError("local_update needs a nonempty shard")
    model.check_input(samples[0])
    work = model.clone()
    train_epochs(
        work.module,
        samples,
        lr=cfg.learning_rate,
        batch_size=cfg.batch_size,
        pass_seeds=chained_seeds(seed, cfg.local_passes),
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        loss_fn=LOSSES[cfg.loss],
        where="local update",
    )
    return work.get_params()


# ---------------------------- Evaluation ----------------------------

def accuracy(model: Classifier, samples: Samples, batch_size: int = 500) -> float:
    x, y = samples
    if len(x) == 0:
        raise ConfigError("accuracy needs at least one sample")
    if len(x) != len(y):
        raise ShapeMismatchError(f"{len(x)} inputs but {len(y)} labels")
    preds = model.predict(x, batch_size)
    return float((preds == y).sum().item()) / len(y)


@torch.no_grad()
def evaluate_loss(model: Classifier, samples: Samples, batch_size: int = 500) -> float:
    x, y = samples
    logits = model.logits(x, batch_size)
    return float(F.cross_entropy(logits, y).item())


def gradient_check(model: Classifier, samples: Samples, h: float = 1e-5, max_coords: int = 2000, seed: int = 0) -> float:
    """Max relative error between autograd gradients and central finite differences (float64)."""
    module = copy.deepcopy(model.module).double()
    module.eval()
    x, y = samples[0].double(), samples[1]
    params = list(module.parameters())

    def _loss() -> torch.Tensor:
        return F.cross_entropy(module(x), y)

    module.zero_grad()
    _loss().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params]).clone()
    flat_refs = [(p, i) for p in params for i in range(p.numel())]

    if len(flat_refs) > max_coords:
        gen = torch.Generator().manual_seed(derive_seed(seed, "gradcheck"))
        picks = torch.randperm(len(flat_refs), generator=gen)[:max_coords].sort().values.tolist()
    else:
        picks = list(range(len(flat_refs)))

    worst = 0.0
    with torch.no_grad():
        for k in picks:
            p, i = flat_refs[k]
            view = p.view(-1)
            orig = view[i].item()
            view[i] = orig + h
            plus = _loss().item()
            view[i] = orig - h
            minus = _loss().item()
            view[i] = orig
            numeric = (plus - minus) / (2 * h)
            a = analytic[k].item()
            denom = max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


# ---------------------------- Checkpoints ----------------------------

def _checkpoint_digest(header: Dict, payload: bytes) -> str:
    h = hashlib.sha256()
    meta = {k: header[k] for k in ("arch", "input_shape", "num_classes", "layout")}
    h.update(repr(sorted(meta.items())).encode("utf-8"))
    h.update(payload)
    return h.hexdigest()


def save_checkpoint(model: Classifier, path) -> str:
    params = model.get_params()
    header = {
        "kind": "checkpoint",
        "arch": model.arch,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "layout": [[name, list(shape)] for name, shape in params.layout],
    }
    payload = params.to_bytes()
    header["digest"] = _checkpoint_digest(header, payload)
    write_container(path, header, payload)
    return header["digest"]


def load_checkpoint(path) -> Classifier:
    header, payload = read_container(path, _checkpoint_digest)
    model = init_model(header["arch"], header["input_shape"], header["num_classes"], seed=0)
    model.set_params(ParameterVector.from_bytes(payload, header["layout"]))
    return model
