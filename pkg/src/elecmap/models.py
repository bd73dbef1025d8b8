"""Convolutional predictors for the access, extent and customer-type objectives.

Every task uses the same pattern: a stride-2 convolution that brings a
500x500 tile down to backbone resolution, the eight convolutional layers of
VGG11 (optionally slimmed by a width multiplier for desk-scale runs), adaptive
spatial pooling and a three-layer dense head.  Classification heads emit raw
scores trained with class-weighted cross-entropy; regression heads predict
``log1p(count)`` trained with mean squared error.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .evaluation import r2_score
from .geogrid import read_tile_png
from .labels import ACCESS_CLASSES, PCT_CLASSES, TileLabels

logger = logging.getLogger(__name__)

VGG11_LAYOUT = (64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M")
LR_RANGE = (1e-8, 1e-4)
BATCH_RANGE = (16, 32)
EPOCH_RANGE = (50, 100)


class ConfigError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


# --- tasks ----------------------------------------------------------------

@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    kind: str  # "classification" | "regression"
    arity: int
    target: Callable[[TileLabels], float | int]
    eligible: Callable[[TileLabels], bool]
    class_names: tuple[str, ...] = ()

    @property
    def is_classification(self) -> bool:
        return self.kind == "classification"


def _has_structures(lab: TileLabels) -> bool:
    return lab.n_total >= 1


def _has_electrified(lab: TileLabels) -> bool:
    return lab.n_elec >= 1


def _any(lab: TileLabels) -> bool:
    return True


REGRESSION_ELIGIBILITY = {"all": _any, "n_total": _has_structures, "n_elec": _has_electrified}


def make_tasks(regression_eligibility: str = "n_total") -> dict[str, TaskSpec]:
    """The five prediction tasks; ``regression_eligibility`` picks which tiles the count heads see."""
    try:
        reg_ok = REGRESSION_ELIGIBILITY[regression_eligibility]
    except KeyError:
        raise ConfigError(f"unknown regression eligibility {regression_eligibility!r}") from None
    return {
        "access_3class": TaskSpec(
            "access_3class", "classification", 3,
            lambda lab: ACCESS_CLASSES.index(lab.access_class), _any, ACCESS_CLASSES,
        ),
        "pct_elec_binary": TaskSpec(
            "pct_elec_binary", "classification", 2,
            lambda lab: PCT_CLASSES.index(lab.pct_class_B), _has_electrified, PCT_CLASSES,
        ),
        "count_elec_reg": TaskSpec("count_elec_reg", "regression", 1, lambda lab: lab.n_elec, reg_ok),
        "pct_res_binary": TaskSpec(
            "pct_res_binary", "classification", 2,
            lambda lab: PCT_CLASSES.index(lab.pct_class_C), _has_electrified, PCT_CLASSES,
        ),
        "count_res_reg": TaskSpec("count_res_reg", "regression", 1, lambda lab: lab.n_elec_res, reg_ok),
    }


TASKS = make_tasks()


# --- configuration ----------------------------------------------------------

@dataclass
class ModelConfig:
    backbone: str = "vgg11"
    width: float = 1.0
    batch_norm: bool = False
    pretrained: bool = False
    input_size: int = 500
    adapter_stride: int = 2
    head_pool: int = 7
    dropout: float = 0.5
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = 16
    epochs: int = 50
    patience: int | None = None
    class_weighting: bool = True
    majority_downsample: float | None = None
    augment: bool = True
    override_ranges: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.backbone != "vgg11":
            raise ConfigError(f"unsupported backbone {self.backbone!r}")
        if self.width <= 0 or self.input_size < 32 or self.adapter_stride < 1:
            raise ConfigError("width, input_size and adapter_stride must be positive")
        if self.pretrained and (self.width != 1.0):
            raise ConfigError("pretrained weights need the full-width backbone (width=1)")
        if not self.override_ranges:
            checks = (
                ("learning_rate", self.learning_rate, LR_RANGE),
                ("batch_size", self.batch_size, BATCH_RANGE),
                ("epochs", self.epochs, EPOCH_RANGE),
            )
            for name, v, (lo, hi) in checks:
                if not lo <= v <= hi:
                    raise ConfigError(
                        f"{name}={v} outside [{lo}, {hi}]; set override_ranges to use it anyway"
                    )
        if self.learning_rate < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("learning_rate must be >= 0, batch_size and epochs >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))


# --- network ----------------------------------------------------------------

def _ch(v: int, width: float) -> int:
    return max(4, int(round(v * width)))


class ElectrificationNet(nn.Module):
    """Input adapter + VGG11 convolutional stack + pooled dense head."""

    def __init__(self, arity: int, config: ModelConfig):
        super().__init__()
        self.arity = arity
        self.input_size = config.input_size
        self.register_buffer("pixel_mean", torch.full((1, 3, 1, 1), 127.5))
        self.register_buffer("pixel_std", torch.full((1, 3, 1, 1), 64.0))
        self.adapter = nn.Conv2d(3, 3, kernel_size=3, stride=config.adapter_stride, padding=1)
        layers: list[nn.Module] = []
        c = 3
        for v in VGG11_LAYOUT:
            if v == "M":
                layers.append(nn.MaxPool2d(2, 2))
                continue
            out = _ch(v, config.width)
            layers.append(nn.Conv2d(c, out, kernel_size=3, padding=1))
            if config.batch_norm:
                layers.append(nn.BatchNorm2d(out))
            layers.append(nn.ReLU(inplace=True))
            c = out
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(config.head_pool)
        hidden = _ch(4096, config.width)
        self.classifier = nn.Sequential(
            nn.Linear(c * config.head_pool ** 2, hidden),
            nn.ReLU(inplace=True),
            nn.Dropout(config.dropout),
            nn.Linear(hidden, hidden),
            nn.ReLU(inplace=True),
            nn.Dropout(config.dropout),
            nn.Linear(hidden, arity),
        )

    def set_normalization(self, mean: Sequence[float], std: Sequence[float]) -> None:
        self.pixel_mean.copy_(torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.pixel_std.copy_(torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != self.input_size or x.shape[3] != self.input_size:
            raise ShapeError(
                f"expected input of shape (B, 3, {self.input_size}, {self.input_size}), got {tuple(x.shape)}"
            )
        x = (x.float() - self.pixel_mean) / self.pixel_std
        x = self.features(self.adapter(x))
        return self.classifier(torch.flatten(self.pool(x), 1))


def _load_pretrained(net: ElectrificationNet, config: ModelConfig) -> None:
    from torchvision.models import VGG11_BN_Weights, VGG11_Weights, vgg11, vgg11_bn

    try:
        ref = vgg11_bn(weights=VGG11_BN_Weights.IMAGENET1K_V1) if config.batch_norm \
            else vgg11(weights=VGG11_Weights.IMAGENET1K_V1)
    except Exception as exc:  # network or cache failure
        raise ConfigError(f"could not load pretrained VGG11 weights: {exc}") from exc
    net.features.load_state_dict(ref.features.state_dict())
    if config.head_pool == 7:
        for i in (0, 3):
            net.classifier[i].load_state_dict(ref.classifier[i].state_dict())


def build_model(task: TaskSpec, config: ModelConfig) -> ElectrificationNet:
    """Untrained network for a task; every layer trainable."""
    torch.manual_seed(config.seed)
    net = ElectrificationNet(task.arity, config)
    if config.pretrained:
        _load_pretrained(net, config)
    for p in net.parameters():
        p.requires_grad_(True)
    return net.to(memory_format=torch.channels_last)


def to_tensor(tiles: np.ndarray) -> torch.Tensor:
    """(B, H, W, 3) uint8 array to a channels-last (B, 3, H, W) uint8 tensor view."""
    arr = np.asarray(tiles)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeError(f"expected tiles of shape (B, H, W, 3), got {arr.shape}")
    if not arr.flags.writeable:  # read-only memmap slices
        arr = arr.copy()
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2)


# --- data ---------------------------------------------------------------------

@dataclass
class TileSet:
    """Images (N, H, W, 3) uint8 (possibly a memmap) with per-tile targets."""

    images: np.ndarray
    targets: np.ndarray
    keys: list = field(default_factory=list)

    def __len__(self):
        return len(self.targets)


def load_tile_stack(paths: Sequence[str | Path], cache: str | Path | None = None, size: int = 500) -> np.ndarray:
    """Decode PNG tiles into one uint8 array, optionally backed by a .npy cache file."""
    shape = (len(paths), size, size, 3)
    if cache is not None:
        cache = Path(cache)
        if cache.exists():
            arr = np.load(cache, mmap_mode="r")
            if arr.shape == shape:
                return arr
        arr = np.lib.format.open_memmap(cache, mode="w+", dtype=np.uint8, shape=shape)
    else:
        arr = np.empty(shape, np.uint8)
    for i, p in enumerate(paths):
        img = read_tile_png(p)
        if img.shape != shape[1:]:
            raise ShapeError(f"tile {p} has shape {img.shape}, expected {shape[1:]}")
        arr[i] = img
    if cache is not None:
        arr.flush()
        del arr
        return np.load(cache, mmap_mode="r")
    return arr


def channel_stats(images: np.ndarray, chunk: int = 64) -> tuple[list[float], list[float]]:
    """Per-channel mean and std over all pixels, accumulated in float64."""
    n = 0
    s = np.zeros(3)
    ss = np.zeros(3)
    for i in range(0, len(images), chunk):
        block = np.asarray(images[i:i + chunk], dtype=np.float64).reshape(-1, 3)
        n += block.shape[0]
        s += block.sum(0)
        ss += (block ** 2).sum(0)
    if n == 0:
        return [127.5] * 3, [64.0] * 3
    mean = s / n
    std = np.sqrt(np.maximum(ss / n - mean ** 2, 1e-6))
    return mean.tolist(), std.tolist()


def _augment(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = np.empty_like(batch)
    for i, img in enumerate(batch):
        k = int(rng.integers(4))
        img = np.rot90(img, k, axes=(0, 1))
        if rng.random() < 0.5:
            img = img[:, ::-1]
        out[i] = img
    return out


# --- training -------------------------------------------------------------------

@dataclass
class TrainedModel:
    net: ElectrificationNet
    task: TaskSpec
    config: ModelConfig
    history: list[dict]
    best_epoch: int
    normalization: dict

    def save(self, path: str | Path) -> tuple[Path, Path]:
        """Write ``<path>.pt`` (weights) and ``<path>.json`` (config, stats, history)."""
        path = Path(path)
        weights = path.with_suffix(".pt")
        sidecar = path.with_suffix(".json")
        torch.save(self.net.state_dict(), weights)
        meta = {
            "task_id": self.task.task_id,
            "config": self.config.to_dict(),
            "normalization": self.normalization,
            "best_epoch": self.best_epoch,
            "history": self.history,
            "pretrained_weights": self.config.pretrained,
        }
        sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True))
        return weights, sidecar

    @classmethod
    def load(cls, path: str | Path, tasks: Mapping[str, TaskSpec] = TASKS) -> "TrainedModel":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        config = ModelConfig.from_dict(meta["config"])
        task = tasks[meta["task_id"]]
        net = ElectrificationNet(task.arity, config)
        net.load_state_dict(torch.load(path.with_suffix(".pt"), weights_only=True))
        net = net.to(memory_format=torch.channels_last).eval()
        return cls(net, task, config, meta["history"], meta["best_epoch"], meta["normalization"])


def class_weights(targets: np.ndarray, arity: int) -> torch.Tensor:
    """Inverse-frequency weights, N / (K * n_c); absent classes get weight 0."""
    counts = np.bincount(targets.astype(int), minlength=arity).astype(float)
    present = counts > 0
    w = np.zeros(arity)
    w[present] = counts.sum() / (present.sum() * counts[present])
    return torch.tensor(w, dtype=torch.float32)


def _downsample_majority(targets: np.ndarray, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Indices keeping at most ``ratio`` x the runner-up class count of the majority class."""
    counts = np.bincount(targets.astype(int))
    if (counts > 0).sum() < 2:
        return np.arange(len(targets))
    order = np.argsort(counts)[::-1]
    cap = int(math.ceil(ratio * counts[order[1]]))
    major = np.flatnonzero(targets == order[0])
    keep = np.sort(rng.choice(major, size=min(cap, len(major)), replace=False))
    return np.sort(np.concatenate([np.flatnonzero(targets != order[0]), keep]))


def _loss(task: TaskSpec, out: torch.Tensor, y: torch.Tensor, weights: torch.Tensor | None) -> torch.Tensor:
    if task.is_classification:
        return F.cross_entropy(out, y, weight=weights)
    return F.mse_loss(out.squeeze(1), torch.log1p(y))


def _metric(task: TaskSpec, preds: np.ndarray, targets: np.ndarray) -> float:
    if task.is_classification:
        return float((preds == targets).mean()) if len(targets) else float("nan")
    r2 = r2_score(preds.tolist(), targets.tolist())
    return float("nan") if r2 is None else r2


def _forward_batches(net: nn.Module, images: np.ndarray, batch_size: int) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(net(to_tensor(images[i:i + batch_size])))
    return torch.cat(outs) if outs else torch.empty(0, net.arity)


def _decode(task: TaskSpec, raw: torch.Tensor) -> np.ndarray:
    if task.is_classification:
        return raw.argmax(1).numpy()
    return np.clip(torch.expm1(raw.squeeze(1).double()).numpy(), 0.0, None)


def train(
    net: ElectrificationNet,
    train_set: TileSet,
    val_set: TileSet,
    config: ModelConfig,
    task: TaskSpec,
    log_every: int = 0,
) -> TrainedModel:
    """Fit ``net`` and return the weights of the epoch with the best validation metric.

    Validation metric is accuracy for classification and R² on counts for
    regression; ties keep the earlier epoch.  Shuffling, augmentation and
    dropout are all driven by ``config.seed``.
    """
    if len(train_set) == 0:
        raise TrainingError("empty training set")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    y_train = np.asarray(train_set.targets)
    idx_pool = np.arange(len(y_train))
    if task.is_classification and config.majority_downsample:
        idx_pool = _downsample_majority(y_train, config.majority_downsample, rng)
    mean, std = channel_stats(train_set.images)
    net.set_normalization(mean, std)
    weights = class_weights(y_train[idx_pool], task.arity) if (task.is_classification and config.class_weighting) else None
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)

    history: list[dict] = []
    best_state = copy.deepcopy(net.state_dict())
    best_metric, best_epoch = -math.inf, 0
    since_best = 0
    for epoch in range(1, config.epochs + 1):
        net.train()
        order = rng.permutation(idx_pool)
        total_loss, seen, correct = 0.0, 0, 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            sel = order[start:start + config.batch_size]
            batch = np.asarray(train_set.images[sel])
            if config.augment:
                batch = _augment(batch, rng)
            y_np = y_train[sel]
            y = torch.as_tensor(y_np, dtype=torch.long if task.is_classification else torch.float32)
            out = net(to_tensor(batch))
            loss = _loss(task, out, y, weights)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss.item()} at epoch {epoch}, batch {b} "
                    f"(learning_rate={config.learning_rate}, batch_size={config.batch_size})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(y_np)
            seen += len(y_np)
            if task.is_classification:
                correct += int((out.argmax(1) == y).sum())
        entry = {"epoch": epoch, "train_loss": total_loss / seen}
        if task.is_classification:
            entry["train_accuracy"] = correct / seen
        net.eval()
        if len(val_set):
            raw = _forward_batches(net, val_set.images, config.batch_size)
            yv = torch.as_tensor(
                np.asarray(val_set.targets), dtype=torch.long if task.is_classification else torch.float32
            )
            entry["val_loss"] = float(_loss(task, raw, yv, weights))
            entry["val_metric"] = _metric(task, _decode(task, raw), np.asarray(val_set.targets))
            metric = entry["val_metric"]
        else:
            metric = -entry["train_loss"]
        history.append(entry)
        if log_every and epoch % log_every == 0:
            logger.info("%s epoch %d: %s", task.task_id, epoch, entry)
        if metric > best_metric:
            best_metric, best_epoch = metric, epoch
            best_state = copy.deepcopy(net.state_dict())
            since_best = 0
        else:
            since_best += 1
            if config.patience is not None and since_best >= config.patience:
                break
    net.load_state_dict(best_state)
    net.eval()
    return TrainedModel(net, task, config, history, best_epoch, {"mean": mean, "std": std})


# --- inference --------------------------------------------------------------

@dataclass
class Predictions:
    values: np.ndarray  # class index (classification) or count estimate (regression)
    scores: np.ndarray | None = None  # normalised class probabilities

    def labels(self, class_names: Sequence[str]) -> list[str]:
        return [class_names[int(i)] for i in self.values]


def predict(model: TrainedModel, tiles: np.ndarray) -> Predictions:
    """Per-tile predictions, one tile per forward pass so results never depend on batching.

    Classification yields the argmax class and softmax probabilities
    (float64, rows sum to 1); regression yields ``expm1`` of the head output
    clamped at zero.
    """
    net = model.net.eval()
    raws = []
    with torch.no_grad():
        for i in range(len(tiles)):
            raws.append(net(to_tensor(np.asarray(tiles[i:i + 1]))))
    raw = torch.cat(raws) if raws else torch.empty(0, model.task.arity)
    return scores_to_predictions(model.task, raw)


def scores_to_predictions(task: TaskSpec, raw: torch.Tensor) -> Predictions:
    if task.is_classification:
        logits = raw.double()
        probs = torch.softmax(logits, dim=1).numpy()
        probs = probs / probs.sum(axis=1, keepdims=True)
        return Predictions(logits.argmax(1).numpy(), probs)
    return Predictions(_decode(task, raw))
