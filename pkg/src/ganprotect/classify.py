"""Classifier training and evaluation on plain, protected or transformed data.

The client-side order is augment -> transform -> train: every training batch
is randomly cropped and flipped in pixel space, then passed through the
(frozen) transformation, then fed to the classifier. The classifier's first
layer applies per-channel standardization with constants measured once on
the training images it sees; those constants are saved with its weights.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .imagedata import AugmentSpec, LabeledDataset, augment_batch, channel_stats
from .models import ModelHandle, NetworkSpec, build
from .transform_trainer import TrainingError, stream_seed

log = logging.getLogger(__name__)

TransformFn = Callable[[np.ndarray], np.ndarray]


def step_lr(base: float, drop_epochs, factor: float, epoch: int) -> float:
    """Base rate divided by ``factor`` once for every drop epoch already reached."""
    k = sum(1 for d in drop_epochs if epoch >= d)
    return base / factor ** k


@dataclass(frozen=True)
class ClassifyConfig:
    arch: str = "resnet18"
    epochs: int = 200
    lr: float = 0.1
    lr_drop_epochs: tuple[int, ...] = (60, 120, 160)
    lr_drop_factor: float = 5.0
    weight_decay: float = 5e-4
    momentum: float = 0.9
    batch_size: int = 128
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    base_channels: int = 64
    normalize: str = "dataset"  # dataset | fixed (augment constants) | none
    seed: int = 0

    def __post_init__(self):
        drops = tuple(int(d) for d in self.lr_drop_epochs)
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ValueError("lr_drop_epochs must be strictly increasing")
        if drops and self.epochs and drops[-1] >= self.epochs:
            raise ValueError("lr drop epochs must be < epochs")
        if self.arch not in ("resnet18", "vgg13_bn", "toy_classifier"):
            raise ValueError(f"unknown classifier arch {self.arch!r}")
        if self.normalize not in ("dataset", "fixed", "none"):
            raise ValueError(f"unknown normalize mode {self.normalize!r}")
        object.__setattr__(self, "lr_drop_epochs", drops)
        if isinstance(self.augment, dict):
            object.__setattr__(self, "augment", AugmentSpec(**self.augment))

    def lr_at(self, epoch: int) -> float:
        return step_lr(self.lr, self.lr_drop_epochs, self.lr_drop_factor, epoch)


def _apply(transform_fn: TransformFn | None, images: np.ndarray) -> np.ndarray:
    if transform_fn is None:
        return images
    return np.asarray(transform_fn(images), dtype=np.float32)


def _norm_constants(cfg: ClassifyConfig, train: LabeledDataset, transform_fn):
    c = train.image_shape[0]
    if cfg.normalize == "none":
        return (0.0,) * c, (1.0,) * c
    if cfg.normalize == "fixed":
        return tuple(cfg.augment.normalize_mean), tuple(cfg.augment.normalize_std)
    seen = train if transform_fn is None else train.with_images(_apply(transform_fn, train.images))
    mean, std = channel_stats(seen)
    return mean, tuple(max(s, 1e-6) for s in std)


def build_classifier(cfg: ClassifyConfig, train: LabeledDataset, transform_fn=None) -> ModelHandle:
    mean, std = _norm_constants(cfg, train, transform_fn)
    spec = NetworkSpec(cfg.arch, num_classes=train.num_classes, in_channels=train.image_shape[0],
                       base_channels=cfg.base_channels, image_size=train.image_shape[-1],
                       seed=stream_seed(cfg.seed, "classifier"),
                       normalize_mean=mean, normalize_std=std)
    return build(spec)


def train_classifier(train: LabeledDataset, transform_fn: TransformFn | None = None,
                     cfg: ClassifyConfig = ClassifyConfig(), test: LabeledDataset | None = None,
                     log_every_epoch: bool = False) -> tuple[ModelHandle, list[dict]]:
    """SGD-with-momentum training; returns the model and per-epoch history rows."""
    model = build_classifier(cfg, train, transform_fn)
    history: list[dict] = []
    if cfg.epochs == 0:
        return model.eval(), history
    net = model.module
    opt = torch.optim.SGD(net.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    aug_rng = np.random.default_rng(stream_seed(cfg.seed, "augment"))
    n, b = len(train), cfg.batch_size
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        net.train()
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total, correct, seen = 0.0, 0, 0
        for s in range(0, n, b):
            idx = perm[s:s + b]
            imgs = augment_batch(train.images[idx], cfg.augment, aug_rng, normalize=False)
            imgs = _apply(transform_fn, imgs)
            x = torch.from_numpy(np.ascontiguousarray(imgs, dtype=np.float32))
            y = torch.from_numpy(train.labels[idx].copy())
            logits = net(x)
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite classifier loss in epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int((logits.argmax(1) == y).sum())
            seen += len(idx)
        row = {"epoch": epoch, "lr": lr, "train_loss": total / seen, "train_acc": correct / seen}
        if test is not None:
            row["test_acc"] = evaluate_accuracy(model, test, transform_fn)
        history.append(row)
        if log_every_epoch:
            log.info("epoch %d %s", epoch, row)
    return model.eval(), history


def predict(model: ModelHandle, images: np.ndarray, transform_fn: TransformFn | None = None,
            batch: int = 256) -> np.ndarray:
    model.eval()
    preds = []
    with torch.no_grad():
        for s in range(0, len(images), batch):
            x = _apply(transform_fn, np.asarray(images[s:s + batch], dtype=np.float32))
            preds.append(model(torch.from_numpy(np.array(x, dtype=np.float32))).argmax(1).numpy())
    return np.concatenate(preds) if preds else np.empty(0, dtype=np.int64)


def evaluate_accuracy(model: ModelHandle, test: LabeledDataset,
                      transform_fn: TransformFn | None = None) -> float:
    """Top-1 accuracy; test images get the transform but no augmentation."""
    if len(test) == 0:
        raise ValueError("empty test set")
    return float(np.mean(predict(model, test.images, transform_fn) == test.labels))


def full_schedule(cfg: ClassifyConfig) -> list[float]:
    return [cfg.lr_at(e) for e in range(cfg.epochs)]


def chance_level(num_classes: int) -> float:
    return 1.0 / num_classes if num_classes else math.nan
