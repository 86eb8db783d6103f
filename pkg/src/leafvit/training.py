"""Mini-batch AdamW training with cosine schedule, validation tracking, checkpoints.

Weight decay is decoupled and skipped for biases and norm gains/shifts.  One
epoch visits every training record exactly once (the final batch may be
smaller than ``batch_size``); the per-epoch shuffle is keyed by (seed, epoch),
so single-threaded runs are bitwise reproducible.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .data import DatasetManifest, SampleRecord
from .imaging import normalize01, read_image
from .model import VisionTransformer, load_checkpoint, save_checkpoint
from .seeding import rng_for


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 3e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_fraction: float = 0.05
    clip_grad_norm: float = 1.0   # global-norm clip; 0 disables
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float | None
    val_acc: float | None
    seconds: float


@dataclass
class TrainLog:
    epochs: list[EpochStats] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "seconds"])
            for e in self.epochs:
                writer.writerow([
                    e.epoch,
                    f"{e.train_loss:.6f}",
                    f"{e.train_acc:.6f}",
                    "" if e.val_loss is None else f"{e.val_loss:.6f}",
                    "" if e.val_acc is None else f"{e.val_acc:.6f}",
                    f"{e.seconds:.3f}",
                ])


class ImageStore:
    """Caches decoded float images so epochs after the first skip the codec."""

    def __init__(self):
        self._cache: dict[str, np.ndarray] = {}

    def load(self, manifest: DatasetManifest, record: SampleRecord) -> np.ndarray:
        key = str(manifest.resolve(record))
        img = self._cache.get(key)
        if img is None:
            img = normalize01(read_image(key))
            if img.shape[2] == 1:
                img = np.repeat(img, 3, axis=2)
            self._cache[key] = img
        return img

    def batch(self, manifest: DatasetManifest, records: list[SampleRecord]) -> tuple[np.ndarray, np.ndarray]:
        images = np.stack([self.load(manifest, r) for r in records])
        labels = np.array([r.class_id for r in records], dtype=np.int64)
        return images, labels


def cosine_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak rate, then cosine decay to exactly zero."""
    warmup = int(math.floor(cfg.warmup_fraction * total_steps))
    if step < warmup:
        return cfg.learning_rate * (step + 1) / warmup
    span = max(1, total_steps - 1 - warmup)
    progress = min(1.0, (step - warmup) / span)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def _no_decay(name: str) -> bool:
    return name.endswith(".bias") or name.endswith(".gamma") or name.endswith(".beta")


def clip_gradients(model: VisionTransformer, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in model.parameters():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = np.float32(max_norm / norm)
        for p in model.parameters():
            if p.grad is not None:
                p.grad *= scale
    return norm


class AdamW:
    """Adam moments with decoupled weight decay (skipped for bias/gain/shift)."""

    def __init__(self, model: VisionTransformer, cfg: TrainConfig):
        self.cfg = cfg
        self.model = model
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in model.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in model.params.items()}

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        b1c = 1.0 - cfg.beta1 ** self.t
        b2c = 1.0 - cfg.beta2 ** self.t
        for name, p in self.model.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self._m[name]
            v = self._v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            if cfg.weight_decay > 0.0 and not _no_decay(name):
                p.data -= np.float32(lr * cfg.weight_decay) * p.data
            p.data -= np.float32(lr) * (m / b1c) / (np.sqrt(v / b2c) + np.float32(cfg.adam_eps))


class EvalOutcome(NamedTuple):
    loss: float
    accuracy: float
    predictions: np.ndarray


def evaluate(
    model: VisionTransformer,
    manifest: DatasetManifest,
    store: ImageStore | None = None,
    batch_size: int = 64,
    split: str | None = None,
) -> EvalOutcome:
    """Loss, accuracy and argmax predictions over a manifest (record order)."""
    store = store or ImageStore()
    records = manifest.by_split(split) if split else list(manifest.records)
    if not records:
        raise ValueError("evaluate: manifest selection is empty")
    losses: list[tuple[float, int]] = []
    preds: list[np.ndarray] = []
    with T.no_grad():
        for lo in range(0, len(records), batch_size):
            chunk = records[lo:lo + batch_size]
            images, labels = store.batch(manifest, chunk)
            logits = model.forward(images)
            loss = T.cross_entropy_loss(logits, labels)
            losses.append((loss.item(), len(chunk)))
            preds.append(np.argmax(logits.data, axis=1))
    predictions = np.concatenate(preds)
    labels_all = np.array([r.class_id for r in records], dtype=np.int64)
    total = sum(n for _, n in losses)
    mean_loss = sum(l * n for l, n in losses) / total
    accuracy = float((predictions == labels_all).mean())
    return EvalOutcome(mean_loss, accuracy, predictions)


def train(
    model: VisionTransformer,
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest | None,
    cfg: TrainConfig,
    store: ImageStore | None = None,
    train_split: str | None = "train",
    val_split: str | None = "val",
) -> tuple[VisionTransformer, TrainLog]:
    """Train in place and return the best-validation-accuracy snapshot.

    Ties on validation accuracy prefer the later epoch.  Without a validation
    manifest the final-epoch parameters are returned.
    """
    cfg.validate()
    store = store or ImageStore()
    records = train_manifest.by_split(train_split) if train_split else list(train_manifest.records)
    if not records:
        raise ValueError("train: no training records in manifest")

    opt = AdamW(model, cfg)
    n = len(records)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs
    log = TrainLog()
    best: VisionTransformer | None = None
    best_acc = -1.0
    step = 0

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        perm = rng_for(cfg.seed, epoch).permutation(n)
        loss_sum = 0.0
        correct = 0
        for lo in range(0, n, cfg.batch_size):
            chunk = [records[i] for i in perm[lo:lo + cfg.batch_size]]
            images, labels = store.batch(train_manifest, chunk)
            model.zero_grad()
            drop_rng = rng_for(cfg.seed, epoch, step) if model.config.dropout > 0 else None
            logits = model.forward(images, train=True, rng=drop_rng)
            loss = T.cross_entropy_loss(logits, labels)
            T.backward(loss)
            if cfg.clip_grad_norm > 0:
                clip_gradients(model, cfg.clip_grad_norm)
            opt.step(cosine_lr(step, total_steps, cfg))
            step += 1
            loss_sum += loss.item() * len(chunk)
            correct += int((np.argmax(logits.data, axis=1) == labels).sum())
        train_loss = loss_sum / n
        train_acc = correct / n

        val_loss = val_acc = None
        if val_manifest is not None:
            out = evaluate(model, val_manifest, store, cfg.batch_size, split=val_split)
            val_loss, val_acc = out.loss, out.accuracy
            if val_acc >= best_acc:
                best_acc = val_acc
                best = model.copy()
        log.epochs.append(EpochStats(epoch, train_loss, train_acc, val_loss, val_acc,
                                     time.perf_counter() - t0))
    return (best if best is not None else model), log


def checkpoint_roundtrip(model: VisionTransformer, path: str | Path) -> VisionTransformer:
    """Save then reload; the result is bitwise identical to the input."""
    save_checkpoint(path, model)
    return load_checkpoint(path, expect_config=model.config)
