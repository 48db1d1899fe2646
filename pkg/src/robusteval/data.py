"""Datasets (CIFAR binary files, synthetic template classes) and joint
training of the backbone and all probes."""

from __future__ import annotations

import glob
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from robusteval import tensor as T
from robusteval.errors import ConfigError, TrainingError
from robusteval.model import DefenseModel, RandomnessPolicy, multires_stack, forward_probes
from robusteval.tensor import FormatError, NumericError

logger = logging.getLogger(__name__)

CIFAR_PIXELS = 3 * 32 * 32


@dataclass
class Dataset:
    images: np.ndarray  # (N, d, d, 3) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[-1] != 3 or self.images.shape[1] != self.images.shape[2]:
            raise ConfigError(f"images must be (N, d, d, 3), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConfigError("image/label count mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError("label outside [0, C)")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ConfigError("pixel values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def d(self) -> int:
        return self.images.shape[1]

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.num_classes, self.split)

    def select_classes(self, classes) -> "Dataset":
        """Keep only ``classes``, relabelled 0..len(classes)-1 in the given order."""
        classes = list(classes)
        keep = np.isin(self.labels, classes)
        remap = {c: i for i, c in enumerate(classes)}
        labels = np.array([remap[c] for c in self.labels[keep]], dtype=np.int64)
        return Dataset(self.images[keep], labels, len(classes), self.split)


def _cifar_files(path: str, variant: int, split: str) -> list[str]:
    if os.path.isfile(path):
        return [path]
    if variant == 10:
        pattern = "data_batch_*.bin" if split == "train" else "test_batch.bin"
    else:
        pattern = "train.bin" if split == "train" else "test.bin"
    files = sorted(glob.glob(os.path.join(path, pattern)))
    if not files:
        files = sorted(glob.glob(os.path.join(path, "*", pattern)))
    if not files:
        raise FileNotFoundError(f"no CIFAR-{variant} {split} files matching {pattern} under {path}")
    return files


def load_cifar(path, variant: int = 10, split: str = "train") -> Dataset:
    """Read CIFAR binary records.

    CIFAR-10 records are ``<label byte><3072 pixel bytes>``; CIFAR-100 records
    are ``<coarse byte><fine byte><3072 pixel bytes>`` and the fine label is
    used. Pixels are stored channel-major (1024 R, 1024 G, 1024 B) and come out
    as (32, 32, 3) floats in [0, 1].
    """
    if variant not in (10, 100):
        raise ConfigError(f"CIFAR variant must be 10 or 100, got {variant}")
    head = 1 if variant == 10 else 2
    record = head + CIFAR_PIXELS
    images, labels = [], []
    for fname in _cifar_files(os.fspath(path), variant, split):
        raw = np.fromfile(fname, dtype=np.uint8)
        if raw.size % record:
            whole = raw.size // record
            raise FormatError(f"{fname}: truncated record {whole}", whole * record)
        recs = raw.reshape(-1, record)
        lab = recs[:, head - 1].astype(np.int64)
        bad = np.flatnonzero(lab >= variant)
        if bad.size:
            raise FormatError(f"{fname}: label {lab[bad[0]]} out of range in record {bad[0]}", int(bad[0]) * record + head - 1)
        images.append(recs[:, head:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
        labels.append(lab)
    imgs = np.concatenate(images).astype(np.float32) / np.float32(255.0)
    return Dataset(imgs, np.concatenate(labels), variant, split)


def synth_dataset(
    classes: int,
    per_class: int,
    d: int = 32,
    seed: int = 0,
    noise_std: float = 0.1,
    amplitude: float = 0.5,
    template_res: int = 4,
    split: str = "train",
) -> Dataset:
    """Class ``c`` is a fixed random template plus per-sample Gaussian pixel
    noise, clipped to [0, 1].

    Templates are ``0.5 + amplitude * U(-1, 1)`` on a ``template_res`` grid,
    bilinearly upscaled to d x d so they survive the defense's downscaling.
    Templates depend only on ``seed``; use ``split`` to draw a disjoint noise
    stream for a test set of the same classes.
    """
    if classes < 2:
        raise ConfigError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    low = 0.5 + amplitude * rng.uniform(-1.0, 1.0, size=(classes, 3, template_res, template_res))
    templates = T.resize_bilinear(T.tensor(low, dtype=np.float64), d).data.transpose(0, 2, 3, 1)
    noise_rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    labels = np.repeat(np.arange(classes), per_class)
    noise = noise_rng.standard_normal((len(labels), d, d, 3)) * noise_std
    images = np.clip(templates[labels] + noise, 0.0, 1.0)
    return Dataset(images.astype(np.float32), labels, classes, split)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.05
    optimizer: str = "momentum"  # or "sgd"
    momentum: float = 0.9
    lr_decay: float = 0.5
    decay_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.decay_every < 1:
            raise ConfigError("training hyperparameters must be positive")
        if self.optimizer not in ("sgd", "momentum"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    probe_accuracy: list[float] = field(default_factory=list)


def joint_loss(model: DefenseModel, x: np.ndarray, y: np.ndarray, policy: RandomnessPolicy):
    """Sum over probes of the batch-mean cross-entropy; returns (loss, Z)."""
    xm = multires_stack(T.tensor(x.astype(model.dtype, copy=False)), model.preprocess, policy)
    Z = forward_probes(model, xm)
    total = None
    for r in range(Z.shape[1]):
        ce = T.mean(T.cross_entropy(T.take(Z, r, axis=1), y))
        total = ce if total is None else T.add(total, ce)
    return total, Z


def train(model: DefenseModel, dataset: Dataset, cfg: TrainConfig):
    """Minimize the joint probe loss in place with fresh preprocessing noise
    every pass. Returns ``(model, metrics)``."""
    if dataset.num_classes != model.num_classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, model {model.num_classes}")
    rng = np.random.default_rng(cfg.seed)
    policy = RandomnessPolicy.fresh(int(rng.integers(2**63)))
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    momentum = cfg.momentum if cfg.optimizer == "momentum" else 0.0
    metrics: list[EpochMetrics] = []
    n = len(dataset)
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_decay ** (epoch // cfg.decay_every)
        order = rng.permutation(n)
        losses, correct = [], np.zeros(len(model.probe_layers))
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            for p in params:
                p.zero_grad()
            try:
                loss, Z = joint_loss(model, dataset.images[idx], dataset.labels[idx], policy)
                loss.backward()
            except NumericError as exc:
                raise TrainingError(f"diverged in epoch {epoch + 1}: {exc}") from exc
            if not np.isfinite(loss.item()):
                raise TrainingError(f"loss became non-finite in epoch {epoch + 1}")
            for p, v in zip(params, velocity):
                v *= momentum
                v += p.grad
                p.data -= (lr * v).astype(p.dtype)
            losses.append(loss.item() * len(idx))
            correct += (Z.data.argmax(axis=2) == dataset.labels[idx][:, None]).sum(axis=0)
        m = EpochMetrics(epoch + 1, float(np.sum(losses) / n), list(correct / n))
        logger.info("epoch %d loss %.4f acc %s", m.epoch, m.loss, np.round(m.probe_accuracy, 3))
        metrics.append(m)
    for p in params:
        p.zero_grad()
    return model, metrics


def accuracy(model: DefenseModel, dataset: Dataset, policy: RandomnessPolicy, batch: int = 256) -> float:
    """Fraction of ``dataset`` the aggregated model classifies correctly."""
    hits = 0
    for start in range(0, len(dataset), batch):
        x = dataset.images[start:start + batch].astype(model.dtype, copy=False)
        z = model.logits(T.tensor(x), policy).data
        hits += int((z.argmax(axis=1) == dataset.labels[start:start + batch]).sum())
    return hits / max(len(dataset), 1)


def metrics_csv(metrics: list[EpochMetrics]) -> str:
    if not metrics:
        return "epoch,loss\n"
    k = len(metrics[0].probe_accuracy)
    lines = ["epoch,loss," + ",".join(f"acc_probe_{i}" for i in range(k))]
    for m in metrics:
        lines.append(f"{m.epoch},{m.loss:.6f}," + ",".join(f"{a:.6f}" for a in m.probe_accuracy))
    return "\n".join(lines) + "\n"


SYNTH_KEYS = {"classes": int, "per_class": int, "d": int, "seed": int, "noise_std": float,
              "amplitude": float, "template_res": int}


def load_data(source: str, split: str = "test", variant: int = 10, classes=None) -> Dataset:
    """Dataset from a source string: a CIFAR directory/file, or
    ``synth:key=value,...`` with keys of :func:`synth_dataset`
    (e.g. ``synth:classes=10,per_class=30,d=16,seed=1``).
    ``classes`` keeps and relabels a subset, e.g. ``[3, 5]`` for 2-class CIFAR."""
    source = str(source).strip()
    if source.startswith("synth"):
        _, _, rest = source.partition(":")
        kwargs = {}
        for item in filter(None, (p.strip() for p in rest.split(","))):
            key, sep, value = item.partition("=")
            key = key.strip()
            if not sep or key not in SYNTH_KEYS:
                raise ConfigError(f"bad synthetic data option {item!r}; keys: {sorted(SYNTH_KEYS)}")
            kwargs[key] = SYNTH_KEYS[key](value.strip())
        kwargs.setdefault("classes", 10)
        kwargs.setdefault("per_class", 100)
        ds = synth_dataset(split=split, **kwargs)
    else:
        ds = load_cifar(source, variant, split)
    if classes:
        ds = ds.select_classes([int(c) for c in classes])
    return ds
