"""Datasets: in-memory labeled tensors, the synthetic blob generator and image loaders.

Every loader returns pixels in [0, 1]; per-channel normalization happens inside the
networks so that trigger arithmetic can stay in pixel space.
"""

from __future__ import annotations

import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    num_classes: int
    input_shape: tuple[int, int, int]
    split_sizes: dict = field(default_factory=dict)
    mean: tuple[float, ...] = ()
    std: tuple[float, ...] = ()

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigurationError(f"bad input_shape {self.input_shape}")
        for split, size in self.split_sizes.items():
            if size < 1:
                raise ConfigurationError(f"split {split!r} is empty")
        channels = self.input_shape[0]
        if len(self.mean) != channels or len(self.std) != channels:
            raise ConfigurationError("normalization vectors must have one entry per channel")
        if min(self.std) <= 0:
            raise ConfigurationError("normalization std must be positive")

    def to_dict(self):
        return {
            "name": self.name,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "split_sizes": dict(self.split_sizes),
            "mean": list(self.mean),
            "std": list(self.std),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"],
            num_classes=int(d["num_classes"]),
            input_shape=tuple(int(v) for v in d["input_shape"]),
            split_sizes=dict(d.get("split_sizes", {})),
            mean=tuple(float(v) for v in d["mean"]),
            std=tuple(float(v) for v in d["std"]),
        )


@dataclass
class LabeledData:
    """Inputs ``x`` (N, C, H, W) in [0, 1] with integer labels ``y`` (N,)."""

    x: torch.Tensor
    y: torch.Tensor

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise ConfigurationError(
                f"{self.x.shape[0]} inputs but {self.y.shape[0]} labels"
            )

    def __len__(self):
        return int(self.y.shape[0])

    def subset(self, indices) -> "LabeledData":
        idx = torch.as_tensor(np.asarray(indices, dtype=np.int64))
        return LabeledData(self.x[idx], self.y[idx])

    def without_class(self, label: int) -> "LabeledData":
        keep = torch.nonzero(self.y != label).flatten()
        return LabeledData(self.x[keep], self.y[keep])

    def of_class(self, label: int) -> "LabeledData":
        keep = torch.nonzero(self.y == label).flatten()
        return LabeledData(self.x[keep], self.y[keep])

    def to(self, dtype) -> "LabeledData":
        return LabeledData(self.x.to(dtype), self.y)


@dataclass
class Splits:
    spec: DatasetSpec
    train: LabeledData
    val: LabeledData
    test: LabeledData


def _channel_stats(x: torch.Tensor):
    mean = x.mean(dim=(0, 2, 3))
    std = x.std(dim=(0, 2, 3)).clamp_min(1e-3)
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)


def make_blobs(n=200, num_classes=2, shape=(1, 4, 4), spread=0.08, seed=0):
    """Gaussian class blobs squeezed into [0, 1], shaped like tiny images."""
    rng = np.random.default_rng(seed)
    dim = int(np.prod(shape))
    centers = rng.uniform(0.2, 0.8, size=(num_classes, dim))
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    points = centers[labels] + rng.normal(0.0, spread, size=(n, dim))
    points = np.clip(points, 0.0, 1.0)
    x = torch.tensor(points.reshape(n, *shape), dtype=torch.get_default_dtype())
    return LabeledData(x, torch.tensor(labels, dtype=torch.long))


def _remap_classes(images: np.ndarray, labels: np.ndarray, classes: Sequence[int] | None):
    if classes is None:
        return images, labels
    classes = list(classes)
    if len(set(classes)) != len(classes):
        raise ConfigurationError(f"duplicate classes in {classes}")
    keep = np.isin(labels, classes)
    lookup = {c: i for i, c in enumerate(classes)}
    return images[keep], np.array([lookup[v] for v in labels[keep]], dtype=np.int64)


def load_digits_images(classes=None, image_size=16):
    """scikit-learn's bundled 8x8 handwritten digits, resized to ``image_size``."""
    from sklearn.datasets import load_digits

    bunch = load_digits()
    images = bunch.images.astype(np.float64) / 16.0
    images, labels = _remap_classes(images, bunch.target.astype(np.int64), classes)
    x = torch.tensor(images, dtype=torch.float64).unsqueeze(1)
    if image_size != 8:
        x = F.interpolate(x, size=(image_size, image_size), mode="bilinear", align_corners=False)
    x = x.clamp(0.0, 1.0).to(torch.get_default_dtype())
    return LabeledData(x, torch.tensor(labels, dtype=torch.long))


def load_cifar10(root, classes=None, train=True):
    """Read the CIFAR-10 python pickles (``data_batch_*`` / ``test_batch``) from ``root``."""
    root = Path(root)
    names = [f"data_batch_{i}" for i in range(1, 6)] if train else ["test_batch"]
    images, labels = [], []
    for name in names:
        path = root / name
        if not path.exists():
            raise ConfigurationError(f"CIFAR-10 batch not found: {path}")
        with open(path, "rb") as fh:
            batch = pickle.load(fh, encoding="bytes")
        images.append(np.asarray(batch[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
        labels.append(np.asarray(batch[b"labels"], dtype=np.int64))
    arr, lab = _remap_classes(np.concatenate(images), np.concatenate(labels), classes)
    x = torch.tensor(arr.astype(np.float64) / 255.0, dtype=torch.get_default_dtype())
    return LabeledData(x, torch.tensor(lab, dtype=torch.long))


def split_data(data: LabeledData, fractions: Sequence[float], seed: int):
    """Shuffle once under ``seed`` and cut into consecutive pieces of the given fractions."""
    n = len(data)
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.round(np.cumsum([0.0, *fractions]) * n).astype(int)
    bounds[-1] = min(bounds[-1], n)
    return [data.subset(perm[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]


def load_dataset(name, seed=0, classes=None, val_fraction=0.15, test_fraction=0.2,
                 root=None, max_train=None, **kwargs) -> Splits:
    """Build train/val/test splits and the matching :class:`DatasetSpec`.

    ``name`` is one of ``blobs``, ``digits`` or ``cifar10`` (needs ``root``).
    """
    if name == "blobs":
        full = make_blobs(seed=seed, **kwargs)
        if classes is not None:
            raise ConfigurationError("blobs does not support class selection; use num_classes")
    elif name == "digits":
        full = load_digits_images(classes=classes, **kwargs)
    elif name == "cifar10":
        if root is None:
            raise ConfigurationError("cifar10 needs a local 'root' directory with the python batches")
        train_pool = load_cifar10(root, classes, train=True)
        test = load_cifar10(root, classes, train=False)
        full = train_pool
        test_fraction = 0.0
    else:
        raise ConfigurationError(f"unknown dataset {name!r}")

    train_fraction = 1.0 - val_fraction - test_fraction
    if train_fraction <= 0:
        raise ConfigurationError("val_fraction + test_fraction must be < 1")
    if name == "cifar10":
        train, val = split_data(full, [train_fraction, val_fraction], seed)
    else:
        train, val, test = split_data(full, [train_fraction, val_fraction, test_fraction], seed)
    if max_train is not None and len(train) > max_train:
        train = train.subset(np.arange(max_train))

    num_classes = int(full.y.max()) + 1
    mean, std = _channel_stats(train.x)
    spec = DatasetSpec(
        name=name,
        num_classes=num_classes,
        input_shape=tuple(int(v) for v in full.x.shape[1:]),
        split_sizes={"train": len(train), "val": len(val), "test": len(test)},
        mean=mean,
        std=std,
    )
    return Splits(spec, train, val, test)
