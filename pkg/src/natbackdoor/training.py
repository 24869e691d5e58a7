"""Plain supervised training, evaluation and classifier checkpoints."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DatasetSpec, LabeledData
from .errors import ArtifactFormatError, ConfigurationError, NumericError
from .zoo import ModelSpec, build_model

log = logging.getLogger(__name__)

METADATA_KEY = "__metadata__"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    loss: str = "cross-entropy"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be nonnegative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.loss != "cross-entropy":
            raise ConfigurationError(f"unsupported loss {self.loss!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class Classifier:
    spec: ModelSpec
    net: nn.Module
    dataset: DatasetSpec
    seed: int = 0
    history: list = field(default_factory=list)

    @property
    def num_classes(self):
        return self.spec.num_classes


def init_classifier(spec: ModelSpec, dataset: DatasetSpec, seed: int) -> Classifier:
    if spec.num_classes != dataset.num_classes:
        raise ConfigurationError(
            f"model outputs {spec.num_classes} classes but dataset has {dataset.num_classes}"
        )
    torch.manual_seed(seed)
    net = build_model(spec, dataset.input_shape, dataset.mean, dataset.std)
    return Classifier(spec=spec, net=net, dataset=dataset, seed=seed)


def make_optimizer(net: nn.Module, config: TrainConfig):
    return torch.optim.SGD(net.parameters(), lr=config.learning_rate,
                           momentum=config.momentum, weight_decay=config.weight_decay)


class BatchSampler:
    """Reshuffles indices every pass under a private generator; yields index batches forever."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.batch_size = batch_size
        self.generator = torch.Generator().manual_seed(seed)
        self._queue = []

    @property
    def batches_per_epoch(self):
        return math.ceil(self.n / self.batch_size)

    def epoch(self):
        perm = torch.randperm(self.n, generator=self.generator)
        return [perm[i:i + self.batch_size] for i in range(0, self.n, self.batch_size)]

    def next(self):
        if not self._queue:
            self._queue = self.epoch()
        return self._queue.pop(0)


def check_data(model: Classifier, data: LabeledData):
    expected = tuple(model.dataset.input_shape)
    if tuple(data.x.shape[1:]) != expected:
        raise ConfigurationError(f"inputs have shape {tuple(data.x.shape[1:])}, model expects {expected}")
    if len(data) and (int(data.y.min()) < 0 or int(data.y.max()) >= model.num_classes):
        raise ConfigurationError(f"labels must lie in [0, {model.num_classes})")


def sgd_step(model: Classifier, optimizer, x, y, loss_fn=None) -> float:
    """One optimizer step on a batch; ``loss_fn(logits, y)`` defaults to cross-entropy."""
    model.net.train()
    optimizer.zero_grad()
    logits = model.net(x)
    loss = loss_fn(logits, y) if loss_fn is not None else F.cross_entropy(logits, y)
    if not torch.isfinite(loss):
        raise NumericError(f"training loss diverged ({float(loss)})")
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def train_classifier(spec: ModelSpec, data: LabeledData, config: TrainConfig,
                     val: LabeledData | None = None, dataset: DatasetSpec | None = None) -> Classifier:
    """Train ``spec`` on ``data`` with SGD; history records train loss and val accuracy per epoch.

    ``val`` defaults to the training data itself. ``dataset`` supplies input shape and
    normalization; when omitted it is derived from ``data``.
    """
    if dataset is None:
        dataset = dataset_spec_for(data, spec.num_classes)
    model = init_classifier(spec, dataset, config.seed)
    check_data(model, data)
    val = data if val is None else val
    optimizer = make_optimizer(model.net, config)
    sampler = BatchSampler(len(data), config.batch_size, config.seed)
    for epoch in range(config.epochs):
        losses = []
        for idx in sampler.epoch():
            losses.append(sgd_step(model, optimizer, data.x[idx], data.y[idx]))
        model.history.append({
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_accuracy": evaluate_accuracy(model, val),
        })
        log.debug("%s epoch %d: %s", spec.family, epoch, model.history[-1])
    model.net.eval()
    return model


def dataset_spec_for(data: LabeledData, num_classes: int, name="adhoc") -> DatasetSpec:
    x = data.x
    mean = tuple(float(v) for v in x.mean(dim=(0, 2, 3)))
    std = tuple(float(v) for v in x.std(dim=(0, 2, 3)).clamp_min(1e-3))
    return DatasetSpec(name=name, num_classes=num_classes, input_shape=tuple(x.shape[1:]),
                       split_sizes={"train": len(data)}, mean=mean, std=std)


@torch.no_grad()
def predict_logits(model: Classifier, batch: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    """Raw logits (N, k) in inference mode. Raises NumericError on NaN/inf output."""
    if batch.shape[0] == 0:
        return torch.empty(0, model.num_classes, dtype=batch.dtype)
    expected = tuple(model.dataset.input_shape)
    if tuple(batch.shape[1:]) != expected:
        raise ConfigurationError(f"batch has shape {tuple(batch.shape[1:])}, model expects {expected}")
    model.net.eval()
    out = torch.cat([model.net(batch[i:i + batch_size]) for i in range(0, batch.shape[0], batch_size)])
    if not torch.isfinite(out).all():
        raise NumericError("model produced non-finite logits")
    return out


def evaluate_accuracy(model: Classifier, data: LabeledData, top: int = 1) -> float:
    """Fraction of examples whose label is among the ``top`` highest logits."""
    if len(data) == 0:
        raise ValueError("cannot evaluate accuracy on empty data")
    logits = predict_logits(model, data.x)
    top = min(top, logits.shape[1])
    hits = (logits.topk(top, dim=1).indices == data.y[:, None]).any(dim=1)
    return float(hits.double().mean())


def predictions(model: Classifier, x: torch.Tensor) -> torch.Tensor:
    return predict_logits(model, x).argmax(dim=1)


def parameter_checksum(model: Classifier) -> str:
    digest = hashlib.sha256()
    for name, tensor in model.net.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def clone_classifier(model: Classifier) -> Classifier:
    return Classifier(spec=model.spec, net=copy.deepcopy(model.net), dataset=model.dataset,
                      seed=model.seed, history=copy.deepcopy(model.history))


def save_classifier(model: Classifier, path) -> Path:
    path = Path(path)
    arrays = {name: t.detach().cpu().numpy() for name, t in model.net.state_dict().items()}
    meta = {"spec": model.spec.to_dict(), "dataset": model.dataset.to_dict(),
            "seed": model.seed, "history": model.history}
    arrays[METADATA_KEY] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_classifier(path) -> Classifier:
    with np.load(path, allow_pickle=False) as archive:
        if METADATA_KEY not in archive.files:
            raise ArtifactFormatError("metadata", f"{path}: no metadata document")
        meta = json.loads(str(archive[METADATA_KEY]))
        arrays = {k: archive[k] for k in archive.files if k != METADATA_KEY}
    spec = ModelSpec.from_dict(meta["spec"])
    dataset = DatasetSpec.from_dict(meta["dataset"])
    net = build_model(spec, dataset.input_shape, dataset.mean, dataset.std)
    state = net.state_dict()
    missing = [k for k in state if k not in arrays]
    if missing:
        raise ArtifactFormatError(missing[0])
    net.load_state_dict({k: torch.from_numpy(arrays[k].copy()) for k in state})
    net.eval()
    return Classifier(spec=spec, net=net, dataset=dataset, seed=int(meta.get("seed", 0)),
                      history=list(meta.get("history", [])))
