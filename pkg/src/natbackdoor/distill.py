"""Competitive distillation: c substitutes trained together, best one teaches the rest.

Per epoch one member is the teacher (indicator ``tm``). The teacher sees only the
hard-label loss; every other member minimizes ``kd_loss`` against the teacher's
tempered soft labels. After each epoch the member with the best validation accuracy
becomes the next teacher.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetSpec, LabeledData
from .errors import ConfigurationError, NumericError
from .training import (BatchSampler, Classifier, TrainConfig, evaluate_accuracy,
                       init_classifier, load_classifier, make_optimizer, save_classifier, sgd_step)
from .zoo import ModelSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DistillConfig:
    num_substitutes: int = 3
    temperature: float = 1.0
    alpha: float = 0.5
    train: TrainConfig = field(default_factory=TrainConfig)
    scale_kl_by_h2: bool = False

    def __post_init__(self):
        if self.num_substitutes < 1:
            raise ConfigurationError("num_substitutes must be >= 1")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        if not 0 <= self.alpha <= 1:
            raise ConfigurationError("alpha must be in [0, 1]")

    def to_dict(self):
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d


def soft_labels(logits: torch.Tensor, h: float = 1.0) -> torch.Tensor:
    """Softmax of ``logits / h`` along the last axis (max-subtracted)."""
    if h <= 0:
        raise ValueError(f"temperature must be positive, got {h}")
    z = logits / h
    z = z - z.max(dim=-1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def kl_student_teacher(student_logits, teacher_logits, h: float = 1.0):
    """Per-example KL(softmax(student) || softmax(teacher / h))."""
    log_p = F.log_softmax(student_logits, dim=-1)
    log_q = F.log_softmax(teacher_logits / h, dim=-1)
    return (log_p.exp() * (log_p - log_q)).sum(dim=-1)


def kd_loss(student_logits, teacher_logits, hard_label, alpha: float = 0.5, h: float = 1.0,
            scale_kl_by_h2: bool = False):
    """alpha * KL(student || tempered teacher) + (1 - alpha) * CE(student, label), batch mean.

    Accepts a single logit vector or a batch. The teacher side is detached.
    """
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if h <= 0:
        raise ValueError(f"temperature must be positive, got {h}")
    student_logits = torch.as_tensor(student_logits)
    teacher_logits = torch.as_tensor(teacher_logits, dtype=student_logits.dtype)
    hard_label = torch.as_tensor(hard_label, dtype=torch.long)
    if student_logits.dim() == 1:
        student_logits, teacher_logits = student_logits[None], teacher_logits[None]
        hard_label = hard_label.reshape(1)
    k = student_logits.shape[-1]
    if int(hard_label.min()) < 0 or int(hard_label.max()) >= k:
        raise ValueError(f"hard label out of range [0, {k})")
    ce = F.cross_entropy(student_logits, hard_label)
    kl = kl_student_teacher(student_logits, teacher_logits.detach(), h).mean()
    if scale_kl_by_h2:
        kl = kl * h * h
    return alpha * kl + (1 - alpha) * ce


@dataclass
class EnsembleState:
    models: list
    tm: list
    epoch: int = 0
    val_accuracies: list = field(default_factory=list)
    tm_history: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    optimizers: list = field(default_factory=list, repr=False)
    sampler: BatchSampler | None = field(default=None, repr=False)

    @property
    def teacher(self) -> int:
        return int(np.argmax(self.tm))

    @property
    def size(self):
        return len(self.models)


def one_hot(index: int, size: int) -> list:
    return [1 if i == index else 0 for i in range(size)]


def init_ensemble(specs: Sequence[ModelSpec], dataset: DatasetSpec, config: DistillConfig,
                  n_train: int) -> EnsembleState:
    """Member i is initialized under seed ``train.seed + i``; the first teacher is drawn at random."""
    if len(specs) != config.num_substitutes:
        raise ConfigurationError(f"{len(specs)} substitute specs for num_substitutes={config.num_substitutes}")
    seed = config.train.seed
    models = [init_classifier(spec, dataset, seed + i) for i, spec in enumerate(specs)]
    first = int(np.random.default_rng(seed).integers(len(models)))
    return EnsembleState(
        models=models,
        tm=one_hot(first, len(models)),
        optimizers=[make_optimizer(m.net, config.train) for m in models],
        sampler=BatchSampler(n_train, config.train.batch_size, seed),
    )


def select_teacher(state: EnsembleState, val_data: LabeledData | None = None,
                   accuracies: Sequence[float] | None = None) -> int:
    """Elect the member with the highest validation accuracy (ties go to the lowest index)."""
    if accuracies is None:
        if val_data is None or len(val_data) == 0:
            raise ValueError("teacher selection needs nonempty validation data")
        accuracies = [evaluate_accuracy(m, val_data) for m in state.models]
    accuracies = [float(a) for a in accuracies]
    best = int(np.argmax(accuracies))
    state.val_accuracies = accuracies
    state.tm = one_hot(best, len(accuracies))
    return best


@torch.no_grad()
def _teacher_logits(model: Classifier, x):
    model.net.eval()
    return model.net(x)


def teacher_logits(state: EnsembleState, x):
    """Current teacher's logits on ``x`` (inference mode); None for a single-member ensemble."""
    return _teacher_logits(state.models[state.teacher], x) if state.size > 1 else None


def ensemble_step(state: EnsembleState, x, y, config: DistillConfig, members=None,
                  z_teacher=None) -> dict:
    """One optimizer step for each member in ``members`` (default: all) on the batch (x, y).

    Teacher logits are taken before any update in this step (or passed in as
    ``z_teacher``), so the result does not depend on the order members are visited.
    """
    teacher = state.teacher
    members = range(state.size) if members is None else members
    if z_teacher is None:
        z_teacher = teacher_logits(state, x)
    losses = {}
    for i in members:
        if i == teacher:
            loss_fn = None
        else:
            def loss_fn(logits, labels, _z=z_teacher):
                return kd_loss(logits, _z, labels, config.alpha, config.temperature, config.scale_kl_by_h2)
        losses[i] = sgd_step(state.models[i], state.optimizers[i], x, y, loss_fn)
    return losses


def end_epoch(state: EnsembleState, val_data: LabeledData):
    """Re-elect the teacher and record the epoch in the histories."""
    select_teacher(state, val_data)
    state.epoch += 1
    state.tm_history.append(list(state.tm))
    state.val_history.append(list(state.val_accuracies))
    for model, acc in zip(state.models, state.val_accuracies):
        model.history.append({"epoch": state.epoch - 1, "val_accuracy": acc})


def train_ensemble_epoch(state: EnsembleState, train_data: LabeledData, val_data: LabeledData,
                         config: DistillConfig) -> EnsembleState:
    losses = {i: [] for i in range(state.size)}
    try:
        for idx in state.sampler.epoch():
            for i, loss in ensemble_step(state, train_data.x[idx], train_data.y[idx], config).items():
                losses[i].append(loss)
    except NumericError as exc:
        raise NumericError(f"epoch {state.epoch} aborted, teacher={state.teacher}: {exc}") from exc
    end_epoch(state, val_data)
    for model, member_losses in zip(state.models, losses.values()):
        model.history[-1]["train_loss"] = float(np.mean(member_losses))
    log.info("ensemble epoch %d: val=%s teacher=%d", state.epoch, state.val_accuracies, state.teacher)
    return state


def train_ensemble(specs, train_data, val_data, config: DistillConfig, dataset: DatasetSpec,
                   epochs: int | None = None) -> EnsembleState:
    state = init_ensemble(specs, dataset, config, len(train_data))
    for _ in range(config.train.epochs if epochs is None else epochs):
        train_ensemble_epoch(state, train_data, val_data, config)
    for m in state.models:
        m.net.eval()
    return state


def save_ensemble(state: EnsembleState, directory, config: DistillConfig | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    members = []
    for i, model in enumerate(state.models):
        name = f"member_{i}.npz"
        save_classifier(model, directory / name)
        members.append(name)
    manifest = {
        "members": members,
        "tm": state.tm,
        "epoch": state.epoch,
        "tm_history": state.tm_history,
        "val_accuracy_history": state.val_history,
        "config": config.to_dict() if config is not None else None,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_ensemble(directory) -> EnsembleState:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    models = [load_classifier(directory / name) for name in manifest["members"]]
    state = EnsembleState(models=models, tm=list(manifest["tm"]), epoch=int(manifest["epoch"]),
                          tm_history=manifest["tm_history"], val_history=manifest["val_accuracy_history"])
    if state.val_history:
        state.val_accuracies = list(state.val_history[-1])
    return state
