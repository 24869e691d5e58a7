"""Sequential meta-learning trigger optimizer and the end-to-end generation loop.

Each iteration chains one trigger update per substitute: the trigger adapted to model
``i`` is the starting point for model ``i + 1``. The global trigger is then the
elementwise mean of the per-model temporaries. Substitutes keep training (on clean
batches) between trigger updates, and the mask penalty weight follows the measured
batch attack success rate.
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
from .distill import (DistillConfig, EnsembleState, end_epoch, ensemble_step, init_ensemble,
                      save_ensemble, teacher_logits)
from .errors import ConfigurationError, NumericError
from .training import BatchSampler, Classifier, predictions
from .trigger import (Trigger, TriggerArtifact, apply_trigger, blend, logits_from_mask,
                      mask_from_logits, mask_norm, save_trigger)
from .zoo import ModelSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerSchedule:
    max_epochs: int = 10
    iters_per_epoch: int | None = None  # None: one pass over the training data
    inner_steps: int = 1
    trigger_lr: float = 0.1
    batch_size: int = 32
    joint: bool = False  # single joint step over all substitutes instead of the sequential chain
    keep_passing: bool = True  # fall back to the latest epoch snapshot that meets the target on the final ensemble

    def __post_init__(self):
        if self.max_epochs < 0:
            raise ConfigurationError("max_epochs must be >= 0")
        if self.iters_per_epoch is not None and self.iters_per_epoch < 1:
            raise ConfigurationError("iters_per_epoch must be positive")
        if self.inner_steps < 0 or self.trigger_lr <= 0 or self.batch_size < 1:
            raise ConfigurationError("inner_steps >= 0, trigger_lr > 0 and batch_size >= 1 required")

    def to_dict(self):
        return asdict(self)


@dataclass
class LambdaScheduler:
    lam: float = 1e-4
    target_asr: float = 0.99
    up_factor: float = 1.5
    down_factor: float = 1.5
    patience: int = 5
    history: list = field(default_factory=list)
    _passes: int = 0
    _fails: int = 0

    def __post_init__(self):
        if self.lam <= 0:
            raise ConfigurationError("lambda must be positive")
        if not 0 < self.target_asr <= 1:
            raise ConfigurationError("target_asr must be in (0, 1]")
        if self.up_factor <= 1 or self.down_factor <= 1:
            raise ConfigurationError("lambda factors must be > 1")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")

    def config_dict(self):
        return {"lambda": self.lam, "target_asr": self.target_asr, "up_factor": self.up_factor,
                "down_factor": self.down_factor, "patience": self.patience}


def update_lambda(sched: LambdaScheduler, batch_asr: float) -> LambdaScheduler:
    """Raise lambda after ``patience`` consecutive passing batches, lower it after as many failures."""
    if batch_asr >= sched.target_asr:
        sched._passes += 1
        sched._fails = 0
        if sched._passes >= sched.patience:
            sched.lam *= sched.up_factor
            sched._passes = 0
    else:
        sched._fails += 1
        sched._passes = 0
        if sched._fails >= sched.patience:
            sched.lam /= sched.down_factor
            sched._fails = 0
    sched.history.append((len(sched.history), sched.lam, float(batch_asr)))
    return sched


class AdaptiveMoments:
    """Bias-corrected running second moments, no first-moment momentum (RMS-normalized steps)."""

    def __init__(self, beta: float = 0.999, eps: float = 1e-8):
        self.beta = beta
        self.eps = eps
        self.sq = {}
        self.steps = {}

    def direction(self, name: str, grad: torch.Tensor) -> torch.Tensor:
        sq = self.sq.get(name)
        sq = (1 - self.beta) * grad * grad if sq is None else self.beta * sq + (1 - self.beta) * grad * grad
        t = self.steps.get(name, 0) + 1
        self.sq[name], self.steps[name] = sq, t
        return grad / ((sq / (1 - self.beta ** t)).sqrt() + self.eps)


@dataclass
class TriggerGradState:
    global_trigger: Trigger
    temporaries: list = field(default_factory=list)
    moments: AdaptiveMoments = field(default_factory=AdaptiveMoments)


def _trigger_objective(models: Sequence[Classifier], batch, logits_w, pattern, y_t, lam, norm_type):
    mask = mask_from_logits(logits_w)
    x_adv = blend(batch, mask, pattern)
    target = torch.full((batch.shape[0],), int(y_t), dtype=torch.long)
    ce = 0.0
    for model in models:
        model.net.eval()
        ce = ce + F.cross_entropy(model.net(x_adv), target)
    return ce + lam * mask_norm(mask, norm_type)


def trigger_loss(model, batch: torch.Tensor, trigger: Trigger, y_t: int, lam: float):
    """CE of the triggered batch toward ``y_t`` plus ``lam`` times the mask norm.

    ``model`` may be one classifier or a sequence (losses are summed). Returns
    ``(loss, grad_mask_logits, grad_pattern)``; model parameters receive no gradient.
    """
    models = [model] if isinstance(model, Classifier) else list(model)
    w = trigger.mask_logits.detach().clone().requires_grad_(True)
    p = trigger.pattern.detach().clone().requires_grad_(True)
    loss = _trigger_objective(models, batch, w, p, y_t, lam, trigger.norm_type)
    if not torch.isfinite(loss):
        raise NumericError(f"trigger loss is non-finite ({float(loss)})")
    grad_w, grad_p = torch.autograd.grad(loss, [w, p])
    return float(loss.detach()), grad_w, grad_p


def _descend(trigger: Trigger, grad_w, grad_p, lr, moments: AdaptiveMoments) -> Trigger:
    w = trigger.mask_logits - lr * moments.direction("mask_logits", grad_w)
    p = (trigger.pattern - lr * moments.direction("pattern", grad_p)).clamp(0.0, 1.0)
    return Trigger(w.detach(), p.detach(), trigger.target_class, trigger.norm_type)


def inner_step(trigger: Trigger, model, batch, y_t: int, lam: float, steps: int = 1,
               lr: float = 0.1, moments: AdaptiveMoments | None = None) -> Trigger:
    """Adapt a copy of ``trigger`` to ``model`` with ``steps`` first-order updates."""
    moments = AdaptiveMoments() if moments is None else moments
    out = trigger.copy()
    for _ in range(steps):
        _, gw, gp = trigger_loss(model, batch, out, y_t, lam)
        out = _descend(out, gw, gp, lr, moments)
    return out


def outer_aggregate(temporaries: Sequence[Trigger]) -> Trigger:
    """Elementwise mean of patterns and masks; logits are recomputed from the mean mask."""
    if not temporaries:
        raise ValueError("cannot aggregate an empty list of triggers")
    first = temporaries[0]
    for t in temporaries[1:]:
        if t.shape != first.shape:
            raise ValueError("temporary triggers have different shapes")
    if len(temporaries) == 1:
        return first.copy()
    mask = torch.stack([t.mask for t in temporaries]).mean(dim=0)
    pattern = torch.stack([t.pattern for t in temporaries]).mean(dim=0)
    return Trigger(logits_from_mask(mask), pattern, first.target_class, first.norm_type)


@torch.no_grad()
def ensemble_asr(models: Sequence[Classifier], x: torch.Tensor, y: torch.Tensor, trigger: Trigger,
                 transparency: float = 1.0) -> float | None:
    """Mean over models of the fraction of triggered non-target inputs predicted as the target."""
    keep = y != trigger.target_class
    if not bool(keep.any()):
        return None
    x_adv = apply_trigger(x[keep], trigger, transparency)
    rates = [float((predictions(m, x_adv) == trigger.target_class).double().mean()) for m in models]
    return float(np.mean(rates))


@dataclass
class RunLog:
    epoch_asr: list = field(default_factory=list)
    epoch_mask_l1: list = field(default_factory=list)
    teacher_history: list = field(default_factory=list)
    val_accuracy_history: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def generate_natural_trigger(train: LabeledData, val: LabeledData, specs: Sequence[ModelSpec], dataset: DatasetSpec,
                             distill: DistillConfig, schedule: OptimizerSchedule, target_class: int,
                             norm_type: str = "L1", seed: int = 0, lam: LambdaScheduler | None = None,
                             checkpoint_dir=None):
    """Generate a universal trigger for ``target_class`` from clean data.

    Returns ``(TriggerArtifact, EnsembleState, RunLog)``. The substitute ensemble is
    trained from scratch alongside the trigger; its batch order follows
    ``distill.train.seed`` and the trigger initialization follows ``seed``.
    """
    if not 0 <= target_class < dataset.num_classes:
        raise ConfigurationError(f"target class {target_class} outside [0, {dataset.num_classes})")
    if not bool((train.y == target_class).any()):
        raise ConfigurationError(f"training data has no examples of target class {target_class}")
    lam = LambdaScheduler() if lam is None else lam
    state = init_ensemble(specs, dataset, distill, len(train))
    sampler = BatchSampler(len(train), schedule.batch_size, distill.train.seed)
    iters = schedule.iters_per_epoch or sampler.batches_per_epoch
    grad_state = TriggerGradState(Trigger.random(dataset.input_shape, target_class, norm_type, seed=seed))
    runlog = RunLog()
    snapshots = []
    try:
        for epoch in range(schedule.max_epochs):
            for _ in range(iters):
                idx = sampler.next()
                _iteration(state, grad_state, train.x[idx], train.y[idx], distill, schedule, lam)
            end_epoch(state, val)
            asr = ensemble_asr(state.models, val.x, val.y, grad_state.global_trigger)
            runlog.epoch_asr.append(asr)
            runlog.epoch_mask_l1.append(float(grad_state.global_trigger.mask.sum()))
            runlog.teacher_history.append(list(state.tm))
            runlog.val_accuracy_history.append(list(state.val_accuracies))
            snapshots.append(grad_state.global_trigger.copy())
            log.info("epoch %d: ensemble ASR %.4f, mask L1 %.2f, lambda %.3g, val %s",
                     epoch, asr, runlog.epoch_mask_l1[-1], lam.lam, state.val_accuracies)
    except Exception:
        if checkpoint_dir is not None:
            _checkpoint_partial(checkpoint_dir, grad_state.global_trigger, state, lam, runlog)
        raise
    for m in state.models:
        m.net.eval()

    final = grad_state.global_trigger
    returned_epoch = schedule.max_epochs - 1 if schedule.max_epochs else None
    final_asr = ensemble_asr(state.models, val.x, val.y, final)
    if schedule.keep_passing and final_asr is not None and final_asr < lam.target_asr:
        # latest epoch snapshot that meets the target on the final substitutes
        for epoch in reversed(range(len(snapshots))):
            asr = ensemble_asr(state.models, val.x, val.y, snapshots[epoch])
            if asr >= lam.target_asr:
                final, returned_epoch, final_asr = snapshots[epoch], epoch, asr
                break
    provenance = {
        "dataset": dataset.name,
        "substitutes": [s.to_dict() for s in specs],
        "seeds": {"trigger": seed, "train": distill.train.seed},
        "lambda_history": [[int(s), float(v), float(a)] for s, v, a in lam.history],
        "ensemble_asr": final_asr,
        "returned_epoch": returned_epoch,
        "mode": "joint" if schedule.joint else "sequential",
    }
    return TriggerArtifact(final, provenance), state, runlog


def _iteration(state: EnsembleState, grad_state: TriggerGradState, x, y, distill, schedule, lam):
    y_t = grad_state.global_trigger.target_class
    z_teacher = teacher_logits(state, x)
    current = grad_state.global_trigger
    temporaries = []
    if schedule.joint:
        ensemble_step(state, x, y, distill, z_teacher=z_teacher)
        current = inner_step(current, state.models, x, y_t, lam.lam, schedule.inner_steps,
                             schedule.trigger_lr, grad_state.moments)
        temporaries.append(current)
    else:
        for i, model in enumerate(state.models):
            ensemble_step(state, x, y, distill, members=[i], z_teacher=z_teacher)
            current = inner_step(current, model, x, y_t, lam.lam, schedule.inner_steps,
                                 schedule.trigger_lr, grad_state.moments)
            temporaries.append(current)
    grad_state.temporaries = temporaries
    grad_state.global_trigger = outer_aggregate(temporaries)
    batch_asr = ensemble_asr(state.models, x, y, grad_state.global_trigger)
    if batch_asr is not None:
        update_lambda(lam, batch_asr)


def _checkpoint_partial(directory, trigger, state, lam, runlog):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_trigger(TriggerArtifact(trigger, {"partial": True, "lambda": lam.lam}), directory / "partial_trigger.npz")
    save_ensemble(state, directory / "partial_ensemble")
    (directory / "partial_runlog.json").write_text(json.dumps(runlog.to_dict(), indent=2))
