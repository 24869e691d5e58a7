"""Backdoor defenses used to stress a generated trigger.

Model-repair defenses (pruning, fine-tuning, attention distillation) return new
classifiers and never touch the input model. Input detectors (Strip, a Gram-matrix
Beatrix variant) return report objects.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import LabeledData
from .errors import ConfigurationError
from .training import (BatchSampler, Classifier, TrainConfig, clone_classifier, evaluate_accuracy,
                       make_optimizer, predict_logits, sgd_step)

log = logging.getLogger(__name__)

MAD_ETA = 1.4826
GUARD = 1e-12


# pruning ---------------------------------------------------------------------------------


def prunable_weights(net: nn.Module) -> list:
    return [m.weight for m in net.modules() if isinstance(m, (nn.Conv2d, nn.Linear))]


@torch.no_grad()
def magnitude_prune_(weights: Sequence[torch.Tensor], ratio: float) -> int:
    """Zero the globally smallest-|w| ``ratio`` fraction of entries in place; returns the count."""
    flat = torch.cat([w.detach().abs().flatten() for w in weights])
    k = int(math.floor(ratio * flat.numel()))
    if k == 0:
        return 0
    order = torch.argsort(flat, stable=True)[:k]
    keep = torch.ones_like(flat)
    keep[order] = 0
    offset = 0
    for w in weights:
        n = w.numel()
        w.mul_(keep[offset:offset + n].view_as(w))
        offset += n
    return k


@torch.no_grad()
def mean_channel_activation(model: Classifier, data: LabeledData, batch_size=256) -> torch.Tensor:
    model.net.eval()
    totals = None
    for i in range(0, len(data), batch_size):
        tap = model.net.forward_features(data.x[i:i + batch_size])[-1]
        s = tap.mean(dim=(2, 3)).sum(dim=0)
        totals = s if totals is None else totals + s
    return totals / len(data)


def prune_model(model: Classifier, ratio: float, method: str = "magnitude",
                data: LabeledData | None = None) -> Classifier:
    """Return a pruned copy of ``model``.

    ``magnitude`` zeroes the smallest conv/dense weights network-wide; ``activation``
    masks the tap-layer channels with the lowest mean activation on clean ``data``.
    """
    if not 0 <= ratio < 1:
        raise ValueError(f"pruning ratio must be in [0, 1), got {ratio}")
    pruned = clone_classifier(model)
    if method == "magnitude":
        magnitude_prune_(prunable_weights(pruned.net), ratio)
    elif method == "activation":
        if data is None or len(data) == 0:
            raise ValueError("activation pruning needs clean data")
        act = mean_channel_activation(pruned, data)
        k = int(math.floor(ratio * act.numel()))
        if k:
            idx = torch.argsort(act, stable=True)[:k]
            with torch.no_grad():
                pruned.net.channel_mask[idx] = 0
    else:
        raise ConfigurationError(f"unknown pruning method {method!r}")
    pruned.net.eval()
    return pruned


# fine-tuning and attention distillation ---------------------------------------------------


def clean_subset(data: LabeledData, fraction: float, seed: int) -> LabeledData:
    if not 0 < fraction <= 1:
        raise ValueError("clean_fraction must be in (0, 1]")
    n = max(1, int(round(fraction * len(data))))
    idx = np.sort(np.random.default_rng(seed).permutation(len(data))[:n])
    return data.subset(idx)


def _finetune_config(lr, epochs, seed, batch_size):
    return TrainConfig(learning_rate=lr, momentum=0.9, weight_decay=5e-4, epochs=epochs,
                       batch_size=batch_size, seed=seed)


def fine_tune(model: Classifier, train_data: LabeledData, clean_fraction: float = 0.10, epochs: int = 5,
              lr: float = 0.01, seed: int = 0, batch_size: int = 32) -> Classifier:
    """Continue training a copy of ``model`` on a seeded ``clean_fraction`` of ``train_data``."""
    subset = clean_subset(train_data, clean_fraction, seed)
    tuned = clone_classifier(model)
    config = _finetune_config(lr, epochs, seed, batch_size)
    optimizer = make_optimizer(tuned.net, config)
    sampler = BatchSampler(len(subset), batch_size, seed)
    for _ in range(epochs):
        for idx in sampler.epoch():
            sgd_step(tuned, optimizer, subset.x[idx], subset.y[idx])
    tuned.net.eval()
    return tuned


def attention_map(fmap: torch.Tensor) -> torch.Tensor:
    """Channel-wise sum of squared activations, L2-normalized per example -> (B, H, W)."""
    a = fmap.pow(2).sum(dim=1)
    flat = a.flatten(1)
    norms = flat.norm(dim=1, keepdim=True)
    flat = torch.where(norms < GUARD, flat, flat / norms.clamp_min(GUARD))
    return flat.view_as(a)


def nad_distill(model: Classifier, train_data: LabeledData, clean_fraction: float = 0.10,
                beta: float = 500.0, epochs: int = 5, lr: float = 0.01, seed: int = 0,
                teacher_epochs: int | None = None, batch_size: int = 32) -> Classifier:
    """Neural attention distillation: fine-tune a teacher, then pull the student's attention to it.

    Student loss is CE + (beta / L) * sum over the L stage outputs of
    mean((A_student - A_teacher)^2).
    """
    teacher_epochs = epochs if teacher_epochs is None else teacher_epochs
    teacher = fine_tune(model, train_data, clean_fraction, teacher_epochs, lr, seed, batch_size)
    teacher.net.eval()
    subset = clean_subset(train_data, clean_fraction, seed)
    student = clone_classifier(model)
    config = _finetune_config(lr, epochs, seed, batch_size)
    optimizer = make_optimizer(student.net, config)
    sampler = BatchSampler(len(subset), batch_size, seed)
    for _ in range(epochs):
        for idx in sampler.epoch():
            x, y = subset.x[idx], subset.y[idx]
            student.net.train()
            optimizer.zero_grad()
            s_maps = student.net.forward_features(x)
            logits = student.net.head(s_maps[-1].mean(dim=(2, 3)))
            loss = F.cross_entropy(logits, y)
            if beta:
                with torch.no_grad():
                    t_maps = teacher.net.forward_features(x)
                at = sum(F.mse_loss(attention_map(s), attention_map(t)) for s, t in zip(s_maps, t_maps))
                loss = loss + beta / len(s_maps) * at
            loss.backward()
            optimizer.step()
    student.net.eval()
    return student


# Strip ----------------------------------------------------------------------------------


def entropy(probs: torch.Tensor) -> torch.Tensor:
    """Shannon entropy (nats) of each row; 0 log 0 taken as 0."""
    p = probs.clamp_min(0)
    return -(torch.where(p > 0, p * torch.log(p), torch.zeros_like(p))).sum(dim=-1)


@torch.no_grad()
def strip_entropies(model: Classifier, inputs: torch.Tensor, overlay_pool: torch.Tensor,
                    n_overlays: int = 64, seed: int = 0) -> np.ndarray:
    """Mean prediction entropy of each input blended (pixel mean) with random pool images."""
    if n_overlays < 1:
        raise ValueError("n_overlays must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    out = np.empty(inputs.shape[0])
    for i in range(inputs.shape[0]):
        pick = torch.randint(0, overlay_pool.shape[0], (n_overlays,), generator=gen)
        blended = 0.5 * inputs[i:i + 1] + 0.5 * overlay_pool[pick]
        probs = torch.softmax(predict_logits(model, blended), dim=1)
        out[i] = float(entropy(probs).mean())
    return out


def percentile_threshold(clean_entropies: np.ndarray, pass_rate: float = 0.99) -> float:
    """Largest threshold leaving at least ``ceil(pass_rate * n)`` clean entropies strictly above it."""
    e = np.sort(np.asarray(clean_entropies, dtype=float))
    n = e.size
    need = int(math.ceil(pass_rate * n - 1e-9))
    j = n - need  # e[j:] must all pass
    if j <= 0:
        return float(e[0] - 1.0)
    below = e[:j][e[:j] < e[j]]
    return float(below[-1]) if below.size else float(e[0] - 1.0)


@dataclass
class StripReport:
    mean_clean: float
    std_clean: float
    threshold: float
    p_escape: float
    n_overlays: int
    clean_pass_rate: float
    clean_entropies: list = field(default_factory=list)
    input_entropies: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def strip_detect(model: Classifier, inputs: torch.Tensor, clean_holdout: torch.Tensor,
                 n_overlays: int = 64, seed: int = 0, overlay_pool: torch.Tensor | None = None,
                 pass_rate: float = 0.99) -> StripReport:
    """Calibrate the entropy threshold on ``clean_holdout`` and report how many inputs escape."""
    if n_overlays < 1:
        raise ValueError("n_overlays must be >= 1")
    pool = clean_holdout if overlay_pool is None else overlay_pool
    clean_e = strip_entropies(model, clean_holdout, pool, n_overlays, seed)
    input_e = strip_entropies(model, inputs, pool, n_overlays, seed + 1)
    threshold = percentile_threshold(clean_e, pass_rate)
    return StripReport(
        mean_clean=float(clean_e.mean()),
        std_clean=float(clean_e.std()),
        threshold=threshold,
        p_escape=float((input_e > threshold).mean()) if input_e.size else 0.0,
        n_overlays=n_overlays,
        clean_pass_rate=float((clean_e > threshold).mean()),
        clean_entropies=[float(v) for v in clean_e],
        input_entropies=[float(v) for v in input_e],
    )


# Beatrix --------------------------------------------------------------------------------


@dataclass(frozen=True)
class BeatrixConfig:
    gram_orders: tuple = tuple(range(1, 10))
    eta: float = MAD_ETA
    anomaly_threshold: float = math.e ** 2
    tap_layer: int = -1  # stage index; -1 is the last feature map before pooling

    def __post_init__(self):
        if not self.gram_orders or min(self.gram_orders) < 1:
            raise ConfigurationError("gram orders must be >= 1")
        if self.eta <= 0:
            raise ConfigurationError("eta must be positive")


def anomaly_index(values, eta: float = MAD_ETA) -> np.ndarray:
    """|v - median| / (eta * MAD) for each value.

    When the MAD vanishes, values at the median get 0 and everything else +inf.
    """
    v = np.asarray(values, dtype=float)
    med = np.median(v)
    dev = np.abs(v - med)
    mad = eta * np.median(dev)
    if mad < GUARD:
        return np.where(dev < GUARD, 0.0, np.inf)
    return dev / mad


@torch.no_grad()
def gram_features(model: Classifier, x: torch.Tensor, orders=range(1, 10), tap_layer: int = -1,
                  batch_size: int = 256) -> np.ndarray:
    """Upper triangles of the order-r Gram matrices (r-th root restored) of a tap-layer map."""
    model.net.eval()
    chunks = []
    for i in range(0, x.shape[0], batch_size):
        fmap = model.net.forward_features(x[i:i + batch_size])[tap_layer].to(torch.float64)
        b, c = fmap.shape[:2]
        feats = fmap.reshape(b, c, -1)
        iu = torch.triu_indices(c, c)
        parts = []
        for r in orders:
            fr = feats.pow(r)
            g = fr @ fr.transpose(1, 2)
            g = g.sign() * g.abs().pow(1.0 / r)
            parts.append(g[:, iu[0], iu[1]])
        chunks.append(torch.cat(parts, dim=1))
    return torch.cat(chunks).numpy()


def _class_deviation(reference: np.ndarray, samples: np.ndarray, eta: float) -> np.ndarray:
    med = np.median(reference, axis=0)
    mad = eta * np.median(np.abs(reference - med), axis=0)
    keep = mad >= GUARD
    if not keep.any():
        return np.zeros(samples.shape[0])
    return (np.abs(samples[:, keep] - med[keep]) / mad[keep]).mean(axis=1)


@dataclass
class DetectionReport:
    anomaly_indices: dict
    flagged: list
    detected: bool
    skipped: list = field(default_factory=list)

    def to_dict(self):
        return {"anomaly_indices": {str(k): v for k, v in self.anomaly_indices.items()},
                "flagged": self.flagged, "detected": self.detected, "skipped": self.skipped}


def beatrix_detect(model: Classifier, suspect_inputs: torch.Tensor, clean_holdout: LabeledData,
                   config: BeatrixConfig = BeatrixConfig()) -> DetectionReport:
    """Flag classes whose suspects' Gram statistics deviate from that class's clean statistics.

    Suspects are grouped by predicted class. Per class, every clean sample and the
    suspects' median get a deviation score against the clean per-feature median/MAD;
    the suspects' score is then MAD-normalized within the pooled scores.
    """
    orders = tuple(config.gram_orders)
    suspect_pred = predict_logits(model, suspect_inputs).argmax(dim=1).numpy()
    suspect_feats = gram_features(model, suspect_inputs, orders, config.tap_layer)
    clean_feats = gram_features(model, clean_holdout.x, orders, config.tap_layer)
    clean_labels = clean_holdout.y.numpy()
    indices, flagged, skipped = {}, [], []
    for cls in sorted(set(int(c) for c in suspect_pred)):
        ref = clean_feats[clean_labels == cls]
        if ref.shape[0] < 2:
            log.warning("class %d has %d clean holdout samples; skipped", cls, ref.shape[0])
            skipped.append(cls)
            continue
        ref_dev = _class_deviation(ref, ref, config.eta)
        sus_dev = _class_deviation(ref, suspect_feats[suspect_pred == cls], config.eta)
        pooled = np.append(ref_dev, np.median(sus_dev))
        index = float(anomaly_index(pooled, config.eta)[-1])
        indices[cls] = index
        if index > config.anomaly_threshold:
            flagged.append(cls)
    return DetectionReport(indices, flagged, bool(flagged), skipped)


def prune_sweep(model: Classifier, test_data: LabeledData, ratios: Sequence[float], method="magnitude",
                data: LabeledData | None = None, asr_fn=None) -> list:
    """CA (and ASR via ``asr_fn(model)``) for each pruning ratio."""
    rows = []
    for ratio in ratios:
        pruned = prune_model(model, ratio, method, data)
        row = {"ratio": float(ratio), "clean_accuracy": evaluate_accuracy(pruned, test_data)}
        if asr_fn is not None:
            row["asr"] = asr_fn(pruned)
        rows.append(row)
    return rows
