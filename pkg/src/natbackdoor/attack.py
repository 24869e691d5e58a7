"""Attack metrics against target models, transparency sweeps, multi-class campaigns and the
iterative targeted universal perturbation baseline."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import LabeledData
from .errors import ConfigurationError
from .training import Classifier, evaluate_accuracy, predictions
from .trigger import Trigger, TriggerArtifact, apply_trigger

log = logging.getLogger(__name__)

DEFAULT_GRID = tuple(round(0.1 * i, 1) for i in range(1, 11))


def _non_target(data: LabeledData, target: int) -> LabeledData:
    kept = data.without_class(target)
    if len(kept) == 0:
        raise ValueError(f"no test examples outside target class {target}")
    return kept


def attack_success_rate(target: Classifier, test_data: LabeledData, trigger: Trigger,
                        transparency: float = 1.0) -> float:
    """Fraction of triggered inputs (true label != target class) classified as the target class."""
    data = _non_target(test_data, trigger.target_class)
    x_adv = apply_trigger(data.x, trigger, transparency)
    return float((predictions(target, x_adv) == trigger.target_class).double().mean())


def baseline_target_rate(target: Classifier, test_data: LabeledData, target_class: int) -> float:
    """Rate at which the untouched model already predicts ``target_class`` on other-class inputs."""
    data = _non_target(test_data, target_class)
    return float((predictions(target, data.x) == target_class).double().mean())


def transparency_sweep(target: Classifier, test_data: LabeledData, trigger: Trigger,
                       grid: Sequence[float] = DEFAULT_GRID) -> list:
    for t in grid:
        if not 0 <= t <= 1:
            raise ValueError(f"transparency {t} outside [0, 1]")
    return [(float(t), attack_success_rate(target, test_data, trigger, t)) for t in grid]


@dataclass
class AttackRow:
    model_id: str
    clean_accuracy: float
    asr: float
    baseline: float
    curve: list = field(default_factory=list)


@dataclass
class AttackReport:
    target_class: int
    norm_type: str
    grid: list
    rows: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "target_class": self.target_class,
            "norm_type": self.norm_type,
            "transparency_grid": list(self.grid),
            "seeds": self.seeds,
            "rows": [asdict(r) for r in sorted(self.rows, key=lambda r: r.model_id)],
            **self.extra,
        }

    def write(self, directory, stem="attack_report"):
        directory = Path(directory)
        payload = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        (directory / f"{stem}.json").write_text(payload)
        with open(directory / f"{stem}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", "CA", "ASR", "baseline"] + [f"ASR@{t:g}" for t in self.grid])
            for r in sorted(self.rows, key=lambda r: r.model_id):
                writer.writerow([r.model_id, f"{r.clean_accuracy:.4f}", f"{r.asr:.4f}", f"{r.baseline:.4f}"]
                                + [f"{a:.4f}" for _, a in r.curve])


def evaluate_targets(targets: dict, test_data: LabeledData, trigger: Trigger,
                     grid: Sequence[float] = DEFAULT_GRID, seeds=None) -> AttackReport:
    """CA / ASR / transparency curve for every named target model."""
    report = AttackReport(trigger.target_class, trigger.norm_type, list(grid), seeds=seeds or {})
    for model_id in sorted(targets):
        model = targets[model_id]
        report.rows.append(AttackRow(
            model_id=model_id,
            clean_accuracy=evaluate_accuracy(model, test_data),
            asr=attack_success_rate(model, test_data, trigger, 1.0),
            baseline=baseline_target_rate(model, test_data, trigger.target_class),
            curve=[list(p) for p in transparency_sweep(model, test_data, trigger, grid)],
        ))
    return report


def multi_trigger_campaign(generate: Callable[[int], TriggerArtifact], targets: Sequence[int],
                           evaluate: Callable[[TriggerArtifact], dict] | None = None) -> dict:
    """Run ``generate(class)`` for each target class independently.

    A failure for one class is recorded and the campaign continues with the others.
    Returns ``{"artifacts": {cls: artifact}, "rows": [...], "failures": {cls: message}}``.
    """
    if len(set(targets)) != len(targets):
        raise ConfigurationError(f"target classes must be distinct: {list(targets)}")
    artifacts, rows, failures = {}, [], {}
    for cls in targets:
        try:
            artifact = generate(int(cls))
        except Exception as exc:  # noqa: BLE001 - campaign keeps going per class
            log.warning("class %d failed: %s", cls, exc)
            failures[int(cls)] = f"{type(exc).__name__}: {exc}"
            continue
        artifacts[int(cls)] = artifact
        row = {"target_class": int(cls), "ensemble_asr": artifact.provenance.get("ensemble_asr")}
        if evaluate is not None:
            row.update(evaluate(artifact))
        rows.append(row)
    return {"artifacts": artifacts, "rows": rows, "failures": failures}


@dataclass(frozen=True)
class UapConfig:
    epsilon: float = 0.1
    steps: int = 10
    step_size: float = 0.01
    target_class: int = 0
    batch_size: int = 64

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive")
        if self.steps < 0 or self.step_size <= 0:
            raise ConfigurationError("steps must be >= 0 and step_size > 0")
        if self.step_size > self.epsilon:
            raise ConfigurationError("step_size must not exceed epsilon")


def apply_perturbation(x: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    return (x + delta).clamp(0.0, 1.0)


def uap_baseline(substitute: Classifier, data: LabeledData, config: UapConfig) -> torch.Tensor:
    """Targeted universal perturbation by signed-gradient steps projected onto the l-inf ball.

    Each step walks every batch of ``data`` once, descending the target-class cross-entropy.
    """
    delta = torch.zeros(tuple(data.x.shape[1:]), dtype=data.x.dtype)
    substitute.net.eval()
    for _ in range(config.steps):
        for start in range(0, len(data), config.batch_size):
            x = data.x[start:start + config.batch_size]
            d = delta.clone().requires_grad_(True)
            target = torch.full((x.shape[0],), config.target_class, dtype=torch.long)
            loss = F.cross_entropy(substitute.net(apply_perturbation(x, d)), target)
            (grad,) = torch.autograd.grad(loss, [d])
            delta = (delta - config.step_size * grad.sign()).clamp(-config.epsilon, config.epsilon)
    return delta.detach()


def perturbation_success_rate(target: Classifier, test_data: LabeledData, delta: torch.Tensor,
                              target_class: int) -> float:
    data = _non_target(test_data, target_class)
    return float((predictions(target, apply_perturbation(data.x, delta)) == target_class).double().mean())
