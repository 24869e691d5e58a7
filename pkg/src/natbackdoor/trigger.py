"""Trigger representation, input transformation, mask size measures and persistence.

The mask is parameterized by unconstrained logits ``w`` with ``M = (tanh(w) + 1) / 2``,
so gradient steps on ``w`` can never push the mask out of [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ArtifactFormatError, ConfigurationError

NORM_TYPES = ("L1", "L2", "Linf")
MASK_EPS = 1e-6
ARRAY_FIELDS = ("mask", "pattern", "mask_logits")


def mask_from_logits(logits: torch.Tensor) -> torch.Tensor:
    return (torch.tanh(logits) + 1) / 2


def logits_from_mask(mask: torch.Tensor, eps: float = MASK_EPS) -> torch.Tensor:
    return torch.atanh(2 * mask.clamp(eps, 1 - eps) - 1)


@dataclass
class Trigger:
    mask_logits: torch.Tensor  # (H, W)
    pattern: torch.Tensor  # (C, H, W), values in [0, 1]
    target_class: int
    norm_type: str = "L1"

    def __post_init__(self):
        if self.norm_type not in NORM_TYPES:
            raise ConfigurationError(f"norm_type must be one of {NORM_TYPES}")
        if self.pattern.dim() != 3 or self.mask_logits.dim() != 2:
            raise ConfigurationError("pattern must be (C, H, W) and mask_logits (H, W)")
        if tuple(self.pattern.shape[1:]) != tuple(self.mask_logits.shape):
            raise ConfigurationError(
                f"mask {tuple(self.mask_logits.shape)} does not match pattern {tuple(self.pattern.shape)}"
            )

    @property
    def mask(self) -> torch.Tensor:
        return mask_from_logits(self.mask_logits)

    @property
    def shape(self):
        return tuple(self.pattern.shape)

    def copy(self) -> "Trigger":
        return Trigger(self.mask_logits.detach().clone(), self.pattern.detach().clone(),
                       self.target_class, self.norm_type)

    def binarized(self, threshold: float = 0.5) -> "Trigger":
        """Hard 0/1 mask variant (logits pushed to the clip limits)."""
        hard = (self.mask >= threshold).to(self.mask_logits.dtype)
        return Trigger(logits_from_mask(hard), self.pattern.clone(), self.target_class, self.norm_type)

    @classmethod
    def from_mask(cls, mask, pattern, target_class, norm_type="L1"):
        mask = torch.as_tensor(mask, dtype=torch.get_default_dtype())
        pattern = torch.as_tensor(pattern, dtype=torch.get_default_dtype())
        return cls(logits_from_mask(mask), pattern.clamp(0, 1), int(target_class), norm_type)

    @classmethod
    def random(cls, shape, target_class, norm_type="L1", seed=0, logit_mean=-2.0, logit_std=0.1):
        """Pattern ~ U[0, 1]; mask logits ~ N(logit_mean, logit_std), i.e. a faint initial mask."""
        gen = torch.Generator().manual_seed(seed)
        dtype = torch.get_default_dtype()
        c, h, w = shape
        pattern = torch.rand((c, h, w), generator=gen, dtype=dtype)
        logits = logit_mean + logit_std * torch.randn((h, w), generator=gen, dtype=dtype)
        return cls(logits, pattern, int(target_class), norm_type)


def blend(x: torch.Tensor, mask: torch.Tensor, pattern: torch.Tensor, transparency: float = 1.0):
    """Differentiable core of :func:`apply_trigger`: (1 - tM) x + tM pattern, clamped to [0, 1]."""
    m = transparency * mask
    return ((1 - m) * x + m * pattern).clamp(0.0, 1.0)


def apply_trigger(batch: torch.Tensor, trigger: Trigger, transparency: float = 1.0) -> torch.Tensor:
    """Stamp ``trigger`` onto every input of ``batch``; ``transparency`` scales the mask."""
    if not 0.0 <= transparency <= 1.0:
        raise ValueError(f"transparency must be in [0, 1], got {transparency}")
    if tuple(batch.shape[1:]) != trigger.shape:
        raise ValueError(f"batch inputs {tuple(batch.shape[1:])} do not match trigger {trigger.shape}")
    return blend(batch, trigger.mask, trigger.pattern, transparency)


def mask_norm(mask: torch.Tensor, norm_type: str = "L1") -> torch.Tensor:
    if norm_type == "L1":
        return mask.abs().sum()
    if norm_type == "L2":
        return mask.pow(2).sum().sqrt()
    if norm_type == "Linf":
        return mask.abs().max()
    raise ConfigurationError(f"norm_type must be one of {NORM_TYPES}")


@dataclass
class TriggerArtifact:
    trigger: Trigger
    provenance: dict = field(default_factory=dict)


def save_trigger(artifact: TriggerArtifact, path) -> Path:
    """Write an ``.npz`` holding mask, pattern, mask_logits and a JSON metadata entry."""
    path = Path(path)
    trig = artifact.trigger
    meta = {"target_class": trig.target_class, "norm_type": trig.norm_type, **artifact.provenance}
    arrays = {
        "mask": trig.mask.detach().cpu().numpy(),
        "pattern": trig.pattern.detach().cpu().numpy(),
        "mask_logits": trig.mask_logits.detach().cpu().numpy(),
        "metadata": np.array(json.dumps(meta, sort_keys=True)),
    }
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_trigger(path) -> TriggerArtifact:
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise ArtifactFormatError("archive", f"{path}: not a trigger archive ({exc})") from exc
    with archive:
        for name in (*ARRAY_FIELDS, "metadata"):
            if name not in archive.files:
                raise ArtifactFormatError(name, f"{path}: missing {name!r}")
        try:
            meta = json.loads(str(archive["metadata"]))
        except json.JSONDecodeError as exc:
            raise ArtifactFormatError("metadata", f"{path}: metadata is not JSON") from exc
        logits = torch.from_numpy(archive["mask_logits"].copy())
        pattern = torch.from_numpy(archive["pattern"].copy())
        stored_mask = archive["mask"].copy()
    for key in ("target_class", "norm_type"):
        if key not in meta:
            raise ArtifactFormatError(key)
    trig = Trigger(logits, pattern, int(meta.pop("target_class")), meta.pop("norm_type"))
    if stored_mask.shape != tuple(logits.shape):
        raise ArtifactFormatError("mask", f"{path}: mask shape disagrees with mask_logits")
    return TriggerArtifact(trig, meta)
