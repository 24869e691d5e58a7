"""Attacker / model-owner splits of a training set: IID index ranges and Dirichlet label skew."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RANGE_GRID = 10  # ranges are multiples of 1/RANGE_GRID


@dataclass
class SplitPlan:
    attacker_indices: list
    user_indices: list
    mode: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def overlap(self) -> int:
        return len(set(self.attacker_indices) & set(self.user_indices))

    def to_dict(self):
        return {"mode": self.mode, "params": self.params, "seed": self.seed,
                "attacker_indices": [int(i) for i in self.attacker_indices],
                "user_indices": [int(i) for i in self.user_indices]}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["attacker_indices"]), list(d["user_indices"]), d["mode"],
                   dict(d.get("params", {})), int(d.get("seed", 0)))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_range(r, name):
    a, b = float(r[0]), float(r[1])
    if not 0 <= a < b <= 1:
        raise ValueError(f"{name} range [{a}, {b}) must satisfy 0 <= a < b <= 1")
    for v in (a, b):
        if abs(v * RANGE_GRID - round(v * RANGE_GRID)) > 1e-9:
            raise ValueError(f"{name} range endpoint {v} is not a multiple of {1 / RANGE_GRID}")
    return a, b


def interval_overlap(r1, r2) -> float:
    return max(0.0, min(r1[1], r2[1]) - max(r1[0], r2[0]))


def split_overlap(n, attacker_range, user_range, seed: int = 0) -> SplitPlan:
    """Slice one seeded permutation of ``range(n)`` by fractional ranges [a, b) and [c, d).

    ``n`` may also be a dataset, in which case its length is used.
    """
    n = n if isinstance(n, (int, np.integer)) else len(n)
    a, b = _check_range(attacker_range, "attacker")
    c, d = _check_range(user_range, "user")
    perm = np.random.default_rng(seed).permutation(n)

    def cut(lo, hi):
        return perm[int(round(lo * n)):int(round(hi * n))].tolist()

    return SplitPlan(cut(a, b), cut(c, d), "overlap",
                     {"attacker_range": [a, b], "user_range": [c, d],
                      "overlap_fraction": round(interval_overlap((a, b), (c, d)), 10)}, seed)


def split_dirichlet(labels, alpha: float = 0.5, parts: int = 2, seed: int = 0,
                    max_retries: int = 10) -> SplitPlan:
    """Per class, draw part proportions ~ Dirichlet(alpha) and deal that class's examples out.

    ``labels`` is a label vector or a dataset with a ``y`` attribute. Part 0 is the
    attacker's share, part 1 the model owner's. A draw that leaves some part
    with no examples at all is redrawn (up to ``max_retries`` times).
    """
    if alpha <= 0:
        raise ValueError("Dirichlet concentration must be positive")
    if parts != 2:
        raise ValueError("only two-party splits are supported")
    labels = np.asarray(labels.y if hasattr(labels, "y") else labels)
    rng = np.random.default_rng(seed)
    for _ in range(max_retries + 1):
        assignment = [[] for _ in range(parts)]
        proportions = {}
        for cls in np.unique(labels):
            idx = np.flatnonzero(labels == cls)
            idx = idx[rng.permutation(idx.size)]
            p = rng.dirichlet(np.full(parts, alpha))
            proportions[int(cls)] = p.tolist()
            cuts = (np.cumsum(p)[:-1] * idx.size).round().astype(int)
            for part, chunk in enumerate(np.split(idx, cuts)):
                assignment[part].extend(chunk.tolist())
        if all(assignment):
            return SplitPlan(sorted(assignment[0]), sorted(assignment[1]), "dirichlet",
                             {"alpha": alpha, "parts": parts, "proportions": proportions}, seed)
    raise RuntimeError(f"Dirichlet split left a part empty after {max_retries} retries")
