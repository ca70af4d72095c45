"""Proposal-drop augmentation: remove some of the most confident proposals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Rng
from .types import ActionProposal


@dataclass(frozen=True)
class AugmentSpec:
    A: int = 30
    K: int = 10
    draws: int = 1
    include_original: bool = False
    # draw K uniformly from 1..K for every variant instead of using it as is
    resample_k: bool = False

    def __post_init__(self):
        if self.A < 1:
            raise ValueError(f"A must be >= 1, got {self.A}")
        if not 0 <= self.K < self.A:
            raise ValueError(f"need 0 <= K < A, got K={self.K}, A={self.A}")
        if self.draws < 1:
            raise ValueError(f"draws must be >= 1, got {self.draws}")


def top_pool(confidences: np.ndarray, a: int) -> np.ndarray:
    """Indices of the min(a, N) most confident entries; ties go to the lower index."""
    order = np.argsort(-np.asarray(confidences, dtype=np.float64), kind="stable")
    return order[:min(a, len(order))]


def removal_indices(confidences: np.ndarray, spec: AugmentSpec, rng: Rng) -> np.ndarray:
    n = len(confidences)
    if n < 1:
        raise ValueError("augmentation needs at least one proposal")
    pool = top_pool(confidences, spec.A)
    k = spec.K
    if spec.resample_k and k > 0:
        k = int(rng.integers(1, k + 1))
    if n < spec.A:
        k = min(k, n - 1)
    k = min(k, len(pool))
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    return np.sort(rng.choice(pool, size=k, replace=False))


def augment(proposals: list[ActionProposal], spec: AugmentSpec, rng: Rng,
            report: dict | None = None) -> list[ActionProposal]:
    """Return the proposals minus a random subset of the top pool (order kept)."""
    conf = np.array([p.confidence for p in proposals])
    removed = removal_indices(conf, spec, rng)
    if report is not None:
        report["removed"] = removed.tolist()
        report["pool"] = top_pool(conf, spec.A).tolist()
    drop = set(removed.tolist())
    return [p for i, p in enumerate(proposals) if i not in drop]


def keep_mask(confidences: np.ndarray, spec: AugmentSpec, rng: Rng) -> np.ndarray:
    mask = np.ones(len(confidences), dtype=bool)
    mask[removal_indices(confidences, spec, rng)] = False
    return mask


def augmented_batches(sample, spec: AugmentSpec, rng: Rng):
    """Yield (variant, ground truth) pairs for a (proposals, ground truth) sample."""
    proposals, truth = sample
    if spec.include_original:
        yield list(proposals), truth
    for d in range(spec.draws):
        yield augment(proposals, spec, rng.child(d)), truth
