"""Per-frame training targets and decoding of predictions into proposals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..types import BACKGROUND, ActionProposal, SegmentAnnotation, check_non_overlapping, proposal_confidence
from .model import regression_upper_bounds


@dataclass
class RegressionTarget:
    labels: np.ndarray      # [T'] class ids, 0 = background
    offsets: np.ndarray     # [T', 2] seconds to the enclosing instance; zero on background
    intervals: np.ndarray   # [T', 2] enclosing instance, or the nearest one for background frames
    inside: np.ndarray      # [T'] bool
    level: np.ndarray       # [T'] assigned pyramid level, -1 on background

    def __len__(self) -> int:
        return len(self.labels)


def sampling_period(timestamps: np.ndarray) -> float:
    ts = np.asarray(timestamps, dtype=np.float64)
    return float(np.median(np.diff(ts))) if len(ts) > 1 else 1.0


def _check_timestamps(timestamps: np.ndarray) -> np.ndarray:
    ts = np.asarray(timestamps, dtype=np.float64)
    if ts.ndim != 1:
        raise ValueError(f"timestamps must be 1-D, got shape {ts.shape}")
    if np.any(np.diff(ts) <= 0):
        bad = int(np.argmax(np.diff(ts) <= 0))
        raise ValueError(f"timestamps not strictly increasing at index {bad}: {ts[bad]} -> {ts[bad + 1]}")
    return ts


def assign_targets(annotations: list[SegmentAnnotation], timestamps: np.ndarray, levels: int = 4,
                   period: float | None = None, range_base: float = 4.0) -> RegressionTarget:
    ts = _check_timestamps(timestamps)
    period = sampling_period(ts) if period is None else period
    ann = check_non_overlapping(list(annotations))
    n = len(ts)
    labels = np.full(n, BACKGROUND, dtype=np.int64)
    offsets = np.zeros((n, 2))
    intervals = np.zeros((n, 2))
    inside = np.zeros(n, dtype=bool)
    level = np.full(n, -1, dtype=np.int64)
    if not ann:
        return RegressionTarget(labels, offsets, intervals, inside, level)

    starts = np.array([a.start for a in ann])
    ends = np.array([a.end for a in ann])
    for j, a in enumerate(ann):
        hit = (ts >= a.start) & (ts < a.end)
        labels[hit] = a.label
        offsets[hit, 0] = ts[hit] - a.start
        offsets[hit, 1] = a.end - ts[hit]
        intervals[hit] = (a.start, a.end)
        inside |= hit

    # background frames point at the closest instance (used by the predicted-label indicator)
    out = ~inside
    if out.any():
        gap = np.maximum(starts[None] - ts[out, None], 0) + np.maximum(ts[out, None] - ends[None], 0)
        nearest = gap.argmin(axis=1)
        intervals[out] = np.stack([starts[nearest], ends[nearest]], axis=1)

    hi = regression_upper_bounds(levels, period, range_base)
    reach = offsets[inside].max(axis=1)
    level[inside] = np.searchsorted(hi, reach, side="right")
    return RegressionTarget(labels, offsets, intervals, inside, level)


def decode_proposals(probs: np.ndarray, offsets: np.ndarray, timestamps: np.ndarray, video_id: str = "",
                     period: float | None = None, include_background: bool = False
                     ) -> tuple[list[ActionProposal], np.ndarray]:
    """One proposal per sampled frame, plus the per-frame argmax labeling.

    probs: [T', A]; offsets: [T', 2] seconds. Intervals of non-positive width
    are widened to half a sampling period around the frame and flagged.
    """
    ts = _check_timestamps(timestamps)
    probs = np.asarray(probs, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    if not len(probs) == len(offsets) == len(ts):
        raise ValueError(f"length mismatch: {len(probs)} dists, {len(offsets)} offsets, {len(ts)} timestamps")
    period = sampling_period(ts) if period is None else period
    starts = ts - offsets[:, 0]
    ends = ts + offsets[:, 1]
    degenerate = ends <= starts
    half = period / 4
    starts = np.where(degenerate, ts - half, starts)
    ends = np.where(degenerate, ts + half, ends)
    conf = proposal_confidence(probs, include_background)
    proposals = [
        ActionProposal(float(starts[i]), float(ends[i]), probs[i], float(conf[i]), frame=i,
                       video_id=video_id, degenerate=bool(degenerate[i]))
        for i in range(len(ts))
    ]
    return proposals, probs.argmax(axis=1)
