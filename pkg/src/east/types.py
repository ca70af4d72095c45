"""Records shared across the pipeline.

Class index 0 is background everywhere; action classes are 1..A-1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BACKGROUND = 0


@dataclass(frozen=True)
class SegmentAnnotation:
    """Ground-truth action instance, boundaries in seconds (half-open)."""

    start: float
    end: float
    label: int

    def __post_init__(self):
        if not self.end > self.start:
            raise ValueError(f"segment end {self.end} must exceed start {self.start}")


@dataclass
class ActionProposal:
    t_start: float
    t_end: float
    dist: np.ndarray
    confidence: float
    frame: int = -1
    video_id: str = ""
    degenerate: bool = False

    @property
    def label(self) -> int:
        """Most likely action class (background excluded)."""
        return int(np.argmax(self.dist[1:])) + 1

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "t_start": float(self.t_start),
            "t_end": float(self.t_end),
            "dist": [float(v) for v in self.dist],
            "confidence": float(self.confidence),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ActionProposal":
        return cls(t_start=float(obj["t_start"]), t_end=float(obj["t_end"]),
                   dist=np.asarray(obj["dist"], dtype=np.float64), confidence=float(obj["confidence"]),
                   video_id=obj.get("video_id", ""))


def proposal_confidence(dist: np.ndarray, include_background: bool = False) -> np.ndarray:
    """Maximum class score; background is ignored unless asked for."""
    dist = np.asarray(dist)
    return dist.max(axis=-1) if include_background else dist[..., 1:].max(axis=-1)


@dataclass
class FrameLabeling:
    """Per-frame class distributions (soft) or hard labels at ``fps``."""

    fps: float
    dists: np.ndarray | None = None     # [T, A]
    labels: np.ndarray | None = None    # [T]
    timestamps: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.dists) if self.dists is not None else len(self.labels)
        if self.timestamps is None:
            self.timestamps = (np.arange(n) + 0.5) / self.fps

    def __len__(self) -> int:
        return len(self.timestamps)

    def hard(self) -> np.ndarray:
        return self.labels if self.labels is not None else np.argmax(self.dists, axis=1)


def check_non_overlapping(annotations: list[SegmentAnnotation]) -> list[SegmentAnnotation]:
    ordered = sorted(annotations, key=lambda a: a.start)
    for prev, cur in zip(ordered, ordered[1:]):
        if cur.start < prev.end:
            raise ValueError(f"overlapping annotations: [{prev.start}, {prev.end}) and [{cur.start}, {cur.end})")
    return ordered
