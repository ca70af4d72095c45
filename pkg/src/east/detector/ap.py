"""Average precision of temporal detections at several tIoU thresholds."""

from __future__ import annotations

from collections import defaultdict

import numpy as np

from ..types import ActionProposal, SegmentAnnotation

DEFAULT_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)


def tiou(seg: np.ndarray, others: np.ndarray) -> np.ndarray:
    """IoU of one [start, end] against rows of others [N, 2]."""
    others = np.asarray(others, dtype=np.float64).reshape(-1, 2)
    inter = np.clip(np.minimum(seg[1], others[:, 1]) - np.maximum(seg[0], others[:, 0]), 0, None)
    union = (seg[1] - seg[0]) + (others[:, 1] - others[:, 0]) - inter
    return inter / union


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from a confidence-ranked TP indicator."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    tp = np.asarray(tp, dtype=np.float64)
    if not len(tp):
        return 0.0
    ctp = np.cumsum(tp)
    prec = ctp / np.arange(1, len(tp) + 1)
    rec = ctp / n_gt
    mprec = np.concatenate([[0.0], prec, [0.0]])
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mprec = np.maximum.accumulate(mprec[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mprec[steps]))


def match_class(dets: list[tuple[str, float, float, float]], gts: dict[str, np.ndarray],
                threshold: float) -> np.ndarray:
    """Greedy matching of (video, score, start, end) detections to per-video GT [M, 2].

    Detections are visited by descending score (stable); each claims the
    unmatched GT with highest tIoU if it reaches the threshold.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    used = {v: np.zeros(len(g), dtype=bool) for v, g in gts.items()}
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        vid, _, s, e = dets[i]
        if vid not in gts or not len(gts[vid]):
            continue
        ious = tiou(np.array([s, e]), gts[vid])
        ious[used[vid]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= threshold:
            used[vid][j] = True
            tp[rank] = 1.0
    return tp


def detection_ap(proposals: list[ActionProposal], annotations: dict[str, list[SegmentAnnotation]],
                 thresholds=DEFAULT_THRESHOLDS) -> dict:
    """Per-threshold AP (mean over classes with ground truth) and their mean.

    Each proposal is labelled by its most likely action class and scored by
    its confidence. Classes absent from the ground truth are skipped.
    """
    gt_by_class: dict[int, dict[str, list]] = defaultdict(lambda: defaultdict(list))
    for vid, segs in annotations.items():
        for a in segs:
            gt_by_class[a.label][vid].append((a.start, a.end))
    dets_by_class: dict[int, list] = defaultdict(list)
    for p in proposals:
        dets_by_class[p.label].append((p.video_id, p.confidence, p.t_start, p.t_end))

    classes = sorted(gt_by_class)
    per_class = {}
    ap = {}
    for thr in thresholds:
        values = []
        for c in classes:
            gts = {v: np.asarray(s, dtype=np.float64) for v, s in gt_by_class[c].items()}
            n_gt = sum(len(g) for g in gts.values())
            value = interpolated_ap(match_class(dets_by_class.get(c, []), gts, thr), n_gt)
            per_class.setdefault(c, {})[thr] = value
            values.append(value)
        ap[thr] = float(np.mean(values)) if values else float("nan")
    return {"ap": ap, "mAP": float(np.mean(list(ap.values()))) if ap else float("nan"),
            "per_class": per_class, "classes": classes}


def nms(proposals: list[ActionProposal], threshold: float) -> list[ActionProposal]:
    """Class-aware hard suppression: drop proposals overlapping a kept, higher-scored one."""
    groups: dict[tuple[str, int], list[ActionProposal]] = defaultdict(list)
    for p in proposals:
        groups[(p.video_id, p.label)].append(p)
    kept = []
    for group in groups.values():
        group = sorted(group, key=lambda p: -p.confidence)
        iv = np.array([[p.t_start, p.t_end] for p in group])
        alive = np.ones(len(group), dtype=bool)
        for i in range(len(group)):
            if not alive[i]:
                continue
            kept.append(group[i])
            rest = np.flatnonzero(alive[i + 1:]) + i + 1
            if len(rest):
                alive[rest[tiou(iv[i], iv[rest]) > threshold]] = False
    index = {id(p): k for k, p in enumerate(proposals)}
    return sorted(kept, key=lambda p: index[id(p)])
