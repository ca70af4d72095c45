"""Segmentation metrics: framewise accuracy, edit score and segmental F1."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .types import BACKGROUND

F1_THRESHOLDS = (10, 25, 50)


@dataclass(frozen=True)
class SegmentSequence:
    """Run-length encoding of frame labels: (start, end, label) with end exclusive."""

    segments: tuple[tuple[int, int, int], ...]
    length: int

    @classmethod
    def from_labels(cls, labels) -> "SegmentSequence":
        labels = np.asarray(labels)
        if not len(labels):
            return cls((), 0)
        cuts = np.flatnonzero(labels[1:] != labels[:-1]) + 1
        starts = np.concatenate([[0], cuts])
        ends = np.concatenate([cuts, [len(labels)]])
        return cls(tuple((int(s), int(e), int(labels[s])) for s, e in zip(starts, ends)), len(labels))

    def to_labels(self) -> np.ndarray:
        out = np.empty(self.length, dtype=np.int64)
        for s, e, c in self.segments:
            out[s:e] = c
        return out

    def without(self, ignore=(BACKGROUND,)) -> list[tuple[int, int, int]]:
        return [seg for seg in self.segments if seg[2] not in ignore]

    def __len__(self) -> int:
        return len(self.segments)


def _as_sequence(x) -> SegmentSequence:
    return x if isinstance(x, SegmentSequence) else SegmentSequence.from_labels(x)


def framewise_accuracy(pred, gt) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {len(pred)} predicted vs {len(gt)} ground-truth frames")
    if not len(gt):
        return 100.0
    return 100.0 * float(np.mean(pred == gt))


def levenshtein(a, b) -> int:
    a, b = list(a), list(b)
    prev = np.arange(len(b) + 1)
    for i, x in enumerate(a, 1):
        cur = np.empty_like(prev)
        cur[0] = i
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return int(prev[-1])


def edit_score(pred, gt, ignore=(BACKGROUND,)) -> float:
    """100 * (1 - Levenshtein / max length) over segment label sequences."""
    p = [c for _, _, c in _as_sequence(pred).without(ignore)]
    g = [c for _, _, c in _as_sequence(gt).without(ignore)]
    n = max(len(p), len(g))
    if n == 0:
        return 100.0
    return 100.0 * (1.0 - levenshtein(p, g) / n)


def segment_counts(pred, gt, k: float, ignore=(BACKGROUND,)) -> tuple[int, int, int]:
    """(TP, FP, FN) of greedy matching at IoU >= k/100."""
    p = _as_sequence(pred).without(ignore)
    g = _as_sequence(gt).without(ignore)
    used = [False] * len(g)
    tp = 0
    for s, e, c in p:
        best, best_iou = -1, -1.0
        for j, (gs, ge, gc) in enumerate(g):
            if gc != c or used[j]:
                continue
            inter = max(0, min(e, ge) - max(s, gs))
            iou = inter / (max(e, ge) - min(s, gs))
            if iou > best_iou:
                best, best_iou = j, iou
        if best >= 0 and best_iou >= k / 100.0:
            used[best] = True
            tp += 1
    return tp, len(p) - tp, len(g) - tp


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    if tp + fp + fn == 0:
        return 100.0
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 100.0 * 2 * precision * recall / (precision + recall)


def f1_at_k(pred, gt, k: float, ignore=(BACKGROUND,)) -> float:
    return f1_from_counts(*segment_counts(pred, gt, k, ignore))


def video_metrics(pred, gt, ignore=(BACKGROUND,)) -> dict:
    pred, gt = np.asarray(pred), np.asarray(gt)
    out = {"Acc": framewise_accuracy(pred, gt), "Edit": edit_score(pred, gt, ignore)}
    for k in F1_THRESHOLDS:
        out[f"F1@{k}"] = f1_at_k(pred, gt, k, ignore)
    return out


def summarize(preds: dict[str, np.ndarray], gts: dict[str, np.ndarray], ignore=(BACKGROUND,)) -> dict:
    """Acc over all frames pooled; Edit and F1 averaged over videos."""
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise KeyError(f"no prediction for videos: {missing}")
    ids = sorted(gts)
    per_video = {v: video_metrics(preds[v], gts[v], ignore) for v in ids}
    pooled_pred = np.concatenate([np.asarray(preds[v]) for v in ids]) if ids else np.zeros(0)
    pooled_gt = np.concatenate([np.asarray(gts[v]) for v in ids]) if ids else np.zeros(0)
    report = {"Acc": framewise_accuracy(pooled_pred, pooled_gt)}
    for key in ["Edit"] + [f"F1@{k}" for k in F1_THRESHOLDS]:
        report[key] = float(np.mean([m[key] for m in per_video.values()])) if ids else 100.0
    report["per_video"] = per_video
    return report


# -- label files -------------------------------------------------------------

class LabelFileError(ValueError):
    """Unparseable label or mapping file (reports path and byte offset)."""


def read_mapping(path: str | Path) -> dict[str, int]:
    """Lines of '<index> <name>'."""
    path = Path(path)
    names, offset = {}, 0
    for line in path.read_bytes().splitlines(keepends=True):
        text = line.decode("utf-8").strip()
        if text:
            parts = text.split()
            if len(parts) != 2 or not parts[0].isdigit():
                raise LabelFileError(f"{path}: byte {offset}: expected '<index> <name>', got {text!r}")
            names[parts[1]] = int(parts[0])
        offset += len(line)
    return names


def write_mapping(path: str | Path, names: list[str]) -> None:
    Path(path).write_text("".join(f"{i} {n}\n" for i, n in enumerate(names)))


def read_labels(path: str | Path, mapping: dict[str, int]) -> np.ndarray:
    path = Path(path)
    out, offset, unknown = [], 0, None
    for line in path.read_bytes().splitlines(keepends=True):
        name = line.decode("utf-8").strip()
        if name:
            if name not in mapping:
                unknown = unknown or (offset, name)
            else:
                out.append(mapping[name])
        offset += len(line)
    if unknown:
        raise LabelFileError(f"{path}: byte {unknown[0]}: unknown class {unknown[1]!r}")
    return np.array(out, dtype=np.int64)


def write_labels(path: str | Path, labels, names: list[str]) -> None:
    Path(path).write_text("".join(f"{names[int(c)]}\n" for c in labels))


def evaluate_dataset(pred_dir: str | Path, gt_dir: str | Path, mapping: dict[str, int],
                     detection: dict | None = None, out_prefix: str | Path | None = None,
                     ignore_names=("background",)) -> dict:
    """Score every ``<id>.txt`` in gt_dir against pred_dir; optionally write CSV + JSON."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"{d}: not a directory")
    gt_ids = sorted(p.stem for p in gt_dir.glob("*.txt"))
    if not gt_ids:
        raise FileNotFoundError(f"{gt_dir}: no ground-truth label files")
    missing = [v for v in gt_ids if not (pred_dir / f"{v}.txt").exists()]
    if missing:
        raise FileNotFoundError(f"missing predictions for: {', '.join(missing)}")
    ignore = tuple(mapping[n] for n in ignore_names if n in mapping)
    gts = {v: read_labels(gt_dir / f"{v}.txt", mapping) for v in gt_ids}
    preds = {v: read_labels(pred_dir / f"{v}.txt", mapping) for v in gt_ids}
    report = summarize(preds, gts, ignore)
    if detection is not None:
        report["mAP"] = detection["mAP"]
        report["AP"] = {f"{t:.1f}": v for t, v in detection["ap"].items()}
    if out_prefix is not None:
        write_report(report, out_prefix)
    return report


def write_report(report: dict, prefix: str | Path) -> None:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{prefix}.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    cols = ["Acc", "Edit"] + [f"F1@{k}" for k in F1_THRESHOLDS]
    with open(f"{prefix}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        ap_cols = sorted(report.get("AP", {}))
        w.writerow(["video"] + cols + ([f"AP@{t}" for t in ap_cols] + ["mAP"] if ap_cols else []))
        for vid, m in sorted(report["per_video"].items()):
            w.writerow([vid] + [f"{m[c]:.4f}" for c in cols] + ([""] * (len(ap_cols) + 1) if ap_cols else []))
        row = ["ALL"] + [f"{report[c]:.4f}" for c in cols]
        if ap_cols:
            row += [f"{report['AP'][t]:.4f}" for t in ap_cols] + [f"{report['mAP']:.4f}"]
        w.writerow(row)
