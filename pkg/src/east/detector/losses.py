"""Detection losses: focal classification plus 1-D distance-IoU regression."""

from __future__ import annotations

import numpy as np

from ..tensor import Tensor, clamp, exp, log_softmax, maximum, minimum, stack, tsum
from ..types import BACKGROUND
from .model import Predictions
from .targets import RegressionTarget

INDICATORS = ("target", "predicted")


def focal_loss(logits: Tensor, labels: np.ndarray, gamma: float = 2.0) -> Tensor:
    """Per-frame focal loss. logits: [T, A]; labels: [T] -> [T]."""
    logp = log_softmax(logits, axis=-1)
    rows = np.arange(len(labels))
    logp_y = logp[rows, np.asarray(labels)]
    weight = (1.0 - exp(logp_y)) ** gamma if gamma else 1.0
    return -(weight * logp_y)


def diou_loss_1d(pred: Tensor, gt: Tensor) -> Tensor:
    """1 - IoU + (centre gap / enclosing length)^2 for intervals [N, 2] -> [N]."""
    ps, pe = pred[:, 0], pred[:, 1]
    gs, ge = gt[:, 0], gt[:, 1]
    inter = clamp(minimum(pe, ge) - maximum(ps, gs), lo=0.0)
    union = (pe - ps) + (ge - gs) - inter
    iou = inter / union
    gap = (ps + pe - gs - ge) * 0.5
    enclosing = maximum(pe, ge) - minimum(ps, gs)
    return 1.0 - iou + (gap * gap) / (enclosing * enclosing)


def detector_loss(preds: Predictions, targets: list[RegressionTarget], timestamps: list[np.ndarray],
                  lambda_r: float = 1.0, gamma: float = 2.0, indicator: str = "target",
                  level_weight: float = 0.0, parts: dict | None = None) -> Tensor:
    """Focal + lambda_r * DIoU over action frames, normalised by the action-frame count.

    ``indicator`` picks which frames count as actions: those with a
    non-background target ("target") or with a non-background argmax
    prediction ("predicted"). ``level_weight`` adds a cross-entropy pulling
    the level gate toward each action frame's assigned level.
    """
    if lambda_r < 0:
        raise ValueError(f"lambda_r must be nonnegative, got {lambda_r}")
    if indicator not in INDICATORS:
        raise ValueError(f"indicator must be one of {INDICATORS}, got {indicator!r}")
    b = preds.logits.shape[0]
    if len(targets) != b or len(timestamps) != b:
        raise ValueError(f"{b} predictions but {len(targets)} targets / {len(timestamps)} timestamp arrays")
    total_cls, total_reg, total_lvl = 0.0, 0.0, 0.0
    n_pos = 0
    for i, (tgt, ts) in enumerate(zip(targets, timestamps)):
        if len(tgt) != preds.num_frames:
            raise ValueError(f"target length {len(tgt)} != {preds.num_frames} predicted frames")
        total_cls = total_cls + tsum(focal_loss(preds.logits[i], tgt.labels, gamma))
        if indicator == "target":
            active = tgt.labels != BACKGROUND
        else:
            active = preds.probs.data[i].argmax(axis=1) != BACKGROUND
        idx = np.flatnonzero(active)
        n_pos += len(idx)
        if len(idx) and lambda_r > 0:
            t = Tensor(np.asarray(ts, dtype=preds.offsets.dtype)[idx])
            off = preds.offsets[i][idx]
            pred_iv = stack([t - off[:, 0], t + off[:, 1]], axis=1)
            gt_iv = Tensor(tgt.intervals[idx].astype(preds.offsets.dtype))
            total_reg = total_reg + tsum(diou_loss_1d(pred_iv, gt_iv))
        if level_weight > 0 and tgt.inside.any():
            lv = np.flatnonzero(tgt.inside)
            logp = log_softmax(preds.gate_logits[i][lv], axis=-1)
            total_lvl = total_lvl - tsum(logp[np.arange(len(lv)), tgt.level[lv]])
    denom = float(max(n_pos, 1))
    loss = (total_cls + lambda_r * total_reg + level_weight * total_lvl) / denom
    if parts is not None:
        parts.update(cls=_value(total_cls) / denom, reg=_value(total_reg) / denom,
                     level=_value(total_lvl) / denom, positives=n_pos)
    return loss


def _value(x) -> float:
    return float(x.item()) if isinstance(x, Tensor) else float(x)
