"""Proposal aggregation onto the full-rate frame grid and multi-stage TCN refinement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .tensor import (Tensor, clamp, conv1d, log, log_softmax, mean, relu, reshape, softmax, tsum,
                     transpose, where)
from .types import BACKGROUND, ActionProposal, FrameLabeling

FALLBACKS = ("uniform", "background")


def coverage_matrix(starts: np.ndarray, ends: np.ndarray, timestamps: np.ndarray) -> np.ndarray:
    """[T, N] indicator of start <= t < end."""
    t = np.asarray(timestamps, dtype=np.float64)[:, None]
    return ((t >= np.asarray(starts)[None]) & (t < np.asarray(ends)[None])).astype(np.float64)


def canonical_order(starts, ends, dists):
    """Sort proposals by content so floating-point sums do not depend on input order."""
    starts = np.asarray(starts, dtype=np.float64)
    ends = np.asarray(ends, dtype=np.float64)
    dists = np.asarray(dists, dtype=np.float64)
    if not len(starts):
        return starts, ends, dists
    keys = [dists[:, j] for j in range(dists.shape[1] - 1, -1, -1)] + [ends, starts]
    order = np.lexsort(keys)
    return starts[order], ends[order], dists[order]


def _fallback_row(a: int, fallback: str) -> np.ndarray:
    if fallback not in FALLBACKS:
        raise ValueError(f"fallback must be one of {FALLBACKS}, got {fallback!r}")
    if fallback == "uniform":
        return np.full(a, 1.0 / a)
    row = np.zeros(a)
    row[BACKGROUND] = 1.0
    return row


def aggregate_arrays(starts: np.ndarray, ends: np.ndarray, dists: np.ndarray, timestamps: np.ndarray,
                     fallback: str = "uniform") -> np.ndarray:
    """Sum the distributions of covering proposals per frame and normalise -> [T, A]."""
    starts, ends, dists = canonical_order(starts, ends, dists)
    cover = coverage_matrix(starts, ends, timestamps)
    mass = cover @ dists
    total = mass.sum(axis=1, keepdims=True)
    empty = total[:, 0] <= 0
    out = mass / np.where(total > 0, total, 1.0)
    out[empty] = _fallback_row(dists.shape[1], fallback)
    return out


def aggregate(proposals: list[ActionProposal], T: int, fps: float, fallback: str = "uniform",
              num_classes: int | None = None) -> FrameLabeling:
    if T < 1 or fps <= 0:
        raise ValueError(f"need T >= 1 and fps > 0, got T={T}, fps={fps}")
    ts = (np.arange(T) + 0.5) / fps
    if not proposals:
        if num_classes is None:
            raise ValueError("num_classes needed to aggregate an empty proposal set")
        return FrameLabeling(fps, dists=np.tile(_fallback_row(num_classes, fallback), (T, 1)), timestamps=ts)
    starts = np.array([p.t_start for p in proposals])
    ends = np.array([p.t_end for p in proposals])
    dists = np.stack([p.dist for p in proposals])
    return FrameLabeling(fps, dists=aggregate_arrays(starts, ends, dists, ts, fallback), timestamps=ts)


def aggregate_tensor(dists: Tensor, starts: np.ndarray, ends: np.ndarray, timestamps: np.ndarray,
                     fallback: str = "uniform") -> Tensor:
    """Differentiable in the class distributions. dists: [N, A] -> [T, A]."""
    a = dists.shape[1]
    cover = coverage_matrix(starts, ends, timestamps)
    covered = cover.sum(axis=1) > 0
    mass = Tensor(cover.astype(dists.dtype)) @ dists
    mass_sum = tsum(mass, axis=1, keepdims=True)
    # proposal distributions sum to one, so normalising by the coverage count
    # equals normalising by the summed mass; dividing by the latter keeps rows
    # exact even for slightly unnormalised inputs
    rows = mass / where(covered[:, None], mass_sum, Tensor(np.ones((len(covered), 1), dists.dtype)))
    fill = np.broadcast_to(_fallback_row(a, fallback).astype(dists.dtype), (len(covered), a))
    return where(covered[:, None], rows, Tensor(np.ascontiguousarray(fill)))


# -- TCN ---------------------------------------------------------------------

@dataclass
class TcnConfig:
    num_classes: int
    stages: int = 3
    layers: int = 10
    channels: int = 64
    kernel: int = 3
    eps: float = 1e-6


class DilatedResidual(nn.Module):
    def __init__(self, channels: int, kernel: int, rng):
        self.w_dil = nn.uniform_init(rng.child(0), (channels, channels, kernel), channels * kernel)
        self.b_dil = nn.zeros(channels)
        self.w_out = nn.uniform_init(rng.child(1), (channels, channels, 1), channels)
        self.b_out = nn.zeros(channels)

    def __call__(self, h: Tensor, dilation: int) -> Tensor:
        z = relu(conv1d(h, self.w_dil, self.b_dil, dilation=dilation))
        return h + conv1d(z, self.w_out, self.b_out)


class Stage(nn.Module):
    """1x1 in, dilated residual stack, 1x1 classifier added to the input log-probabilities."""

    def __init__(self, cfg: TcnConfig, rng):
        a, c = cfg.num_classes, cfg.channels
        self.w_in = nn.uniform_init(rng.child(0), (c, a, 1), a)
        self.b_in = nn.zeros(c)
        self.layers = [DilatedResidual(c, cfg.kernel, rng.child(10 + j)) for j in range(cfg.layers)]
        self.w_cls = nn.zeros(a, c, 1)
        self.b_cls = nn.zeros(a)

    def __call__(self, probs: Tensor, logp: Tensor) -> Tensor:
        """probs, logp: [B, A, T] -> logits [B, A, T]."""
        h = conv1d(probs, self.w_in, self.b_in)
        for j, layer in enumerate(self.layers):
            h = layer(h, dilation=2 ** j)
        return logp + conv1d(h, self.w_cls, self.b_cls)


class Tcn(nn.Module):
    def __init__(self, cfg: TcnConfig, rng):
        self.cfg = cfg
        self.stages = [Stage(cfg, rng.child(s)) for s in range(cfg.stages)]

    def __call__(self, dists: Tensor) -> list[Tensor]:
        """dists: [B, T, A] distributions -> per-stage logits, each [B, T, A]."""
        probs = transpose(dists, (0, 2, 1))
        logp = log(probs + self.cfg.eps)
        outputs = []
        for stage in self.stages:
            logits = stage(probs, logp)
            outputs.append(transpose(logits, (0, 2, 1)))
            probs = softmax(logits, axis=1)
            logp = log_softmax(logits, axis=1)
        return outputs


def refine(agg: FrameLabeling | np.ndarray, tcn: Tcn) -> tuple[list[np.ndarray], np.ndarray]:
    """Run the TCN on one aggregated labeling; returns per-stage logits [T, A] and the final labels."""
    dists = agg.dists if isinstance(agg, FrameLabeling) else np.asarray(agg)
    if dists is None:
        raise ValueError("refinement needs soft distributions")
    x = Tensor(dists[None].astype(tcn.stages[0].w_in.dtype))
    outs = [o.data[0] for o in tcn(x)]
    return outs, outs[-1].argmax(axis=1)


def refinement_loss(stage_logits: list[Tensor], labels: np.ndarray, smooth_weight: float = 0.15,
                    tau: float = 4.0, detach_previous: bool = False) -> Tensor:
    """Sum over stages of frame-mean cross-entropy plus truncated-MSE smoothing.

    stage_logits: each [B, T, A]; labels: [B, T] or [T].
    """
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[None]
    total = None
    for logits in stage_logits:
        b, t, a = logits.shape
        if labels.shape != (b, t):
            raise ValueError(f"labels {labels.shape} vs logits {logits.shape}")
        logp = log_softmax(logits, axis=-1)
        flat = reshape(logp, (b * t, a))
        ce = -mean(flat[np.arange(b * t), labels.reshape(-1)])
        term = ce
        if t > 1 and smooth_weight:
            prev = logp[:, :-1]
            if detach_previous:
                prev = prev.detach()
            diff = logp[:, 1:] - prev
            term = term + smooth_weight * mean(clamp(diff * diff, 0.0, tau * tau))
        total = term if total is None else total + term
    return total
