"""Anchor-free detector over sampled frames.

A shallow conv projection feeds a transformer at full sampled rate; further
pyramid levels are produced by stride-2 depthwise convolutions, each followed
by its own transformer block. Classification, regression and level-gate heads
share weights across levels. Every level is read back at each source frame
(nearest cell centre) and the per-level predictions are fused with a softmax
over the gate logits, so the detector emits exactly one prediction per
sampled frame whatever the number of levels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import nn
from ..layers import Block
from ..tensor import (Rng, Tensor, conv1d, dwconv1d, relu, reshape, softmax, softplus, stack, tsum,
                      transpose)


@dataclass
class DetectorConfig:
    in_dim: int
    num_classes: int            # including background
    dim: int = 64
    heads: int = 4
    levels: int = 4
    mlp_ratio: int = 2
    kernel: int = 3
    # regression ranges: level l handles max(d_s, d_e) in [base*2^(l-1), base*2^l) sampled periods
    range_base: float = 4.0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.levels < 1:
            raise ValueError("need at least one pyramid level")


@dataclass
class FeaturePyramid:
    levels: list[Tensor]          # [B, D, T_l]
    strides: list[int]            # in sampled frames
    timestamps: np.ndarray        # [T'] of the source frames
    period: float                 # seconds between sampled frames

    def cell_timestamps(self, level: int) -> np.ndarray:
        """Timestamp of each cell: that of its centre source frame."""
        n = self.levels[level].shape[2]
        return self.timestamps[np.arange(n) * self.strides[level]]

    def nearest_cell(self, level: int, t: np.ndarray) -> np.ndarray:
        ts = self.cell_timestamps(level)
        return np.abs(np.asarray(t)[..., None] - ts).argmin(axis=-1)


@dataclass
class Predictions:
    logits: Tensor         # [B, T', A]
    probs: Tensor          # [B, T', A]
    offsets: Tensor        # [B, T', 2] seconds (start, end), nonnegative
    gate_logits: Tensor    # [B, T', L]

    @property
    def num_frames(self) -> int:
        return self.logits.shape[1]


def regression_upper_bounds(levels: int, period: float, base: float = 4.0) -> np.ndarray:
    """Upper end (seconds, exclusive) of each level's regression range; the last is open."""
    hi = base * period * 2.0 ** np.arange(levels)
    hi[-1] = np.inf
    return hi


def level_extent(t: int, level: int) -> int:
    return -(-t // (2 ** level))


def max_levels(t: int) -> int:
    return int(np.floor(np.log2(max(t, 1)))) + 1


def frame_to_cell(t: int, level: int) -> np.ndarray:
    """Nearest cell (by centre frame) at ``level`` for each of t source frames."""
    stride = 2 ** level
    idx = np.floor(np.arange(t) / stride + 0.5).astype(np.int64)
    return np.minimum(idx, level_extent(t, level) - 1)


class ConvHead(nn.Module):
    def __init__(self, dim: int, out: int, k: int, rng: Rng):
        self.w1 = nn.uniform_init(rng.child(0), (dim, dim, k), dim * k)
        self.b1 = nn.zeros(dim)
        self.w2 = nn.uniform_init(rng.child(1), (out, dim, k), dim * k)
        self.b2 = nn.zeros(out)

    def __call__(self, z: Tensor) -> Tensor:
        return conv1d(relu(conv1d(z, self.w1, self.b1)), self.w2, self.b2)


class Detector(nn.Module):
    def __init__(self, cfg: DetectorConfig, rng: Rng):
        self.cfg = cfg
        d, k = cfg.dim, cfg.kernel
        self.proj1_w = nn.uniform_init(rng.child(0), (d, cfg.in_dim, k), cfg.in_dim * k)
        self.proj1_b = nn.zeros(d)
        self.proj2_w = nn.uniform_init(rng.child(1), (d, d, k), d * k)
        self.proj2_b = nn.zeros(d)
        self.down = [nn.uniform_init(rng.child(10 + i), (d, 3), 3) for i in range(cfg.levels - 1)]
        self.blocks = [Block(d, cfg.mlp_ratio, rng.child(20 + i)) for i in range(cfg.levels)]
        self.cls_head = ConvHead(d, cfg.num_classes, k, rng.child(2))
        self.reg_head = ConvHead(d, 2, k, rng.child(3))
        self.gate_w = nn.zeros(1, d, k)
        # last classifier layer starts at zero: uniform class distributions
        self.cls_head.w2 = nn.zeros(cfg.num_classes, d, k)

    def encode(self, x: Tensor) -> Tensor:
        """[B, T', in_dim] -> [B, D, T']."""
        h = transpose(x, (0, 2, 1))
        h = relu(conv1d(h, self.proj1_w, self.proj1_b))
        return relu(conv1d(h, self.proj2_w, self.proj2_b))

    def build_pyramid(self, x: Tensor, timestamps: np.ndarray, period: float | None = None) -> FeaturePyramid:
        cfg = self.cfg
        t = x.shape[1]
        if t < 2 ** (cfg.levels - 1):
            raise ValueError(f"{t} sampled frames is too few for {cfg.levels} levels "
                             f"(at most {max_levels(t)} levels feasible)")
        timestamps = np.asarray(timestamps, dtype=np.float64)
        if len(timestamps) != t:
            raise ValueError(f"{len(timestamps)} timestamps for {t} frames")
        if period is None:
            period = float(np.median(np.diff(timestamps))) if t > 1 else 1.0
        h = self.encode(x)
        levels = []
        for i, blk in enumerate(self.blocks):
            if i > 0:
                h = dwconv1d(h, self.down[i - 1], stride=2)
            seq = blk(transpose(h, (0, 2, 1)), cfg.heads)
            h = transpose(seq, (0, 2, 1))
            levels.append(h)
        return FeaturePyramid(levels, [2 ** i for i in range(cfg.levels)], timestamps, period)

    def predict(self, pyr: FeaturePyramid) -> Predictions:
        t = pyr.levels[0].shape[2]
        cls, reg, gate = [], [], []
        for level, z in enumerate(pyr.levels):
            idx = frame_to_cell(t, level)
            scale = pyr.strides[level] * pyr.period
            cls.append(self.cls_head(z)[:, :, idx])
            reg.append(softplus(self.reg_head(z)[:, :, idx]) * scale)
            gate.append(conv1d(z, self.gate_w)[:, :, idx])
        gate_logits = stack([g[:, 0, :] for g in gate], axis=-1)          # [B, T', L]
        weights = softmax(gate_logits, axis=-1)
        logits = _fuse(cls, weights)
        offsets = _fuse(reg, weights)
        return Predictions(logits=logits, probs=softmax(logits, axis=-1), offsets=offsets,
                           gate_logits=gate_logits)

    def __call__(self, x: Tensor, timestamps: np.ndarray, period: float | None = None) -> Predictions:
        return self.predict(self.build_pyramid(x, timestamps, period))


def _fuse(per_level: list[Tensor], weights: Tensor) -> Tensor:
    """Weighted sum over levels of [B, K, T'] maps -> [B, T', K]."""
    stacked = stack([transpose(p, (0, 2, 1)) for p in per_level], axis=-1)  # [B, T', K, L]
    b, t, n = weights.shape
    return tsum(stacked * reshape(weights, (b, t, 1, n)), axis=-1)
