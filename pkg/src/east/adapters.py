"""Backbone adapters: Standard, TIA and Contract-Expand (CEA), plus cost accounting.

Each adapter maps features ``x`` of shape [B, C, T, H, W] to ``x + alpha * up(...)``.
Letting c = C // r:

* standard: up(gelu(down(x)))
* tia:      up(mid(dwconv_T(gelu(down(x)))) + gelu(down(x))), dwconv at every (h, w)
* cea:      like tia, but the depthwise conv and mid projection run on a pooled
            (h0, w0) grid; results are broadcast back to H x W before the inner residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .tensor import Rng, Tensor, broadcast_to, dwconv1d, gelu, linear, mean_pool, reshape, transpose

KINDS = ("none", "standard", "tia", "cea")


class AdapterParams(nn.Module):
    """Weights of one adapter. ``w_mid`` and ``dw`` are None for the standard kind."""

    def __init__(self, kind: str, dim: int, r: int = 4, k: int = 3, pooled: tuple[int, int] = (1, 1)):
        if kind not in KINDS[1:]:
            raise ValueError(f"unknown adapter kind {kind!r}")
        if r < 1 or dim % r:
            raise ValueError(f"channel count {dim} not divisible by ratio {r}")
        if k % 2 == 0:
            raise ValueError(f"temporal kernel size must be odd, got {k}")
        self.kind, self.dim, self.r, self.k = kind, dim, r, k
        self.pooled = tuple(pooled)
        c = dim // r
        self.w_down = nn.zeros(dim, c)
        self.w_up = nn.zeros(c, dim)
        self.alpha = nn.ones()
        if kind != "standard":
            self.w_mid = nn.zeros(c, c)
            self.dw = nn.zeros(c, k)

    @property
    def hidden(self) -> int:
        return self.dim // self.r

    @classmethod
    def init(cls, kind: str, dim: int, rng: Rng, r: int = 4, k: int = 3,
             pooled: tuple[int, int] = (1, 1)) -> "AdapterParams":
        """Trainable initialization: up-projection zero and alpha one, so the
        adapter starts as an exact identity; inner weights are random because an
        all-zero down/up pair has identically zero gradients."""
        p = cls(kind, dim, r, k, pooled)
        c = p.hidden
        p.w_down = nn.uniform_init(rng.child(0), (dim, c), dim)
        if kind != "standard":
            p.w_mid = nn.uniform_init(rng.child(1), (c, c), c)
            p.dw = nn.uniform_init(rng.child(2), (c, k), k)
        return p


CeaParams = AdapterParams


def _check(x: Tensor, p: AdapterParams, kind: str) -> None:
    if p.kind != kind:
        raise ValueError(f"{kind} adapter given {p.kind} parameters")
    if x.ndim != 5 or x.shape[1] != p.dim:
        raise ValueError(f"expected [B, {p.dim}, T, H, W] features, got {x.shape}")


def _temporal_dw(h: Tensor, kernel: Tensor) -> Tensor:
    """Depthwise conv over T of a channel-last [B, T, H, W, c] tensor."""
    b, t, hh, ww, c = h.shape
    seq = reshape(transpose(h, (0, 2, 3, 4, 1)), (b * hh * ww, c, t))
    out = dwconv1d(seq, kernel)
    return transpose(reshape(out, (b, hh, ww, c, t)), (0, 4, 1, 2, 3))


def contract_hw(h: Tensor, grid: tuple[int, int]) -> Tensor:
    """Average-pool a channel-last [B, T, H, W, c] tensor to [B, T, h0, w0, c]."""
    b, t, hh, ww, c = h.shape
    h0, w0 = grid
    if hh % h0 or ww % w0:
        raise ValueError(f"spatial extent {hh}x{ww} not divisible by pooled grid {h0}x{w0}")
    blocks = reshape(h, (b, t, h0, hh // h0, w0, ww // w0, c))
    return mean_pool(blocks, (3, 5))


def expand_hw(h: Tensor, size: tuple[int, int]) -> Tensor:
    """Copy each pooled cell back over its block of the H x W grid."""
    b, t, h0, w0, c = h.shape
    hh, ww = size
    cells = reshape(h, (b, t, h0, 1, w0, 1, c))
    return reshape(broadcast_to(cells, (b, t, h0, hh // h0, w0, ww // w0, c)), (b, t, hh, ww, c))


def adapter_delta(x_cl: Tensor, p: AdapterParams) -> Tensor:
    """Adapter residual ``alpha * up(...)`` for channel-last x: [B, T, H, W, C]."""
    h = gelu(linear(x_cl, p.w_down))
    if p.kind == "tia":
        h = linear(_temporal_dw(h, p.dw), p.w_mid) + h
    elif p.kind == "cea":
        _, _, hh, ww, _ = h.shape
        pooled = contract_hw(h, p.pooled)
        mixed = linear(_temporal_dw(pooled, p.dw), p.w_mid)
        h = expand_hw(mixed, (hh, ww)) + h
    return linear(h, p.w_up) * p.alpha


def _apply(x: Tensor, p: AdapterParams) -> Tensor:
    delta = adapter_delta(transpose(x, (0, 2, 3, 4, 1)), p)
    return transpose(delta, (0, 4, 1, 2, 3)) + x


def standard_forward(x: Tensor, p: AdapterParams) -> Tensor:
    _check(x, p, "standard")
    return _apply(x, p)


def tia_forward(x: Tensor, p: AdapterParams) -> Tensor:
    _check(x, p, "tia")
    return _apply(x, p)


def cea_forward(x: Tensor, p: AdapterParams) -> Tensor:
    _check(x, p, "cea")
    return _apply(x, p)


FORWARDS = {"standard": standard_forward, "tia": tia_forward, "cea": cea_forward}


# -- cost accounting ----------------------------------------------------------

@dataclass(frozen=True)
class BackboneDims:
    """Transformer geometry used for the backbone share of a cost report."""

    depth: int
    mlp_ratio: int = 4
    adapters_per_block: int = 1


@dataclass
class FlopReport:
    """Multiply-add counts. ``gflops`` reports 2 x multiply-adds / 1e9."""

    kind: str
    stages: dict[str, int] = field(default_factory=dict)
    num_adapters: int = 1
    backbone_macs: int = 0

    @property
    def adapter_macs(self) -> int:
        return sum(self.stages.values())

    @property
    def total_adapter_macs(self) -> int:
        return self.adapter_macs * self.num_adapters

    @property
    def total_macs(self) -> int:
        return self.total_adapter_macs + self.backbone_macs

    @property
    def gflops(self) -> float:
        return 2 * self.total_macs / 1e9

    @property
    def adapter_gflops(self) -> float:
        return 2 * self.total_adapter_macs / 1e9


def count_flops(kind: str, C: int, r: int, k: int, T: int, H: int, W: int,
                backbone_dims: BackboneDims | None = None, B: int = 1,
                pooled: tuple[int, int] = (1, 1)) -> FlopReport:
    """Closed-form multiply-add counts of one adapter (times the adapter count).

    Elementwise additions count as one multiply-add. Pooling is counted as the
    additions needed to sum each block; the 1/n factor folds into the depthwise
    kernel, and expand is a copy. Activations are not counted.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown adapter kind {kind!r}")
    if min(C, r, k, T, H, W, B) < 1:
        raise ValueError("extents must be positive")
    c = C // r
    n = B * T * H * W
    stages: dict[str, int] = {}
    if kind != "none":
        stages["down"] = n * C * c
        if kind == "tia":
            stages["dwconv"] = n * c * k
            stages["mid"] = n * c * c
            stages["inner_residual"] = n * c
        elif kind == "cea":
            h0, w0 = pooled
            m = B * T * h0 * w0
            stages["contract"] = (n - m) * c
            stages["dwconv"] = m * c * k
            stages["mid"] = m * c * c
            stages["inner_residual"] = n * c
        stages["up"] = n * c * C
        stages["scale_residual"] = n * C
    backbone = 0
    count = 1
    if backbone_dims is not None:
        tokens = T * H * W
        per_block = (4 * tokens * C * C
                     + 2 * tokens * tokens * C
                     + 2 * tokens * C * C * backbone_dims.mlp_ratio)
        backbone = B * backbone_dims.depth * per_block
        count = backbone_dims.depth * backbone_dims.adapters_per_block
    return FlopReport(kind=kind, stages=stages, num_adapters=count if kind != "none" else 0,
                      backbone_macs=backbone)


def count_params(kind: str, C: int, r: int, k: int) -> int:
    """Exact parameter count of one adapter (no biases)."""
    if kind == "none":
        return 0
    c = C // r
    base = 2 * C * c + 1
    if kind == "standard":
        return base
    return base + c * c + c * k


def flop_table(C: int, r: int, k: int, T: int, H: int, W: int,
               backbone_dims: BackboneDims | None = None, pooled: tuple[int, int] = (1, 1)) -> list[dict]:
    rows = []
    for kind in ("standard", "tia", "cea"):
        rep = count_flops(kind, C, r, k, T, H, W, backbone_dims, pooled=pooled)
        rows.append({
            "kind": kind,
            "adapter_gflops": rep.adapter_gflops,
            "total_gflops": rep.gflops,
            "params_per_adapter": count_params(kind, C, r, k),
        })
    return rows
