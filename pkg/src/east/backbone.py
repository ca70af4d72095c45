"""Small spatiotemporal transformer standing in for a large video backbone.

Clips of shape [B, 3, Tclip, H, W] are cut into non-overlapping tubelets of
``patch_t`` frames by ``patch_s x patch_s`` pixels, embedded to ``dim``
channels, and processed by pre-norm transformer blocks over all T*H'*W'
tokens. Adapters sit between blocks and see features as [B, C, T, H', W'].

Also home to the binary frame-feature format used to bypass the backbone.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .adapters import KINDS, AdapterParams, adapter_delta
from .layers import Block
from .tensor import Rng, Tensor, linear, mean_pool, reshape, transpose


@dataclass
class BackboneConfig:
    depth: int = 4
    dim: int = 64
    heads: int = 4
    patch_t: int = 16
    patch_s: int = 10
    mlp_ratio: int = 2
    adapter_kind: str = "none"
    adapter_r: int = 4
    adapter_k: int = 3
    pooled: tuple[int, int] = (1, 1)
    # block indices followed by an adapter; None means every block
    adapter_blocks: list[int] | None = None
    # "block": after the whole block; "attention": between attention and MLP
    adapter_position: str = "block"

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.adapter_kind not in KINDS:
            raise ValueError(f"unknown adapter kind {self.adapter_kind!r}")
        if self.adapter_position not in ("block", "attention"):
            raise ValueError(f"unknown adapter position {self.adapter_position!r}")
        self.pooled = tuple(self.pooled)

    @property
    def adapted_blocks(self) -> list[int]:
        if self.adapter_kind == "none":
            return []
        return list(range(self.depth)) if self.adapter_blocks is None else sorted(self.adapter_blocks)


@dataclass
class ClipBatch:
    values: np.ndarray                      # [B, 3, Tclip, H, W], pixels in [0, 1]
    timestamps: np.ndarray = field(default=None)  # seconds per clip frame

    def __post_init__(self):
        if self.values.ndim != 5 or self.values.shape[1] != 3:
            raise ValueError(f"clip must be [B, 3, T, H, W], got {self.values.shape}")
        if self.timestamps is not None and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("clip timestamps must be strictly increasing")


class ToyBackbone(nn.Module):
    """Frozen-by-default transformer with optional adapters between blocks."""

    def __init__(self, cfg: BackboneConfig, grid: tuple[int, int], rng: Rng):
        self.cfg = cfg
        self.grid = tuple(grid)
        patch = 3 * cfg.patch_t * cfg.patch_s * cfg.patch_s
        self.w_embed = nn.uniform_init(rng.child(0), (patch, cfg.dim), patch)
        self.b_embed = nn.zeros(cfg.dim)
        self.pos_hw = nn.param(rng.child(1).normal((grid[0] * grid[1], cfg.dim), scale=0.02))
        self.blocks = [Block(cfg.dim, cfg.mlp_ratio, rng.child(100 + i)) for i in range(cfg.depth)]
        self.adapters: list[AdapterParams] = [
            AdapterParams.init(cfg.adapter_kind, cfg.dim, rng.child(200 + i), cfg.adapter_r,
                               cfg.adapter_k, cfg.pooled)
            for i in cfg.adapted_blocks
        ]

    def backbone_parameters(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters() if not n.startswith("adapters.")}

    def adapter_parameters(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters() if n.startswith("adapters.")}

    def set_frozen(self, frozen: bool) -> None:
        for p in self.backbone_parameters().values():
            p.requires_grad = not frozen

    def patch_embed(self, clip: ClipBatch) -> Tensor:
        """[B, 3, Tclip, H, W] -> tokens [B, C, T, H', W']."""
        return transpose(self._embed(clip), (0, 4, 1, 2, 3))

    def _embed(self, clip: ClipBatch) -> Tensor:
        cfg = self.cfg
        b, _, tc, hh, ww = clip.values.shape
        w, p = cfg.patch_t, cfg.patch_s
        if tc % w or hh % p or ww % p:
            raise ValueError(f"clip extents {(tc, hh, ww)} not divisible by patch sizes {(w, p, p)}")
        t, h2, w2 = tc // w, hh // p, ww // p
        if (h2, w2) != self.grid:
            raise ValueError(f"clip token grid {(h2, w2)} != backbone grid {self.grid}")
        vals = np.asarray(clip.values, dtype=self.w_embed.dtype)
        patches = vals.reshape(b, 3, t, w, h2, p, w2, p).transpose(0, 2, 4, 6, 1, 3, 5, 7)
        patches = patches.reshape(b, t, h2, w2, 3 * w * p * p)
        return linear(Tensor(patches), self.w_embed, self.b_embed)  # channel-last

    def forward_with_adapters(self, tokens: Tensor, freeze_backbone: bool = True,
                              adapters: list[AdapterParams] | None = None) -> Tensor:
        """tokens: [B, C, T, H', W'] -> adapted features, same shape."""
        x = self._blocks(transpose(tokens, (0, 2, 3, 4, 1)), freeze_backbone, adapters)
        return transpose(x, (0, 4, 1, 2, 3))

    def _blocks(self, x: Tensor, freeze_backbone: bool, adapters: list[AdapterParams] | None) -> Tensor:
        cfg = self.cfg
        adapters = self.adapters if adapters is None else adapters
        placed = cfg.adapted_blocks
        if len(adapters) != len(placed) or any(a.kind != cfg.adapter_kind or a.dim != cfg.dim for a in adapters):
            raise ValueError(f"adapter parameters do not match config (kind={cfg.adapter_kind}, "
                             f"blocks={placed}, got {len(adapters)} adapters)")
        slot = dict(zip(placed, adapters))
        self.set_frozen(freeze_backbone)
        b, t, h2, w2, c = x.shape
        x = x + reshape(self.pos_hw, (1, 1, h2, w2, c))
        for i, blk in enumerate(self.blocks):
            seq = reshape(x, (b, t * h2 * w2, c))
            seq = blk.attend(seq, cfg.heads)
            if i in slot and cfg.adapter_position == "attention":
                seq = reshape(_adapt(reshape(seq, (b, t, h2, w2, c)), slot[i]), (b, t * h2 * w2, c))
            seq = blk.mlp(seq)
            x = reshape(seq, (b, t, h2, w2, c))
            if i in slot and cfg.adapter_position == "block":
                x = _adapt(x, slot[i])
        return x

    def features(self, clip: ClipBatch, freeze_backbone: bool = True) -> Tensor:
        """Clip -> per-window features [B, T, C] (spatial mean of the last block)."""
        x = self._blocks(self._embed(clip), freeze_backbone, None)
        return mean_pool(x, (2, 3))


def _adapt(x_cl: Tensor, p: AdapterParams) -> Tensor:
    return adapter_delta(x_cl, p) + x_cl


def patch_embed(clip: ClipBatch, backbone: ToyBackbone) -> Tensor:
    return backbone.patch_embed(clip)


def forward_with_adapters(tokens: Tensor, backbone: ToyBackbone, adapter_params: list[AdapterParams] | None,
                          freeze_backbone: bool = True) -> Tensor:
    return backbone.forward_with_adapters(tokens, freeze_backbone, adapter_params)


def parameter_report(backbone: ToyBackbone) -> dict:
    n_backbone = sum(p.size for p in backbone.backbone_parameters().values())
    n_adapter = sum(p.size for p in backbone.adapter_parameters().values())
    return {
        "backbone_params": n_backbone,
        "adapter_params": n_adapter,
        "adapter_fraction_pct": 100.0 * n_adapter / n_backbone,
    }


# -- feature files ------------------------------------------------------------

FEATURE_MAGIC = b"EASF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIQf")


class FeatureFileError(ValueError):
    """Malformed feature file."""


class FeatureVersionError(FeatureFileError):
    pass


class FeatureTruncatedError(FeatureFileError):
    pass


def frame_timestamps(n: int, fps: float) -> np.ndarray:
    """Centre timestamps (i + 0.5) / fps of n uniformly sampled frames."""
    return (np.arange(n, dtype=np.float64) + 0.5) / float(fps)


def save_features(path: str | Path, feats: np.ndarray, fps: float, video_id: str | None = None,
                  num_frames_original: int | None = None) -> None:
    """Write [T', C] features; a JSON sidecar is written next to it when video_id is given."""
    feats = np.ascontiguousarray(feats, dtype="<f4")
    if feats.ndim != 2:
        raise ValueError(f"features must be [T', C], got {feats.shape}")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, feats.shape[1], feats.shape[0], fps))
        fh.write(feats.tobytes())
    if video_id is not None:
        meta = {"video_id": video_id, "fps": float(np.float32(fps)), "num_frames_original": num_frames_original}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1) + "\n")


def load_features(path: str | Path) -> tuple[np.ndarray, np.ndarray, dict]:
    """Returns (features [T', C] float32, timestamps [T'] seconds, header metadata)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureTruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    magic, version, c, t, fps = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FeatureFileError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FeatureVersionError(f"{path}: feature format version {version}, expected {FEATURE_VERSION}")
    need = _HEADER.size + 4 * c * t
    if len(raw) < need:
        raise FeatureTruncatedError(f"{path}: payload truncated at byte {len(raw)}, expected {need}")
    feats = np.frombuffer(raw, dtype="<f4", count=c * t, offset=_HEADER.size).reshape(t, c).astype(np.float32)
    return feats, frame_timestamps(t, fps), {"fps": fps, "channels": c, "frames": t}


def grid_for(height: int, width: int, cfg: BackboneConfig) -> tuple[int, int]:
    return height // cfg.patch_s, width // cfg.patch_s


def default_backbone(height: int = 20, width: int = 20, cfg: BackboneConfig | None = None,
                     seed: int = 0) -> ToyBackbone:
    cfg = cfg or BackboneConfig()
    return ToyBackbone(cfg, grid_for(height, width, cfg), Rng(seed).child(7))


__all__ = [
    "BackboneConfig", "ClipBatch", "ToyBackbone", "patch_embed", "forward_with_adapters",
    "save_features", "load_features", "frame_timestamps", "parameter_report", "default_backbone",
    "FeatureFileError", "FeatureVersionError", "FeatureTruncatedError",
]
