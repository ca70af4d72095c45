"""Transformer building blocks shared by the backbone and the detector."""

from __future__ import annotations

from . import nn
from .tensor import Rng, Tensor, attention, gelu, layer_norm, linear, reshape, transpose


class Block(nn.Module):
    """Pre-norm transformer block weights."""

    def __init__(self, dim: int, mlp_ratio: int, rng: Rng):
        hidden = dim * mlp_ratio
        self.ln1_g, self.ln1_b = nn.ones(dim), nn.zeros(dim)
        self.w_qkv = nn.uniform_init(rng.child(0), (dim, 3 * dim), dim)
        self.w_proj = nn.uniform_init(rng.child(1), (dim, dim), dim)
        self.ln2_g, self.ln2_b = nn.ones(dim), nn.zeros(dim)
        self.w_fc1 = nn.uniform_init(rng.child(2), (dim, hidden), dim)
        self.b_fc1 = nn.zeros(hidden)
        self.w_fc2 = nn.uniform_init(rng.child(3), (hidden, dim), hidden)
        self.b_fc2 = nn.zeros(dim)

    def attend(self, seq: Tensor, heads: int) -> Tensor:
        return seq + multihead_self_attention(layer_norm(seq, self.ln1_g, self.ln1_b),
                                              self.w_qkv, self.w_proj, heads)

    def mlp(self, seq: Tensor) -> Tensor:
        hidden = gelu(linear(layer_norm(seq, self.ln2_g, self.ln2_b), self.w_fc1, self.b_fc1))
        return seq + linear(hidden, self.w_fc2, self.b_fc2)

    def __call__(self, seq: Tensor, heads: int) -> Tensor:
        return self.mlp(self.attend(seq, heads))


def multihead_self_attention(x: Tensor, w_qkv: Tensor, w_proj: Tensor, heads: int) -> Tensor:
    """x: [B, N, C] -> [B, N, C]."""
    b, n, c = x.shape
    dh = c // heads
    qkv = reshape(linear(x, w_qkv), (b, n, 3, heads, dh))
    qkv = transpose(qkv, (2, 0, 3, 1, 4))  # [3, B, heads, N, dh]
    out = attention(qkv[0], qkv[1], qkv[2])
    return linear(reshape(transpose(out, (0, 2, 1, 3)), (b, n, c)), w_proj)
