"""Small transformer building blocks shared by encoders, bridges, and the generator.

Attention is written out explicitly (no fused kernels) so it runs identically
in float32 and float64 and can expose its softmax weights for inspection.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Classic sin/cos encoding; positions may be fractional (timesteps)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, dtype=positions.dtype, device=positions.device)
        / max(half - 1, 1)
    )
    args = positions[..., None] * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, n, h, -1).transpose(1, 2)
        k = k.view(b, n, h, -1).transpose(1, 2)
        v = v.view(b, n, h, -1).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(y)


class CrossAttention(nn.Module):
    """Queries attend over a context sequence of possibly different width."""

    def __init__(self, dim: int, context_dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(context_dim, dim)
        self.to_v = nn.Linear(context_dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, context, return_attn: bool = False):
        b, n, d = x.shape
        m = context.shape[1]
        h = self.heads
        q = self.to_q(x).view(b, n, h, -1).transpose(1, 2)
        k = self.to_k(context).view(b, m, h, -1).transpose(1, 2)
        v = self.to_v(context).view(b, m, h, -1).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, n, d)
        y = self.out(y)
        if return_attn:
            return y, attn
        return y


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        return self.net(x)


class EncoderBlock(nn.Module):
    """Pre-LN self-attention + feed-forward with residuals."""

    def __init__(self, dim: int, heads: int, ffn_hidden: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_hidden)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        x = x + self.ffn(self.ln2(x))
        return x


def bucket_batches(
    lengths: list[int], batch_size: int, rng: np.random.Generator | None = None
) -> list[list[int]]:
    """Group sample indices into batches of equal sequence length.

    Order is deterministic; pass an rng to shuffle within and across buckets.
    """
    by_len: dict[int, list[int]] = {}
    for idx, length in enumerate(lengths):
        by_len.setdefault(length, []).append(idx)
    batches = []
    for length in sorted(by_len):
        idxs = by_len[length]
        if rng is not None:
            idxs = [idxs[i] for i in rng.permutation(len(idxs))]
        for start in range(0, len(idxs), batch_size):
            batches.append(idxs[start : start + batch_size])
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
