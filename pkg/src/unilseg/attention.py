"""Multi-head attention with exposed weights, plus positional encodings."""

from __future__ import annotations

import math

import torch
from torch import nn


class EmptyKeysError(ValueError):
    """Every key position of some sample is masked out."""


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over ``heads`` subspaces.

    ``key_mask`` is boolean (B, Lk) with True marking real keys. The
    softmax weights of the last call are kept on ``last_weights`` as
    (B, heads, Lq, Lk) for inspection.
    """

    def __init__(self, dim: int, heads: int, kdim: int | None = None, vdim: int | None = None,
                 qdim: int | None = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.q_proj = nn.Linear(qdim or dim, dim)
        self.k_proj = nn.Linear(kdim or dim, dim)
        self.v_proj = nn.Linear(vdim or dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.last_weights: torch.Tensor | None = None

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.dim // self.heads).transpose(1, 2)

    def forward(self, query, key, value, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.dim // self.heads)
        if key_mask is not None:
            if not bool(key_mask.any(dim=-1).all()):
                raise EmptyKeysError("all key positions are masked")
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = scores.softmax(dim=-1)
        self.last_weights = weights.detach()
        out = (weights @ v).transpose(1, 2).reshape(query.shape[0], query.shape[1], self.dim)
        return self.out_proj(out)


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, ratio: int = 2):
        super().__init__(nn.Linear(dim, dim * ratio), nn.GELU(), nn.Linear(dim * ratio, dim))


def sinusoid_2d(h: int, w: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Fixed (h*w, dim) sine/cosine embedding, half the channels per axis."""
    if dim % 4:
        raise ValueError("2-D sinusoidal embedding needs dim divisible by 4")
    quarter = dim // 4
    freq = 1.0 / (10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    ys = torch.arange(h, dtype=torch.float64)[:, None] * freq
    xs = torch.arange(w, dtype=torch.float64)[:, None] * freq
    y_emb = torch.cat([ys.sin(), ys.cos()], dim=1)  # h, dim/2
    x_emb = torch.cat([xs.sin(), xs.cos()], dim=1)  # w, dim/2
    grid = torch.cat(
        [y_emb[:, None, :].expand(h, w, -1), x_emb[None, :, :].expand(h, w, -1)], dim=-1
    )
    return grid.reshape(h * w, dim).to(dtype=dtype, device=device)
