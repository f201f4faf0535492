"""Pre-Fusion: word-conditioned activation of the visual pyramid."""

from __future__ import annotations

import torch
from torch import nn

from .attention import MultiHeadAttention


class PreFusion(nn.Module):
    """Cross-attention from visual positions (queries) to word tokens
    (keys and values), added onto a linear projection of the visual input.

    Words carry no positions here, so the output does not depend on the
    order of the non-PAD words.
    """

    def __init__(self, visual_dim: int, word_dim: int, dim: int, heads: int = 4):
        super().__init__()
        self.visual_proj = nn.Linear(visual_dim, dim)
        self.attn = MultiHeadAttention(dim, heads, kdim=word_dim, vdim=word_dim, qdim=visual_dim)

    def forward(self, f_v: torch.Tensor, f_w: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """(B, H, W, C_v), (B, l, C_t), (B, l) -> (B, H, W, C)."""
        b, h, w, c = f_v.shape
        tokens = f_v.reshape(b, h * w, c)
        readout = self.attn(tokens, f_w, f_w, key_mask=mask)
        return (self.visual_proj(tokens) + readout).reshape(b, h, w, -1)

