"""Two-stream visual-linguistic decoder and the similarity response head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .attention import FeedForward, MultiHeadAttention, sinusoid_2d

THRESHOLD = 0.5


class VisionPathBlock(nn.Module):
    """Multi-modal self-attention over [vision tokens + words], keeping only
    the vision outputs, then vision-to-word cross-attention."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim)
        self.norm3 = nn.LayerNorm(dim)

    def self_attention(self, f_c: torch.Tensor, f_w: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Flattened vision tokens after the self-attention residual,
        ``LN(MHSA(tokens)[:HW]) + f_c``, shape (B, HW, C)."""
        b, h, w, c = f_c.shape
        flat = f_c.reshape(b, h * w, c)
        f_m = torch.cat([flat + sinusoid_2d(h, w, c, f_c.dtype, f_c.device), f_w], dim=1)
        key_mask = torch.cat([mask.new_ones(b, h * w), mask], dim=1)
        f_b = self.self_attn(f_m, f_m, f_m, key_mask)[:, : h * w]
        return self.norm1(f_b) + flat

    def forward(self, f_c, f_w, mask):
        b, h, w, c = f_c.shape
        x = self.self_attention(f_c, f_w, mask)
        x = self.norm2(x + self.cross_attn(x, f_w, f_w, mask))
        x = self.norm3(x + self.ffn(x))
        return x.reshape(b, h, w, c)


class FPN(nn.Module):
    """Top-down merge of strides 32 -> 16 -> 8 -> 4.

    Convolutions are bias-free and the smoothing activation is GELU, so the
    merge is exactly linear up to the first activation and a zero top-down
    signal stays zero.
    """

    def __init__(self, dim: int, raw_dim: int):
        super().__init__()
        self.lateral = nn.ModuleList(
            [nn.Conv2d(raw_dim, dim, 1, bias=False)]
            + [nn.Conv2d(dim, dim, 1, bias=False) for _ in range(3)]
        )
        self.smooth = nn.ModuleList(nn.Conv2d(dim, dim, 3, padding=1, bias=False) for _ in range(3))
        self.act = nn.GELU()
        self.last_merges: list[torch.Tensor] = []

    def forward(self, f_b: list[torch.Tensor], f_v1: torch.Tensor) -> torch.Tensor:
        """``f_b`` holds levels 2, 3, 4 as (B, H, W, C); returns (B, H/4, W/4, C)."""
        inputs = [f_v1] + list(f_b)
        feats = [x.permute(0, 3, 1, 2) for x in inputs]
        top = self.lateral[3](feats[3])
        self.last_merges = []
        for level in (2, 1, 0):
            merged = F.interpolate(top, scale_factor=2, mode="bilinear", align_corners=False) + self.lateral[level](feats[level])
            self.last_merges.append(merged)
            top = self.act(self.smooth[level](merged))
        return top.permute(0, 2, 3, 1)


class LanguagePath(nn.Module):
    """Sentence embedding reads the activated visual tokens, then a 2-token
    self-attention mixes the original and content-aware prompts."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim)
        self.norm2 = nn.LayerNorm(dim)

    def readout(self, f_s: torch.Tensor, f_c: torch.Tensor) -> torch.Tensor:
        b, h, w, c = f_c.shape
        tokens = f_c.reshape(b, h * w, c)
        return self.cross_attn(f_s, tokens, tokens)

    def forward(self, f_s: torch.Tensor, f_c: torch.Tensor) -> torch.Tensor:
        """(B, 1, C), (B, H, W, C) -> content-aware prompt (B, 1, C)."""
        pair = torch.cat([f_s, self.readout(f_s, f_c)], dim=1)
        pair = self.norm(pair + self.self_attn(pair, pair, pair))
        pair = self.norm2(pair + self.ffn(pair))
        return pair[:, 1:2]


@dataclass
class ResponseMap:
    logits: torch.Tensor  # (B, H/4, W/4)
    upsampled: torch.Tensor  # (B, H, W)

    @property
    def prob(self) -> torch.Tensor:
        return torch.sigmoid(self.upsampled)

    @property
    def mask(self) -> torch.Tensor:
        return self.prob > THRESHOLD


def response_map(fused: torch.Tensor, prompt: torch.Tensor, size: tuple[int, int],
                 scale: torch.Tensor | float | None = None) -> ResponseMap:
    """Inner-product similarity between every fused position and the prompt.

    ``scale`` defaults to 1/sqrt(C); pass a tensor for a learnable one.
    """
    c = fused.shape[-1]
    scale = 1.0 / math.sqrt(c) if scale is None else scale
    logits = torch.einsum("bhwc,bc->bhw", fused, prompt.reshape(prompt.shape[0], c)) * scale
    up = F.interpolate(logits[:, None], size=size, mode="bilinear", align_corners=False)[:, 0]
    return ResponseMap(logits=logits, upsampled=up)
