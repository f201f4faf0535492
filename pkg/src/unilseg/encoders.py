"""Small from-scratch vision and text encoders.

Both sit behind the same shapes a pretrained backbone would produce, so a
real pyramid transformer or CLIP text tower could be swapped in later.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
from torch import nn

from .attention import FeedForward, MultiHeadAttention, sinusoid_2d

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIALS = (PAD, UNK, BOS, EOS)

# every word the shape-world grammar and the task prompts can produce
GRAMMAR_WORDS = (
    "all", "the", "most", "salient", "object", "shape",
    "circle", "square", "triangle",
    "red", "green", "blue", "yellow",
    "border", "interior",
    "largest", "smallest",
    "left", "right", "of", "above", "below",
)

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


class Vocab:
    def __init__(self, words: Sequence[str] = GRAMMAR_WORDS):
        self.itos = list(SPECIALS) + [w for w in dict.fromkeys(words) if w not in SPECIALS]
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __getitem__(self, word: str) -> int:
        return self.stoi.get(word, self.stoi[UNK])

    @classmethod
    def from_file(cls, path: str | Path) -> "Vocab":
        words = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
        return cls(words)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.itos[len(SPECIALS):]) + "\n")


@dataclass
class Tokens:
    ids: torch.Tensor  # (B, max_len) long
    mask: torch.Tensor  # (B, max_len) bool, True on BOS..EOS
    eos: torch.Tensor  # (B,) index of EOS


def tokenize(captions: str | Sequence[str], vocab: Vocab, max_len: int = 20) -> Tokens:
    """Lowercase word/punctuation split, wrapped in BOS/EOS and padded.

    Captions longer than ``max_len - 2`` words are truncated; EOS is kept.
    """
    if isinstance(captions, str):
        captions = [captions]
    if max_len < 3:
        raise ValueError("max_len must leave room for BOS, a word and EOS")
    ids = torch.full((len(captions), max_len), vocab.stoi[PAD], dtype=torch.long)
    mask = torch.zeros((len(captions), max_len), dtype=torch.bool)
    eos = torch.zeros(len(captions), dtype=torch.long)
    for row, caption in enumerate(captions):
        words = _TOKEN_RE.findall(caption.lower())
        if not words:
            raise ValueError("cannot tokenize an empty caption")
        seq = [vocab.stoi[BOS]] + [vocab[w] for w in words[: max_len - 2]] + [vocab.stoi[EOS]]
        ids[row, : len(seq)] = torch.tensor(seq)
        mask[row, : len(seq)] = True
        eos[row] = len(seq) - 1
    return Tokens(ids, mask, eos)


class TransformerLayer(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_mask=None):
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, h, key_mask))
        return x + self.drop(self.ffn(self.norm2(x)))


class PatchMerging(nn.Module):
    """2x2 neighbourhood concat followed by a linear reduction."""

    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, out_dim, bias=False)

    def forward(self, x):  # B, H, W, C
        x0 = x[:, 0::2, 0::2]
        x1 = x[:, 1::2, 0::2]
        x2 = x[:, 0::2, 1::2]
        x3 = x[:, 1::2, 1::2]
        return self.reduction(self.norm(torch.cat([x0, x1, x2, x3], dim=-1)))


class VisionEncoder(nn.Module):
    """Four-stage hierarchy at strides 4, 8, 16 and 32.

    Each stage adds fixed 2-D sinusoidal positions and runs full
    self-attention; stages are linked by patch merging.
    """

    def __init__(self, channels=(32, 64, 128, 256), depths=(1, 1, 1, 1), heads=(2, 2, 4, 8), patch_size: int = 4,
                 conv_stem: int = 0, dropout: float = 0.0):
        super().__init__()
        if len(channels) != 4 or len(depths) != 4 or len(heads) != 4:
            raise ValueError("the vision encoder has exactly four stages")
        if any(b < a for a, b in zip(channels, channels[1:])):
            raise ValueError("channel dims must be nondecreasing")
        self.channels = tuple(channels)
        self.patch_size = patch_size
        if conv_stem:
            # 3x3 convolutions at full resolution ahead of the patch projection
            layers, cin = [], 3
            for _ in range(conv_stem):
                layers += [nn.Conv2d(cin, channels[0], 3, padding=1), nn.GELU()]
                cin = channels[0]
            self.stem = nn.Sequential(*layers)
        else:
            cin = 3
            self.stem = nn.Identity()
        self.patch_embed = nn.Conv2d(cin, channels[0], kernel_size=patch_size, stride=patch_size)
        self.embed_norm = nn.LayerNorm(channels[0])
        self.merges = nn.ModuleList(
            [PatchMerging(channels[i - 1], channels[i]) for i in range(1, 4)]
        )
        self.stages = nn.ModuleList(
            nn.ModuleList(TransformerLayer(channels[i], heads[i], dropout) for _ in range(depths[i]))
            for i in range(4)
        )
        self.norms = nn.ModuleList(nn.LayerNorm(c) for c in channels)

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        """(B, H, W, 3) -> four (B, H/2^(i+1), W/2^(i+1), C_i) grids."""
        if image.ndim != 4 or image.shape[-1] != 3:
            raise ValueError(f"expected (B, H, W, 3) images, got {tuple(image.shape)}")
        stride = self.patch_size * 8
        if image.shape[1] % stride or image.shape[2] % stride:
            raise ValueError(f"image size {tuple(image.shape[1:3])} not divisible by {stride}")
        x = self.patch_embed(self.stem(image.permute(0, 3, 1, 2))).permute(0, 2, 3, 1)
        x = self.embed_norm(x)
        levels = []
        for i in range(4):
            if i:
                x = self.merges[i - 1](x)
            b, h, w, c = x.shape
            t = x.reshape(b, h * w, c) + sinusoid_2d(h, w, c, x.dtype, x.device)
            for layer in self.stages[i]:
                t = layer(t)
            x = t.reshape(b, h, w, c)
            levels.append(self.norms[i](x))
        return levels


@dataclass
class TextEncoding:
    word: torch.Tensor  # (B, l, C_t)
    sentence: torch.Tensor  # (B, 1, C_t)
    mask: torch.Tensor  # (B, l) bool


class TextEncoder(nn.Module):
    def __init__(self, vocab_size: int, dim: int = 64, depth: int = 2, heads: int = 4,
                 max_len: int = 20, pooling: str = "eos"):
        super().__init__()
        if pooling not in ("eos", "mean"):
            raise ValueError(f"unknown pooling {pooling!r}")
        self.max_len = max_len
        self.pooling = pooling
        self.token_embed = nn.Embedding(vocab_size, dim)
        self.pos_embed = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        self.layers = nn.ModuleList(TransformerLayer(dim, heads) for _ in range(depth))
        self.final_norm = nn.LayerNorm(dim)
        self.sentence_proj = nn.Linear(dim, dim)

    def forward(self, tokens: Tokens) -> TextEncoding:
        n = tokens.ids.shape[1]
        if n > self.max_len:
            raise ValueError(f"token sequence of {n} exceeds max_len {self.max_len}")
        x = self.token_embed(tokens.ids) + self.pos_embed[:n]
        for layer in self.layers:
            x = layer(x, tokens.mask)
        x = self.final_norm(x)
        if self.pooling == "eos":
            pooled = x[torch.arange(x.shape[0]), tokens.eos]
        else:
            m = tokens.mask.to(x.dtype)[..., None]
            pooled = (x * m).sum(1) / m.sum(1)
        return TextEncoding(word=x, sentence=self.sentence_proj(pooled)[:, None, :], mask=tokens.mask)
