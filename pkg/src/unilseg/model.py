"""The full network: encoders, Pre-Fusion, vision and language paths."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn

from .decoder import FPN, LanguagePath, ResponseMap, VisionPathBlock, response_map
from .encoders import TextEncoder, Tokens, Vocab, VisionEncoder, tokenize
from .prefusion import PreFusion


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 4
    conv_stem: int = 0
    dropout: float = 0.0  # residual-branch dropout in the vision encoder
    channels: tuple[int, ...] = (32, 64, 128, 256)
    depths: tuple[int, ...] = (1, 1, 1, 1)
    vision_heads: tuple[int, ...] = (2, 2, 4, 8)
    text_dim: int = 64
    text_depth: int = 2
    text_heads: int = 4
    max_len: int = 20
    pooling: str = "eos"
    dim: int = 64
    heads: int = 4
    decoder_depth: int = 1
    learnable_scale: bool = False
    vocab_path: str | None = None
    # Table-8-style switches
    use_prefusion: bool = True
    use_vision_path: bool = True
    use_language_path: bool = True

    def __post_init__(self):
        for f in ("channels", "depths", "vision_heads"):
            setattr(self, f, tuple(int(v) for v in getattr(self, f)))

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


PRESETS = {
    "desk": ModelConfig(),
    "tiny": ModelConfig(
        image_size=32, channels=(8, 16, 16, 16), vision_heads=(2, 2, 2, 2), text_dim=16,
        text_depth=1, text_heads=2, max_len=8, dim=16, heads=2, decoder_depth=1,
    ),
    # the published resolution; not used by the test-suite
    "paper": ModelConfig(image_size=480, channels=(128, 256, 512, 1024), vision_heads=(4, 8, 16, 32),
                         text_dim=512, text_depth=12, text_heads=8, dim=256, heads=8),
}

BACKBONE_PREFIXES = ("vision.",)


@dataclass
class Forward:
    response: ResponseMap
    pyramid: list[torch.Tensor]
    activated: list[torch.Tensor]
    decoded: list[torch.Tensor]
    fused: torch.Tensor
    prompt: torch.Tensor


class UniLSeg(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig(), vocab: Vocab | None = None):
        super().__init__()
        self.config = config
        if vocab is None:
            vocab = Vocab.from_file(config.vocab_path) if config.vocab_path else Vocab()
        self.vocab = vocab
        cv = config.channels
        self.vision = VisionEncoder(cv, config.depths, config.vision_heads, config.patch_size,
                                    config.conv_stem, config.dropout)
        self.text = TextEncoder(len(vocab), config.text_dim, config.text_depth, config.text_heads,
                                config.max_len, config.pooling)
        c = config.dim
        self.word_proj = nn.Linear(config.text_dim, c)
        self.sentence_proj = nn.Linear(config.text_dim, c)
        self.prefusion = nn.ModuleList(PreFusion(cv[i], config.text_dim, c, config.heads) for i in (1, 2, 3))
        self.vision_path = nn.ModuleList(
            nn.ModuleList(VisionPathBlock(c, config.heads) for _ in range(config.decoder_depth))
            for _ in range(3)
        )
        self.fpn = FPN(c, cv[0])
        self.language_path = LanguagePath(c, config.heads)
        self.logit_scale = nn.Parameter(torch.tensor(1.0 / c ** 0.5)) if config.learnable_scale else None
        if not config.use_prefusion:
            self.skip_proj = nn.ModuleList(nn.Linear(cv[i], c) for i in (1, 2, 3))

    def tokenize(self, captions) -> Tokens:
        return tokenize(captions, self.vocab, self.config.max_len)

    def forward(self, images: torch.Tensor, tokens: Tokens) -> Forward:
        """``images`` (B, H, W, 3) in [0, 1]; returns every intermediate."""
        cfg = self.config
        pyramid = self.vision(images)
        text = self.text(tokens)
        f_w_raw, mask = text.word, text.mask
        f_w = self.word_proj(f_w_raw)
        f_s = self.sentence_proj(text.sentence)

        activated = []
        for j, i in enumerate((1, 2, 3)):
            if cfg.use_prefusion:
                activated.append(self.prefusion[j](pyramid[i], f_w_raw, mask))
            else:
                activated.append(self.skip_proj[j](pyramid[i]))

        decoded = []
        for j, f_c in enumerate(activated):
            x = f_c
            if cfg.use_vision_path:
                for block in self.vision_path[j]:
                    x = block(x, f_w, mask)
            decoded.append(x)
        fused = self.fpn(decoded, pyramid[0])

        if cfg.use_language_path:
            prompt = self.language_path(f_s, activated[-1])
        else:
            prompt = f_s
        size = (images.shape[1], images.shape[2])
        resp = response_map(fused, prompt, size, self.logit_scale)
        return Forward(resp, pyramid, activated, decoded, fused, prompt)

    def backbone_parameters(self):
        return [p for n, p in self.named_parameters() if n.startswith(BACKBONE_PREFIXES)]

    def head_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith(BACKBONE_PREFIXES)]

    @torch.no_grad()
    def predict_prob(self, image: np.ndarray, caption: str) -> np.ndarray:
        """Foreground probability map (H, W) for one image and caption."""
        if not caption or not caption.strip():
            raise ValueError("caption must be non-empty")
        image = np.asarray(image)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected an HxWx3 image, got {image.shape}")
        dtype = next(self.parameters()).dtype
        x = torch.as_tensor(image, dtype=dtype)[None]
        was_training = self.training
        self.eval()
        try:
            out = self(x, self.tokenize([caption]))
        finally:
            self.train(was_training)
        return out.response.prob[0].cpu().numpy()
