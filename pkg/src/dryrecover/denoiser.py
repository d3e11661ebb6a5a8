"""Mel denoiser: Transformer encoder over Mel frames with a convolutional feed-forward.

Each block is pre-norm self-attention followed by a pre-norm
``Conv1d(k=9) -> GELU -> Conv1d(k=1)`` sublayer, both with residual
connections. Input and output are plain affine maps between the Mel bins and
the embedding width.
"""

import dataclasses
import math
from dataclasses import dataclass

import torch
from torch import nn

from dryrecover.errors import ValidationError
from dryrecover.validation import check_mel_batch

PRESETS = {
    "large": {"n_layers": 12, "c_emb": 384},
    "base": {"n_layers": 8, "c_emb": 256},
}


@dataclass(frozen=True)
class DenoiserConfig:
    n_layers: int = 12
    c_emb: int = 384
    c_hidden: int | None = None
    c_bin: int = 128
    conv_kernels: tuple = (9, 1)
    n_heads: int | None = None
    dropout: float = 0.1
    max_frames: int = 8192
    positional_encoding: bool = True

    def __post_init__(self):
        if self.c_hidden is None:
            object.__setattr__(self, "c_hidden", 4 * self.c_emb)
        if self.n_heads is None:
            object.__setattr__(self, "n_heads", max(1, self.c_emb // 64))
        object.__setattr__(self, "conv_kernels", tuple(int(k) for k in self.conv_kernels))
        if self.c_hidden != 4 * self.c_emb:
            raise ValidationError(f"c_hidden must be 4 * c_emb ({4 * self.c_emb}), got {self.c_hidden}")
        if self.c_emb % self.n_heads:
            raise ValidationError(f"c_emb {self.c_emb} not divisible by n_heads {self.n_heads}")
        if len(self.conv_kernels) != 2 or any(k % 2 == 0 for k in self.conv_kernels):
            raise ValidationError("conv_kernels must be two odd sizes")
        if self.n_layers < 1 or self.max_frames < 1:
            raise ValidationError("n_layers and max_frames must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")

    @classmethod
    def preset(cls, name, **overrides):
        try:
            params = dict(PRESETS[name])
        except KeyError:
            raise ValidationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        params.update(overrides)
        return cls(**params)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["conv_kernels"] = list(self.conv_kernels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def sinusoidal_encoding(frames, dim, dtype=torch.float32, device=None):
    position = torch.arange(frames, dtype=torch.float64, device=device).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64, device=device) * (-math.log(10000.0) / dim))
    pe = torch.zeros(frames, dim, dtype=torch.float64, device=device)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div[: dim // 2])
    return pe.to(dtype)


class ConvFeedForward(nn.Module):
    def __init__(self, c_emb, c_hidden, kernels, dropout):
        super().__init__()
        k1, k2 = kernels
        self.conv1 = nn.Conv1d(c_emb, c_hidden, k1, padding=k1 // 2)
        self.conv2 = nn.Conv1d(c_hidden, c_emb, k2, padding=k2 // 2)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        # x: (batch, frames, channels)
        h = self.conv1(x.transpose(1, 2))
        h = self.dropout(nn.functional.gelu(h))
        return self.conv2(h).transpose(1, 2)


class DenoiserBlock(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.c_emb)
        self.attn = nn.MultiheadAttention(cfg.c_emb, cfg.n_heads, dropout=cfg.dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(cfg.c_emb)
        self.ff = ConvFeedForward(cfg.c_emb, cfg.c_hidden, cfg.conv_kernels, cfg.dropout)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, attn_mask=None):
        h = self.norm1(x)
        h, _ = self.attn(h, h, h, attn_mask=attn_mask, need_weights=False)
        x = x + self.dropout(h)
        return x + self.dropout(self.ff(self.norm2(x)))


class MelDenoiser(nn.Module):
    """Maps wet log-Mel ``(batch, frames, c_bin)`` to dry log-Mel of the same shape."""

    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg or DenoiserConfig()
        self.input_proj = nn.Linear(self.cfg.c_bin, self.cfg.c_emb)
        self.blocks = nn.ModuleList(DenoiserBlock(self.cfg) for _ in range(self.cfg.n_layers))
        self.final_norm = nn.LayerNorm(self.cfg.c_emb)
        self.output_proj = nn.Linear(self.cfg.c_emb, self.cfg.c_bin)

    def forward(self, mel, attn_mask=None):
        check_mel_batch(mel, self.cfg.c_bin)
        squeeze = mel.dim() == 2
        if squeeze:
            mel = mel.unsqueeze(0)
        frames = mel.shape[1]
        if frames > self.cfg.max_frames:
            raise ValidationError(f"{frames} frames exceed max_frames={self.cfg.max_frames}")
        x = self.input_proj(mel)
        if self.cfg.positional_encoding:
            x = x + sinusoidal_encoding(frames, self.cfg.c_emb, x.dtype, x.device)
        for block in self.blocks:
            x = block(x, attn_mask)
        out = self.output_proj(self.final_norm(x))
        return out[0] if squeeze else out


def block_parameter_count(c_emb, c_hidden=None, kernels=(9, 1)):
    """Closed-form trainable parameters of one :class:`DenoiserBlock`."""
    c_hidden = c_hidden or 4 * c_emb
    k1, k2 = kernels
    attention = 4 * c_emb * c_emb + 4 * c_emb
    conv1 = k1 * c_emb * c_hidden + c_hidden
    conv2 = k2 * c_hidden * c_emb + c_emb
    norms = 2 * 2 * c_emb
    return attention + conv1 + conv2 + norms


def count_parameters(cfg_or_model):
    """Exact trainable-parameter count of a constructed model (or of the model a config builds)."""
    model = MelDenoiser(cfg_or_model) if isinstance(cfg_or_model, DenoiserConfig) else cfg_or_model
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
