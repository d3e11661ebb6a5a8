"""GAN vocoder: transposed-convolution generator and multi-period/multi-scale discriminators.

The default generator is the familiar "V1" layout re-timed for a 512-sample
hop (upsample rates 8, 8, 4, 2).
"""

import dataclasses
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import spectral_norm, weight_norm

from dryrecover.errors import ValidationError
from dryrecover.validation import check_mel_batch

LRELU_SLOPE = 0.1


@dataclass(frozen=True)
class VocoderConfig:
    upsample_rates: tuple = (8, 8, 4, 2)
    upsample_kernel_sizes: tuple = (16, 16, 8, 4)
    initial_channels: int = 512
    resblock_kernel_sizes: tuple = (3, 7, 11)
    resblock_dilations: tuple = ((1, 3, 5), (1, 3, 5), (1, 3, 5))
    mel_bins: int = 128
    hop_length: int = 512
    init_std: float = 0.01
    mpd_periods: tuple = (2, 3, 5, 7, 11)
    mpd_channels: tuple = (32, 128, 512, 1024, 1024)
    msd_scales: int = 3
    msd_channels: tuple = (128, 128, 256, 512, 1024, 1024, 1024)
    msd_groups: tuple = (1, 4, 16, 16, 16, 16, 1)

    def __post_init__(self):
        as_tuple = lambda v: tuple(int(x) for x in v)  # noqa: E731
        for name in ("upsample_rates", "upsample_kernel_sizes", "resblock_kernel_sizes", "mpd_periods",
                     "mpd_channels", "msd_channels", "msd_groups"):
            object.__setattr__(self, name, as_tuple(getattr(self, name)))
        object.__setattr__(self, "resblock_dilations", tuple(as_tuple(d) for d in self.resblock_dilations))
        if math.prod(self.upsample_rates) != self.hop_length:
            raise ValidationError(
                f"product of upsample_rates {self.upsample_rates} must equal hop_length {self.hop_length}"
            )
        if len(self.upsample_rates) != len(self.upsample_kernel_sizes):
            raise ValidationError("one kernel size per upsample stage required")
        for u, k in zip(self.upsample_rates, self.upsample_kernel_sizes):
            if k < u or (k - u) % 2:
                raise ValidationError(f"upsample kernel {k} incompatible with rate {u} (need k >= u, k - u even)")
        if len(self.resblock_kernel_sizes) != len(self.resblock_dilations):
            raise ValidationError("one dilation schedule per residual kernel size required")
        if self.initial_channels % (2 ** len(self.upsample_rates)):
            raise ValidationError("initial_channels must halve cleanly at every upsample stage")
        if len(self.mpd_channels) != 5 or len(self.msd_channels) != 7 or len(self.msd_groups) != 7:
            raise ValidationError("mpd_channels needs 5 widths; msd_channels and msd_groups need 7 entries")

    def to_dict(self):
        d = dataclasses.asdict(self)
        return {k: [list(x) for x in v] if k == "resblock_dilations" else (list(v) if isinstance(v, tuple) else v)
                for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _init_conv(module, std):
    if isinstance(module, (nn.Conv1d, nn.ConvTranspose1d)):
        nn.init.normal_(module.weight, 0.0, std)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def _padding(kernel, dilation=1):
    return (kernel * dilation - dilation) // 2


class ResBlock(nn.Module):
    def __init__(self, channels, kernel, dilations, std):
        super().__init__()
        self.convs1 = nn.ModuleList(
            nn.Conv1d(channels, channels, kernel, dilation=d, padding=_padding(kernel, d)) for d in dilations
        )
        self.convs2 = nn.ModuleList(
            nn.Conv1d(channels, channels, kernel, padding=_padding(kernel)) for _ in dilations
        )
        for conv in (*self.convs1, *self.convs2):
            _init_conv(conv, std)
            weight_norm(conv)

    def forward(self, x):
        for c1, c2 in zip(self.convs1, self.convs2):
            xt = c2(F.leaky_relu(c1(F.leaky_relu(x, LRELU_SLOPE)), LRELU_SLOPE))
            x = x + xt
        return x


class Generator(nn.Module):
    """``(batch, frames, mel_bins)`` log-Mel -> ``(batch, frames * hop_length)`` waveform in (-1, 1)."""

    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg = cfg or VocoderConfig()
        ch = cfg.initial_channels
        self.conv_pre = nn.Conv1d(cfg.mel_bins, ch, 7, padding=3)
        self.ups = nn.ModuleList()
        self.resblocks = nn.ModuleList()
        for i, (u, k) in enumerate(zip(cfg.upsample_rates, cfg.upsample_kernel_sizes)):
            c_in, c_out = ch // 2**i, ch // 2 ** (i + 1)
            self.ups.append(nn.ConvTranspose1d(c_in, c_out, k, stride=u, padding=(k - u) // 2))
            for rk, rd in zip(cfg.resblock_kernel_sizes, cfg.resblock_dilations):
                self.resblocks.append(ResBlock(c_out, rk, rd, cfg.init_std))
        self.conv_post = nn.Conv1d(ch // 2 ** len(cfg.upsample_rates), 1, 7, padding=3)
        for conv in (self.conv_pre, *self.ups, self.conv_post):
            _init_conv(conv, cfg.init_std)
            weight_norm(conv)

    def forward(self, mel):
        check_mel_batch(mel, self.cfg.mel_bins)
        squeeze = mel.dim() == 2
        if squeeze:
            mel = mel.unsqueeze(0)
        x = self.conv_pre(mel.transpose(1, 2))
        n_kernels = len(self.cfg.resblock_kernel_sizes)
        for i, up in enumerate(self.ups):
            x = up(F.leaky_relu(x, LRELU_SLOPE))
            acc = None
            for j in range(n_kernels):
                r = self.resblocks[i * n_kernels + j](x)
                acc = r if acc is None else acc + r
            x = acc / n_kernels
        x = torch.tanh(self.conv_post(F.leaky_relu(x)))
        wave = x.squeeze(1)
        return wave[0] if squeeze else wave


def vocoder_forward(mel, generator):
    """Synthesize waveforms; output length is exactly ``frames * hop_length``."""
    return generator(mel)


# -- discriminators ------------------------------------------------------------

def _reflect_pad_right(x, n_pad):
    """Right-pad the last axis by reflection; falls back to edge replication when too short to reflect."""
    if n_pad == 0:
        return x
    mode = "reflect" if n_pad < x.shape[-1] else "replicate"
    return F.pad(x, (0, n_pad), mode=mode)


class PeriodDiscriminator(nn.Module):
    def __init__(self, period, channels):
        super().__init__()
        self.period = period
        widths = (1, *channels)
        self.convs = nn.ModuleList()
        for i in range(len(channels)):
            stride = (3, 1) if i < len(channels) - 1 else (1, 1)
            self.convs.append(weight_norm(nn.Conv2d(widths[i], widths[i + 1], (5, 1), stride, padding=(2, 0))))
        self.conv_post = weight_norm(nn.Conv2d(channels[-1], 1, (3, 1), 1, padding=(1, 0)))

    def forward(self, x):
        # x: (batch, 1, T); fold into (batch, 1, T / p, p) after padding T to a multiple of p
        b, c, t = x.shape
        n_pad = (-t) % self.period
        x = _reflect_pad_right(x, n_pad)
        x = x.view(b, c, (t + n_pad) // self.period, self.period)
        features = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            features.append(x)
        x = self.conv_post(x)
        features.append(x)
        return torch.flatten(x, 1, -1), features


_MSD_LAYOUT = (  # (kernel, stride, padding) per layer
    (15, 1, 7),
    (41, 2, 20),
    (41, 2, 20),
    (41, 4, 20),
    (41, 4, 20),
    (41, 1, 20),
    (5, 1, 2),
)


class ScaleDiscriminator(nn.Module):
    def __init__(self, channels, groups=(1, 4, 16, 16, 16, 16, 1), use_spectral_norm=False):
        super().__init__()
        norm = spectral_norm if use_spectral_norm else weight_norm
        widths = (1, *channels)
        self.convs = nn.ModuleList()
        for i, ((k, s, p), g) in enumerate(zip(_MSD_LAYOUT, groups)):
            # clamp so the group count divides both widths
            groups = math.gcd(g, math.gcd(widths[i], widths[i + 1]))
            self.convs.append(norm(nn.Conv1d(widths[i], widths[i + 1], k, s, groups=groups, padding=p)))
        self.conv_post = norm(nn.Conv1d(channels[-1], 1, 3, 1, padding=1))

    def forward(self, x):
        features = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            features.append(x)
        x = self.conv_post(x)
        features.append(x)
        return torch.flatten(x, 1, -1), features


class DiscriminatorBank(nn.Module):
    """Period discriminators (one per period) followed by scale discriminators at 1x, 2x, 4x pooling."""

    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg = cfg or VocoderConfig()
        self.period_discriminators = nn.ModuleList(PeriodDiscriminator(p, cfg.mpd_channels) for p in cfg.mpd_periods)
        self.scale_discriminators = nn.ModuleList(
            ScaleDiscriminator(cfg.msd_channels, cfg.msd_groups, use_spectral_norm=(i == 0)) for i in range(cfg.msd_scales)
        )
        self.pool = nn.AvgPool1d(4, 2, padding=2)

    @property
    def names(self):
        return [f"mpd_p{p}" for p in self.cfg.mpd_periods] + [f"msd_s{i}" for i in range(self.cfg.msd_scales)]

    def forward(self, wave):
        """Return ``[(scores, features), ...]`` in :attr:`names` order."""
        x = wave.unsqueeze(1) if wave.dim() == 2 else wave
        outputs = [d(x) for d in self.period_discriminators]
        for i, d in enumerate(self.scale_discriminators):
            if i > 0:
                x = self.pool(x)
            outputs.append(d(x))
        return outputs


def discriminate(wave, bank):
    """Scores and intermediate feature maps from every discriminator in ``bank``."""
    if wave.dim() != 2:
        raise ValidationError(f"expected (batch, samples) waveforms, got shape {tuple(wave.shape)}")
    return bank(wave)
