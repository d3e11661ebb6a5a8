"""Two-stage restoration: wet waveform -> log-Mel -> denoiser -> vocoder -> dry estimate."""

import logging

import numpy as np
import torch

from dryrecover.checkpoint import load_checkpoint, save_checkpoint
from dryrecover.denoiser import DenoiserConfig, MelDenoiser
from dryrecover.dspcore import AudioClip, MelFrontend, StftConfig, resample
from dryrecover.errors import ValidationError
from dryrecover.vocoder import Generator, VocoderConfig

logger = logging.getLogger(__name__)


class RestorationPipeline:
    """Frozen denoiser + generator pair used for inference."""

    def __init__(self, denoiser, generator, stft=None):
        self.stft = stft or StftConfig()
        if denoiser.cfg.c_bin != self.stft.n_mels or generator.cfg.mel_bins != self.stft.n_mels:
            raise ValidationError("denoiser, vocoder and frontend disagree on the number of Mel bins")
        if generator.cfg.hop_length != self.stft.hop_length:
            raise ValidationError("vocoder hop length differs from the frontend hop length")
        self.denoiser = denoiser.eval()
        self.generator = generator.eval()
        self.frontend = MelFrontend(self.stft).eval()

    @torch.no_grad()
    def restore_mel(self, mel):
        return self.generator(self.denoiser(mel))

    @torch.no_grad()
    def restore(self, clip, trim=True):
        """Restore one clip. Output is ``frames * hop`` long, or trimmed to the input length."""
        if clip.sample_rate != self.stft.sample_rate:
            logger.warning("resampling input from %d Hz to %d Hz", clip.sample_rate, self.stft.sample_rate)
            clip = AudioClip(np.clip(resample(clip.samples, clip.sample_rate, self.stft.sample_rate), -1, 1),
                             self.stft.sample_rate)
        if len(clip) < self.stft.window_size:
            raise ValidationError(f"input shorter than one analysis window ({self.stft.window_size} samples)")
        mel = self.frontend(torch.from_numpy(clip.samples))
        wave = self.restore_mel(mel).numpy().astype(np.float32)
        if trim:
            wave = wave[: len(clip)]
        return AudioClip(np.clip(wave, -1.0, 1.0), self.stft.sample_rate)

    def save(self, path, extra=None):
        config = {
            "denoiser": self.denoiser.cfg.to_dict(),
            "vocoder": self.generator.cfg.to_dict(),
            "stft": self.stft.to_dict(),
        }
        return save_checkpoint(path, "pipeline", config, {"denoiser": self.denoiser, "generator": self.generator},
                               extra=extra)

    @classmethod
    def load(cls, path):
        ckpt = load_checkpoint(path, expect_kind="pipeline")
        cfg = ckpt.config
        denoiser = ckpt.load_module("denoiser", MelDenoiser(DenoiserConfig.from_dict(cfg["denoiser"])))
        generator = ckpt.load_module("generator", Generator(VocoderConfig.from_dict(cfg["vocoder"])))
        return cls(denoiser, generator, StftConfig(**cfg["stft"]))

    @classmethod
    def from_checkpoints(cls, denoiser_ckpt, vocoder_ckpt):
        den = load_checkpoint(denoiser_ckpt, expect_kind="denoiser")
        voc = load_checkpoint(vocoder_ckpt, expect_kind="vocoder")
        denoiser = den.load_module("denoiser", MelDenoiser(DenoiserConfig.from_dict(den.config["denoiser"])))
        generator = voc.load_module("generator", Generator(VocoderConfig.from_dict(voc.config["vocoder"])))
        return cls(denoiser, generator, StftConfig(**voc.config["stft"]))
