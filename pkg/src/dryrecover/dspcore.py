"""Audio I/O, resampling and the log-Mel frontend shared by every stage."""

import dataclasses
import functools
import os
from dataclasses import dataclass
from math import gcd

import numpy as np
import torch
from scipy.io import wavfile
from scipy.signal import resample_poly

from dryrecover.errors import AudioIOError, ValidationError
from dryrecover.validation import check_waveform

SAMPLE_RATE = 44100


@dataclass(frozen=True, eq=False)
class AudioClip:
    """Mono waveform in [-1, 1] with its sample rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = check_waveform(self.samples, name="samples", dtype=np.float32)
        object.__setattr__(self, "samples", samples)
        self.validate()

    def validate(self):
        if int(self.sample_rate) <= 0:
            raise ValidationError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size and np.max(np.abs(self.samples)) > 1.0:
            raise ValidationError("samples exceed [-1, 1]")
        return self

    @property
    def channel_count(self):
        return 1

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate

    def __len__(self):
        return len(self.samples)

    def __eq__(self, other):
        if not isinstance(other, AudioClip):
            return NotImplemented
        return self.sample_rate == other.sample_rate and np.array_equal(self.samples, other.samples)


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 2048
    window_size: int = 2048
    hop_length: int = 512
    window_fn: str = "hann"
    n_mels: int = 128
    f_min: float = 0.0
    f_max: float = 22050.0
    log_floor: float = 1e-5
    sample_rate: int = SAMPLE_RATE
    mel_scale: str = "slaney"

    def __post_init__(self):
        if self.window_fn != "hann":
            raise ValidationError(f"unsupported window {self.window_fn!r}; only 'hann'")
        if self.mel_scale != "slaney":
            raise ValidationError(f"unsupported mel scale {self.mel_scale!r}; only 'slaney'")
        if self.hop_length <= 0 or self.n_fft % self.hop_length:
            raise ValidationError("hop_length must divide n_fft")
        if not 0 < self.window_size <= self.n_fft:
            raise ValidationError("window_size must be in (0, n_fft]")
        if self.f_max > self.sample_rate / 2 or self.f_min < 0 or self.f_min >= self.f_max:
            raise ValidationError("need 0 <= f_min < f_max <= sample_rate / 2")
        if self.log_floor <= 0:
            raise ValidationError("log_floor must be positive")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass(frozen=True, eq=False)
class MelSpec:
    """Log-Mel magnitudes, shape ``(frames, n_mels)``."""

    values: np.ndarray
    hop_length: int = 512
    window_size: int = 2048

    @property
    def frames(self):
        return self.values.shape[0]

    @property
    def n_mels(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape


def num_frames(num_samples, hop_length=512):
    """Frame count of a centre-padded STFT."""
    return num_samples // hop_length + 1


# -- audio I/O ---------------------------------------------------------------

def _pcm_to_float(data):
    if data.dtype == np.float32:
        return data
    if data.dtype == np.float64:
        return data.astype(np.float32)
    if data.dtype == np.int16:
        return (data / 32768.0).astype(np.float32)
    if data.dtype == np.int32:
        # scipy left-aligns 24-bit samples in int32, so one scale covers both
        return (data / 2147483648.0).astype(np.float32)
    if data.dtype == np.uint8:
        return ((data.astype(np.float64) - 128.0) / 128.0).astype(np.float32)
    raise ValidationError(f"unsupported WAV sample type {data.dtype}")


def resample(samples, orig_rate, target_rate):
    """Polyphase resampling (Kaiser-windowed FIR, scipy defaults)."""
    if orig_rate == target_rate:
        return samples
    g = gcd(int(orig_rate), int(target_rate))
    out = resample_poly(np.asarray(samples, dtype=np.float64), target_rate // g, orig_rate // g)
    return out.astype(np.float32)


def load_audio(path, target_rate=SAMPLE_RATE):
    """Read a PCM/float WAV as a mono :class:`AudioClip` at ``target_rate``.

    ``target_rate=None`` keeps the file's own rate. Channels are averaged before resampling, and the result is clamped to
    [-1, 1]. No loudness normalisation is applied.
    """
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise AudioIOError(f"no such file: {path}")
    if os.path.getsize(path) == 0:
        raise ValidationError(f"empty file: {path}")
    try:
        rate, data = wavfile.read(path)
    except (ValueError, OSError, EOFError) as exc:
        raise AudioIOError(f"cannot decode {path}: {exc}") from exc
    if data.size == 0:
        raise ValidationError(f"zero-length audio: {path}")
    samples = _pcm_to_float(data)
    if samples.ndim == 2:
        samples = samples.mean(axis=1, dtype=np.float64).astype(np.float32)
    target_rate = rate if target_rate is None else target_rate
    samples = resample(samples, rate, target_rate)
    if not np.all(np.isfinite(samples)):
        raise ValidationError(f"non-finite samples in {path}")
    np.clip(samples, -1.0, 1.0, out=samples)
    return AudioClip(samples, int(target_rate))


def save_audio(clip, path):
    """Write ``clip`` as a 32-bit float mono WAV."""
    if not isinstance(clip, AudioClip):
        raise ValidationError("save_audio expects an AudioClip")
    clip.validate()
    try:
        wavfile.write(os.fspath(path), int(clip.sample_rate), clip.samples.astype(np.float32))
    except OSError as exc:
        raise AudioIOError(f"cannot write {path}: {exc}") from exc


# -- Mel frontend ------------------------------------------------------------

def _hz_to_mel(freqs):
    freqs = np.asarray(freqs, dtype=np.float64)
    f_sp = 200.0 / 3
    mels = freqs / f_sp
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    log_region = freqs >= min_log_hz
    mels = np.where(log_region, min_log_mel + np.log(np.maximum(freqs, min_log_hz) / min_log_hz) / logstep, mels)
    return mels


def _mel_to_hz(mels):
    mels = np.asarray(mels, dtype=np.float64)
    f_sp = 200.0 / 3
    freqs = f_sp * mels
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    log_region = mels >= min_log_mel
    return np.where(log_region, min_log_hz * np.exp(logstep * (mels - min_log_mel)), freqs)


def mel_center_frequencies(cfg):
    """Centre frequency (Hz) of each triangular filter."""
    mels = np.linspace(_hz_to_mel(cfg.f_min), _hz_to_mel(cfg.f_max), cfg.n_mels + 2)
    return _mel_to_hz(mels)[1:-1]


def mel_filterbank(cfg):
    """Slaney-style area-normalised triangular filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    fft_freqs = np.linspace(0, cfg.sample_rate / 2, 1 + cfg.n_fft // 2)
    mel_f = _mel_to_hz(np.linspace(_hz_to_mel(cfg.f_min), _hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    fdiff = np.diff(mel_f)
    ramps = mel_f[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (mel_f[2:] - mel_f[:-2]))[:, None]
    return weights


class MelFrontend(torch.nn.Module):
    """Differentiable log-Mel transform: ``(batch, samples) -> (batch, frames, n_mels)``.

    Used both for feature extraction and inside the training losses so the two
    never drift apart.
    """

    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg or StftConfig()
        self.register_buffer("window", torch.hann_window(self.cfg.window_size, dtype=torch.float32), persistent=False)
        self.register_buffer(
            "mel_basis", torch.as_tensor(mel_filterbank(self.cfg), dtype=torch.float32), persistent=False
        )

    def magnitude(self, wave):
        squeeze = wave.dim() == 1
        if squeeze:
            wave = wave.unsqueeze(0)
        spec = torch.stft(
            wave,
            n_fft=self.cfg.n_fft,
            hop_length=self.cfg.hop_length,
            win_length=self.cfg.window_size,
            window=self.window.to(wave.dtype),
            center=True,
            pad_mode="reflect",
            return_complex=True,
        ).abs()
        return spec[0] if squeeze else spec

    def forward(self, wave):
        squeeze = wave.dim() == 1
        if squeeze:
            wave = wave.unsqueeze(0)
        mag = self.magnitude(wave)
        mel = torch.matmul(self.mel_basis.to(mag.dtype), mag)
        out = torch.log(torch.clamp(mel, min=self.cfg.log_floor)).transpose(1, 2)
        return out[0] if squeeze else out


@functools.lru_cache(maxsize=8)
def _frontend(cfg):
    return MelFrontend(cfg).eval()


def mel_transform(clip, cfg=None):
    """Log-Mel spectrogram of ``clip`` with ``floor(len / hop) + 1`` frames."""
    cfg = cfg or StftConfig()
    if clip.sample_rate != cfg.sample_rate:
        raise ValidationError(f"clip is {clip.sample_rate} Hz, frontend expects {cfg.sample_rate} Hz")
    if len(clip) < cfg.window_size:
        raise ValidationError(f"clip shorter than one window ({len(clip)} < {cfg.window_size} samples)")
    with torch.no_grad():
        values = _frontend(cfg)(torch.from_numpy(clip.samples)).numpy()
    return MelSpec(values, hop_length=cfg.hop_length, window_size=cfg.window_size)
