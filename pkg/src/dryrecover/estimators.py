"""scikit-learn style wrappers around the frontend, the effect chain and the restorer.

``X`` is a sequence of 1-D waveforms (or a 2-D array, one clip per row) at
44.1 kHz. Transformers return a 3-D array when all outputs share a shape and
a list otherwise.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from dryrecover.checkpoint import Checkpoint
from dryrecover.dataset import PairCorpus
from dryrecover.denoiser import DenoiserConfig
from dryrecover.dspcore import AudioClip, StftConfig, mel_transform
from dryrecover.errors import ValidationError
from dryrecover.fxrender import EffectChainConfig, effect_chain, mix
from dryrecover.metrics import si_sdr
from dryrecover.pipeline import RestorationPipeline
from dryrecover.training import LossWeights, TrainSchedule, finetune_vocoder, train_denoiser, train_vocoder
from dryrecover.validation import check_waveform_list
from dryrecover.vocoder import VocoderConfig


def _stack_if_uniform(items):
    if len({x.shape for x in items}) == 1:
        return np.stack(items)
    return items


class MelSpectrogram(TransformerMixin, BaseEstimator):
    """Stateless log-Mel frontend; ``transform`` gives ``(n_clips, frames, n_mels)``."""

    def __init__(self, n_fft=2048, hop_length=512, n_mels=128, f_min=0.0, f_max=22050.0, log_floor=1e-5):
        self.n_fft = n_fft
        self.hop_length = hop_length
        self.n_mels = n_mels
        self.f_min = f_min
        self.f_max = f_max
        self.log_floor = log_floor

    def _config(self):
        return StftConfig(n_fft=self.n_fft, window_size=self.n_fft, hop_length=self.hop_length, n_mels=self.n_mels,
                          f_min=self.f_min, f_max=self.f_max, log_floor=self.log_floor)

    def fit(self, X, y=None):
        check_waveform_list(X)
        self.stft_ = self._config()
        return self

    def transform(self, X):
        check_is_fitted(self, "stft_")
        clips = check_waveform_list(X)
        return _stack_if_uniform([mel_transform(AudioClip(np.clip(x, -1, 1)), self.stft_).values for x in clips])


class EffectChain(TransformerMixin, BaseEstimator):
    """Fixed distortion/clipping chain applied to every clip."""

    def __init__(self, distortion_gain_db=35.0, clip_threshold_db=-35.0, mix_alpha=1.0,
                 apply_distortion=True, apply_clipping=True):
        self.distortion_gain_db = distortion_gain_db
        self.clip_threshold_db = clip_threshold_db
        self.mix_alpha = mix_alpha
        self.apply_distortion = apply_distortion
        self.apply_clipping = apply_clipping

    def fit(self, X, y=None):
        check_waveform_list(X)
        self.config_ = EffectChainConfig(
            distortion_gain_db=self.distortion_gain_db,
            clip_threshold_db=self.clip_threshold_db,
            mix_alpha=self.mix_alpha,
            apply_distortion=self.apply_distortion,
            apply_clipping=self.apply_clipping,
        )
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        out = []
        for x in check_waveform_list(X):
            dry = AudioClip(x)
            out.append(mix(dry, effect_chain(dry, self.config_), self.config_.mix_alpha).samples)
        return _stack_if_uniform(out)


class TwoStageRestorer(BaseEstimator):
    """Denoiser + vocoder restorer; ``fit(X_wet, y_dry)`` runs all three training phases.

    ``denoiser``, ``vocoder``, ``stft`` and ``losses`` are plain dicts of config
    overrides. ``schedules`` maps a phase name to :class:`TrainSchedule`
    overrides; ``*_steps`` are shortcuts for each phase's ``max_steps``.
    """

    def __init__(self, denoiser=None, vocoder=None, stft=None, losses=None, schedules=None,
                 denoiser_steps=1000, vocoder_steps=1000, finetune_steps=500, batch_size=16,
                 crop_seconds=1.0, random_state=0, device=None):
        self.denoiser = denoiser
        self.vocoder = vocoder
        self.stft = stft
        self.losses = losses
        self.schedules = schedules
        self.denoiser_steps = denoiser_steps
        self.vocoder_steps = vocoder_steps
        self.finetune_steps = finetune_steps
        self.batch_size = batch_size
        self.crop_seconds = crop_seconds
        self.random_state = random_state
        self.device = device

    def _schedule(self, phase, steps):
        params = {"max_steps": steps, "batch_size": self.batch_size, "crop_seconds": self.crop_seconds,
                  "seed": self.random_state, "early_stop_patience": None}
        params.update((self.schedules or {}).get(phase, {}))
        return TrainSchedule.for_phase(phase, **params)

    def fit(self, X, y):
        wet = check_waveform_list(X, "X")
        dry = check_waveform_list(y, "y")
        if len(wet) != len(dry):
            raise ValidationError(f"X has {len(wet)} clips but y has {len(dry)}")
        stft = StftConfig(**(self.stft or {}))
        den_cfg = DenoiserConfig(**{"c_bin": stft.n_mels, **(self.denoiser or {})})
        voc_cfg = VocoderConfig(**{"mel_bins": stft.n_mels, "hop_length": stft.hop_length, **(self.vocoder or {})})
        losses = LossWeights(**(self.losses or {}))
        corpus = PairCorpus([str(i) for i in range(len(wet))], dry, wet, stft.sample_rate)

        den = train_denoiser(corpus, den_cfg, self._schedule("denoiser", self.denoiser_steps), stft,
                             device=self.device)
        voc = train_vocoder(corpus, voc_cfg, self._schedule("vocoder", self.vocoder_steps), stft, losses,
                            device=self.device)
        ft = finetune_vocoder(corpus, den.models["denoiser"], _as_checkpoint(voc, voc_cfg, stft),
                              self._schedule("finetune", self.finetune_steps), losses, device=self.device)
        self.history_ = {"denoiser": den.history, "vocoder": voc.history, "finetune": ft.history}
        self.pipeline_ = RestorationPipeline(den.models["denoiser"].cpu(), ft.models["generator"].cpu(), stft)
        return self

    def predict(self, X, trim=True):
        check_is_fitted(self, "pipeline_")
        out = [self.pipeline_.restore(AudioClip(np.clip(x, -1, 1)), trim=trim).samples for x in check_waveform_list(X)]
        return _stack_if_uniform(out)

    def score(self, X, y):
        """Mean SI-SDR (dB) of the restorations against ``y``."""
        preds = self.predict(X)
        return float(np.mean([si_sdr(p, t) for p, t in zip(preds, check_waveform_list(y, "y"))]))

    def save(self, path):
        check_is_fitted(self, "pipeline_")
        return self.pipeline_.save(path)

    @classmethod
    def from_pipeline(cls, path):
        est = cls()
        est.pipeline_ = RestorationPipeline.load(path)
        return est


def _as_checkpoint(result, cfg, stft):
    """Wrap an in-memory vocoder result in the :class:`Checkpoint` shape finetuning expects."""
    tensors = {}
    for component in ("generator", "discriminator"):
        for key, value in result.models[component].state_dict().items():
            tensors[f"{component}/{key}"] = value.detach().cpu().numpy()
    return Checkpoint(kind="vocoder", config={"vocoder": cfg.to_dict(), "stft": stft.to_dict()}, step=result.step,
                      tensors=tensors, optimizers={}, extra={})

