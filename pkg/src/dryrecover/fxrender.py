"""Synthetic distortion/clipping renderer for building paired training data.

The wet signal follows ``y = alpha * f(x) + (1 - alpha) * x`` where ``f`` is a
gain-into-tanh waveshaper optionally followed by a hard clipper. The default
sampler draws fully wet chains (``alpha = 1``).
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from dryrecover.dspcore import AudioClip
from dryrecover.errors import ValidationError
from dryrecover.validation import check_finite_scalar

GAIN_RANGE_DB = (20.0, 50.0)
THRESHOLD_RANGE_DB = (-50.0, -20.0)


def make_rng(seed):
    """PCG64 generator; the one RNG algorithm used for every sampled quantity."""
    return np.random.Generator(np.random.PCG64(seed))


def db_to_amplitude(db):
    return 10.0 ** (db / 20.0)


@dataclass(frozen=True)
class EffectChainConfig:
    distortion_gain_db: float = 30.0
    clip_threshold_db: float = -30.0
    mix_alpha: float = 1.0
    apply_distortion: bool = True
    apply_clipping: bool = False
    seed: int = 0

    def __post_init__(self):
        check_finite_scalar(self.distortion_gain_db, "distortion_gain_db")
        check_finite_scalar(self.clip_threshold_db, "clip_threshold_db")
        alpha = check_finite_scalar(self.mix_alpha, "mix_alpha")
        if not 0.0 <= alpha <= 1.0:
            raise ValidationError(f"mix_alpha must lie in [0, 1], got {alpha}")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def apply_distortion(x, gain_db):
    """Waveshaper ``tanh(x * 10**(gain_db / 20))``."""
    gain = db_to_amplitude(check_finite_scalar(gain_db, "gain_db"))
    y = np.tanh(x.samples.astype(np.float64) * gain)
    return AudioClip(y.astype(np.float32), x.sample_rate)


def apply_clipping(x, threshold_db):
    """Symmetric hard clip at ``10**(threshold_db / 20)``."""
    t = db_to_amplitude(check_finite_scalar(threshold_db, "threshold_db"))
    # clamp in float32 against the float32-rounded threshold so |y| <= t holds exactly
    t32 = np.float32(t)
    if float(t32) > t:
        t32 = np.nextafter(t32, np.float32(0))
    return AudioClip(np.clip(x.samples, -t32, t32), x.sample_rate)


def mix(dry, wet, alpha):
    alpha = check_finite_scalar(alpha, "alpha")
    if len(dry) != len(wet) or dry.sample_rate != wet.sample_rate:
        raise ValidationError("dry and wet must share length and sample rate")
    if alpha == 1.0:
        return wet
    if alpha == 0.0:
        return dry
    y = alpha * wet.samples.astype(np.float64) + (1.0 - alpha) * dry.samples.astype(np.float64)
    return AudioClip(y.astype(np.float32), dry.sample_rate)


def effect_chain(x, cfg):
    """Distortion first, then clipping, each gated by its flag."""
    if not (cfg.apply_distortion or cfg.apply_clipping):
        raise ValidationError("effect chain has no active stage")
    y = x
    if cfg.apply_distortion:
        y = apply_distortion(y, cfg.distortion_gain_db)
    if cfg.apply_clipping:
        y = apply_clipping(y, cfg.clip_threshold_db)
    return y


def render_pair(dry, cfg):
    """Return ``(dry, wet)`` with ``wet = mix(dry, chain(dry), alpha)``."""
    return dry, mix(dry, effect_chain(dry, cfg), cfg.mix_alpha)


def sample_effect_config(rng_seed):
    """Draw a chain per the synthetic recipe: gain U[20, 50] dB, threshold U[-50, -20] dB.

    Each stage is switched on with probability 0.5; draws with both stages off
    are rejected.
    """
    rng = make_rng(rng_seed)
    gain = rng.uniform(*GAIN_RANGE_DB)
    threshold = rng.uniform(*THRESHOLD_RANGE_DB)
    while True:
        use_dist, use_clip = (bool(v) for v in rng.random(2) < 0.5)
        if use_dist or use_clip:
            break
    return EffectChainConfig(
        distortion_gain_db=float(gain),
        clip_threshold_db=float(threshold),
        mix_alpha=1.0,
        apply_distortion=use_dist,
        apply_clipping=use_clip,
        seed=int(rng_seed),
    )
