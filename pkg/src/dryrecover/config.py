"""Declarative toolkit configuration (YAML) with presets and layered overrides.

Precedence is defaults < config file < command-line flags. A file looks like::

    version: 1
    preset: large            # large | base | custom
    seed: 0
    stft: {hop_length: 512}
    denoiser: {dropout: 0.1}
    vocoder: {initial_channels: 512}
    losses: {lambda_mel: 45.0}
    schedule:
      denoiser: {max_steps: 1500000, batch_size: 64}
      vocoder: {}
      finetune: {}
    paths: {corpus_root: corpus, checkpoints_dir: checkpoints, reports_dir: reports}

``large`` and ``base`` force the denoiser depth/width; ``custom`` leaves
whatever the file or flags set.
"""

import copy
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from dryrecover.denoiser import PRESETS, DenoiserConfig
from dryrecover.dspcore import StftConfig
from dryrecover.errors import AudioIOError, ValidationError
from dryrecover.training import PHASES, LossWeights, TrainSchedule
from dryrecover.vocoder import VocoderConfig

CONFIG_VERSION = 1
SECTIONS = ("version", "preset", "seed", "stft", "denoiser", "vocoder", "losses", "schedule", "paths")
PATH_KEYS = ("corpus_root", "checkpoints_dir", "reports_dir")


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads ``1e-5`` (no dot) as a float, as YAML 1.2 does."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                  |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                  |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                  |[-+]?\.(?:inf|Inf|INF)
                  |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


def _yaml_load(text):
    return yaml.load(text, Loader=_Loader)  # noqa: S506


def default_dict():
    return {
        "version": CONFIG_VERSION,
        "preset": "large",
        "seed": 0,
        "stft": {},
        "denoiser": {},
        "vocoder": {},
        "losses": {},
        "schedule": {phase: {} for phase in PHASES},
        "paths": {"corpus_root": "corpus", "checkpoints_dir": "checkpoints", "reports_dir": "reports"},
    }


@dataclass
class ToolkitConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    vocoder: VocoderConfig = field(default_factory=VocoderConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    schedules: dict = field(default_factory=lambda: {p: TrainSchedule.for_phase(p) for p in PHASES})
    paths: dict = field(default_factory=lambda: dict(default_dict()["paths"]))
    seed: int = 0
    preset: str = "large"
    raw: dict = field(default_factory=default_dict, repr=False)

    def schedule(self, phase):
        return self.schedules[phase]

    def to_dict(self):
        return {
            "version": CONFIG_VERSION,
            "preset": self.preset,
            "seed": self.seed,
            "stft": self.stft.to_dict(),
            "denoiser": self.denoiser.to_dict(),
            "vocoder": self.vocoder.to_dict(),
            "losses": self.losses.to_dict(),
            "schedule": {p: s.to_dict() for p, s in self.schedules.items()},
            "paths": dict(self.paths),
        }


def _merge(base, update, where="config"):
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value, f"{where}.{key}")
        else:
            base[key] = value
    return base


def _build(cls, params, where):
    try:
        return cls(**params)
    except TypeError as exc:
        raise ValidationError(f"invalid keys in {where}: {exc}") from exc


def from_dict(data):
    """Validate a nested dict (already merged over defaults) into a :class:`ToolkitConfig`."""
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ValidationError(f"unknown config sections: {sorted(unknown)}")
    if data.get("version") != CONFIG_VERSION:
        raise ValidationError(f"config version must be {CONFIG_VERSION}, got {data.get('version')!r}")
    preset = data.get("preset", "large")
    if preset not in (*PRESETS, "custom"):
        raise ValidationError(f"preset must be one of {sorted(PRESETS) + ['custom']}, got {preset!r}")
    den = dict(data.get("denoiser") or {})
    if preset != "custom":
        den.update(PRESETS[preset])
    stft = _build(StftConfig, data.get("stft") or {}, "stft")
    den.setdefault("c_bin", stft.n_mels)
    voc = dict(data.get("vocoder") or {})
    voc.setdefault("mel_bins", stft.n_mels)
    voc.setdefault("hop_length", stft.hop_length)
    seed = int(data.get("seed", 0))
    schedule_data = data.get("schedule") or {}
    unknown = set(schedule_data) - set(PHASES)
    if unknown:
        raise ValidationError(f"unknown schedule phases: {sorted(unknown)}")
    schedules = {}
    for phase in PHASES:
        params = dict(schedule_data.get(phase) or {})
        params.setdefault("seed", seed)
        if params.pop("phase", phase) != phase:
            raise ValidationError(f"schedule.{phase}.phase must be {phase!r}")
        try:
            schedules[phase] = TrainSchedule.for_phase(phase, **params)
        except TypeError as exc:
            raise ValidationError(f"invalid keys in schedule.{phase}: {exc}") from exc
    paths = dict(data.get("paths") or {})
    unknown = set(paths) - set(PATH_KEYS)
    if unknown:
        raise ValidationError(f"unknown path keys: {sorted(unknown)}")
    return ToolkitConfig(
        stft=stft,
        denoiser=_build(DenoiserConfig, den, "denoiser"),
        vocoder=_build(VocoderConfig, voc, "vocoder"),
        losses=_build(LossWeights, data.get("losses") or {}, "losses"),
        schedules=schedules,
        paths=paths,
        seed=seed,
        preset=preset,
        raw=copy.deepcopy(data),
    )


def parse_assignment(text):
    """``"a.b.c=value"`` -> nested dict; the value is parsed as YAML."""
    if "=" not in text:
        raise ValidationError(f"override {text!r} must look like key.path=value")
    key, value = text.split("=", 1)
    node = out = {}
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = _yaml_load(value)
    return out


def load_config(path=None, overrides=()):
    """Defaults, then the YAML file at ``path``, then each override dict in order."""
    data = default_dict()
    if path is not None:
        try:
            loaded = _yaml_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise AudioIOError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ValidationError(f"malformed config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ValidationError("config file must hold a mapping")
        _merge(data, loaded)
    for override in overrides:
        _merge(data, override)
    return from_dict(data)


def dump_config(cfg, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
