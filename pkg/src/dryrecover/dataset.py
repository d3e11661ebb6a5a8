"""Paired corpus layout, manifests, hop-aligned cropping and batch assembly.

Corpus layout::

    <root>/dry/*.wav
    <root>/wet/*.wav
    <root>/manifest.jsonl

The manifest is line-delimited JSON. Line one is a header carrying
``schema_version`` and ``master_seed``; each following line is one pair.
"""

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile

from dryrecover.dspcore import SAMPLE_RATE, AudioClip, MelSpec, StftConfig, load_audio, mel_transform
from dryrecover.errors import AudioIOError, ValidationError
from dryrecover.fxrender import make_rng

MANIFEST_NAME = "manifest.jsonl"
MANIFEST_SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass
class ManifestEntry:
    id: str
    dry_path: str
    wet_path: str
    duration_s: float
    split: str = "train"
    effect_config: dict | None = None

    def to_dict(self):
        return {
            "id": self.id,
            "dry_path": self.dry_path,
            "wet_path": self.wet_path,
            "duration_s": self.duration_s,
            "effect_config": self.effect_config,
            "split": self.split,
        }


@dataclass
class PairManifest:
    entries: list = field(default_factory=list)
    master_seed: int = 0
    root: str | None = None

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def resolve(self, relpath):
        if self.root is None or os.path.isabs(relpath):
            return relpath
        return os.path.join(self.root, relpath)

    def counts(self):
        return {s: len(self.split(s)) for s in SPLITS}


def write_manifest(manifest, path):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        header = {"schema_version": MANIFEST_SCHEMA_VERSION, "master_seed": manifest.master_seed}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for entry in manifest.entries:
            fh.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise AudioIOError(f"cannot read manifest {path}: {exc}") from exc
    if not lines:
        raise ValidationError(f"empty manifest {path}")
    header = json.loads(lines[0])
    if header.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise ValidationError(f"unsupported manifest schema {header.get('schema_version')!r}")
    entries = [ManifestEntry(**json.loads(line)) for line in lines[1:] if line.strip()]
    return PairManifest(entries, int(header["master_seed"]), root=str(path.parent))


def _wav_info(path):
    try:
        rate, data = wavfile.read(path, mmap=True)
    except (ValueError, OSError, EOFError) as exc:
        raise AudioIOError(f"cannot decode {path}: {exc}") from exc
    return int(rate), int(data.shape[0])


def _split_counts(n, ratios):
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios < 0) or ratios.sum() <= 0:
        raise ValidationError(f"split_ratios must be three non-negative numbers, got {ratios}")
    exact = ratios / ratios.sum() * n
    counts = np.floor(exact).astype(int)
    # largest remainder; ties broken in train, val, test order
    for i in np.argsort(-(exact - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts


def build_manifest(dry_dir, wet_dir, split_ratios=(0.8, 0.1, 0.1), master_seed=0, effect_configs=None, root=None):
    """Pair same-named WAVs in ``dry_dir``/``wet_dir`` and assign splits.

    Paths are stored relative to ``root`` (default: the common parent).
    """
    dry_dir, wet_dir = Path(dry_dir), Path(wet_dir)
    for d in (dry_dir, wet_dir):
        if not d.is_dir():
            raise AudioIOError(f"not a directory: {d}")
    dry = {p.stem: p for p in sorted(dry_dir.glob("*.wav"))}
    wet = {p.stem: p for p in sorted(wet_dir.glob("*.wav"))}
    orphans = sorted(set(dry) ^ set(wet))
    if orphans:
        raise ValidationError(f"unpaired files: {', '.join(orphans)}")
    if not dry:
        raise ValidationError(f"no WAV pairs found in {dry_dir} / {wet_dir}")
    root = Path(root) if root is not None else Path(os.path.commonpath([dry_dir.resolve(), wet_dir.resolve()]))
    effect_configs = effect_configs or {}

    ids = sorted(dry)
    entries = {}
    mismatched = []
    for pair_id in ids:
        rate_d, len_d = _wav_info(dry[pair_id])
        rate_w, len_w = _wav_info(wet[pair_id])
        if rate_d != rate_w or len_d != len_w:
            mismatched.append(pair_id)
            continue
        entries[pair_id] = ManifestEntry(
            id=pair_id,
            dry_path=os.path.relpath(dry[pair_id].resolve(), root),
            wet_path=os.path.relpath(wet[pair_id].resolve(), root),
            duration_s=len_d / rate_d,
            effect_config=effect_configs.get(pair_id),
        )
    if mismatched:
        raise ValidationError(f"duration or sample-rate mismatch in pairs: {', '.join(mismatched)}")

    order = make_rng(master_seed).permutation(len(ids))
    counts = _split_counts(len(ids), split_ratios)
    bounds = np.cumsum(counts)
    for rank, idx in enumerate(order):
        entries[ids[idx]].split = SPLITS[int(np.searchsorted(bounds, rank, side="right"))]
    return PairManifest([entries[i] for i in ids], int(master_seed), root=str(root))


# -- examples ----------------------------------------------------------------

@dataclass
class TrainingExample:
    dry_wave: AudioClip
    wet_mel: MelSpec
    dry_mel: MelSpec
    source_id: str
    offset_samples: int


def crop_length(crop_seconds, sample_rate=SAMPLE_RATE, hop_length=512):
    """Crop size in samples, rounded down to a whole number of hops."""
    n = int(math.floor(crop_seconds * sample_rate / hop_length)) * hop_length
    if n <= 0:
        raise ValidationError(f"crop of {crop_seconds} s is shorter than one hop")
    return n


def draw_offset(num_samples, crop_samples, rng, hop_length=512):
    if crop_samples > num_samples:
        raise ValidationError(f"crop ({crop_samples} samples) longer than clip ({num_samples} samples)")
    max_hops = (num_samples - crop_samples) // hop_length
    return int(rng.integers(0, max_hops + 1)) * hop_length


def make_example(entry, crop_seconds, rng, stft=None, manifest=None):
    """Crop one pair at a random hop-aligned offset and compute both Mels."""
    stft = stft or StftConfig()
    dry_path = manifest.resolve(entry.dry_path) if manifest else entry.dry_path
    wet_path = manifest.resolve(entry.wet_path) if manifest else entry.wet_path
    dry = load_audio(dry_path, stft.sample_rate)
    wet = load_audio(wet_path, stft.sample_rate)
    if len(dry) != len(wet):
        raise ValidationError(f"pair {entry.id}: dry/wet lengths differ")
    if crop_seconds > len(dry) / stft.sample_rate + 1e-9:
        raise ValidationError(f"crop of {crop_seconds} s exceeds clip {entry.id} ({dry.duration:.3f} s)")
    n = crop_length(crop_seconds, stft.sample_rate, stft.hop_length)
    offset = draw_offset(len(dry), n, rng, stft.hop_length)
    dry_seg = AudioClip(dry.samples[offset : offset + n], stft.sample_rate)
    wet_seg = AudioClip(wet.samples[offset : offset + n], stft.sample_rate)
    return TrainingExample(
        dry_wave=dry_seg,
        wet_mel=mel_transform(wet_seg, stft),
        dry_mel=mel_transform(dry_seg, stft),
        source_id=entry.id,
        offset_samples=offset,
    )


class PairCorpus:
    """In-memory paired waveforms with deterministic batch sampling.

    The training loops draw fixed-size crops from here and run the Mel
    frontend on whole batches.
    """

    def __init__(self, ids, dry, wet, sample_rate=SAMPLE_RATE):
        if not ids:
            raise ValidationError("corpus is empty")
        self.ids = list(ids)
        self.dry = [np.ascontiguousarray(d, dtype=np.float32) for d in dry]
        self.wet = [np.ascontiguousarray(w, dtype=np.float32) for w in wet]
        self.sample_rate = sample_rate
        for i, d, w in zip(self.ids, self.dry, self.wet):
            if len(d) != len(w):
                raise ValidationError(f"pair {i}: dry/wet lengths differ")

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_manifest(cls, manifest, split, sample_rate=SAMPLE_RATE):
        entries = manifest.split(split)
        dry = [load_audio(manifest.resolve(e.dry_path), sample_rate).samples for e in entries]
        wet = [load_audio(manifest.resolve(e.wet_path), sample_rate).samples for e in entries]
        if not entries:
            raise ValidationError(f"split {split!r} is empty")
        return cls([e.id for e in entries], dry, wet, sample_rate)

    def min_length(self):
        return min(len(d) for d in self.dry)

    def epoch_order(self, master_seed, epoch):
        return make_rng([int(master_seed), int(epoch)]).permutation(len(self))

    def batches(self, master_seed, batch_size, crop_samples, hop_length=512, start_epoch=0):
        """Endless stream of ``(dry, wet)`` float32 tensors, shape ``(batch, crop)``.

        Order and offsets depend only on ``(master_seed, epoch)``.
        """
        epoch = start_epoch
        while True:
            order = self.epoch_order(master_seed, epoch)
            rng = make_rng([int(master_seed), int(epoch), 1])
            offsets = [draw_offset(len(self.dry[i]), crop_samples, rng, hop_length) for i in order]
            for start in range(0, len(order), batch_size):
                idx = order[start : start + batch_size]
                off = offsets[start : start + batch_size]
                if len(idx) < batch_size and len(order) >= batch_size:
                    break
                dry = np.stack([self.dry[i][o : o + crop_samples] for i, o in zip(idx, off)])
                wet = np.stack([self.wet[i][o : o + crop_samples] for i, o in zip(idx, off)])
                yield torch.from_numpy(dry), torch.from_numpy(wet)
            epoch += 1

    def fixed_batch(self, crop_samples, hop_length=512):
        """All pairs cropped from offset 0 (used for validation)."""
        n = min(crop_samples, (self.min_length() // hop_length) * hop_length)
        dry = np.stack([d[:n] for d in self.dry])
        wet = np.stack([w[:n] for w in self.wet])
        return torch.from_numpy(dry), torch.from_numpy(wet)
