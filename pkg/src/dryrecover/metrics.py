"""Objective metrics: ESR, SI-SDR, multi-resolution STFT distance and Fréchet audio distance."""

import dataclasses
import importlib
import importlib.util
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dryrecover import __version__
from dryrecover.dspcore import AudioClip, StftConfig, load_audio, mel_transform
from dryrecover.errors import ValidationError
from dryrecover.validation import check_same_length, check_waveform

logger = logging.getLogger(__name__)

SI_SDR_CLAMP_DB = 100.0
MRSTFT_RESOLUTIONS = ((512, 128), (1024, 256), (2048, 512))
MRSTFT_POWER_FLOOR = 1e-8
FRECHET_JITTER = 1e-6
REPORT_SCHEMA_VERSION = 1
REPORT_COLUMNS = ("FAD", "ESR", "SISDR", "MR-STFT")


def _samples(x, name):
    if isinstance(x, AudioClip):
        x = x.samples
    return check_waveform(x, name=name, dtype=np.float64)


def esr(estimate, reference):
    """Error-to-signal ratio ``sum((ref - est)^2) / sum(ref^2)`` (no pre-emphasis)."""
    est, ref = _samples(estimate, "estimate"), _samples(reference, "reference")
    check_same_length(est, ref)
    energy = np.dot(ref, ref)
    if energy == 0:
        raise ValidationError("reference is all zeros")
    err = ref - est
    return float(np.dot(err, err) / energy)


def si_sdr(estimate, reference):
    """Scale-invariant SDR in dB, clamped to +/-100 dB."""
    est, ref = _samples(estimate, "estimate"), _samples(reference, "reference")
    check_same_length(est, ref)
    ref_energy = np.dot(ref, ref)
    if ref_energy == 0 or not np.any(est):
        raise ValidationError("SI-SDR undefined for zero-energy signals")
    target = (np.dot(est, ref) / ref_energy) * ref
    residual = est - target
    num, den = np.dot(target, target), np.dot(residual, residual)
    if den == 0:
        return SI_SDR_CLAMP_DB
    if num == 0:
        return -SI_SDR_CLAMP_DB
    return float(np.clip(10.0 * np.log10(num / den), -SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB))


def stft_magnitude(x, n_fft, hop):
    """Hann-windowed, reflect-centred STFT magnitude, floored at ``sqrt(1e-8)``; shape ``(frames, bins)``."""
    pad = n_fft // 2
    padded = np.pad(x, pad, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop]
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n_fft) / n_fft)
    spec = np.fft.rfft(frames * window, axis=-1)
    power = spec.real**2 + spec.imag**2
    return np.sqrt(np.maximum(power, MRSTFT_POWER_FLOOR))


def mr_stft(estimate, reference, resolutions=MRSTFT_RESOLUTIONS):
    """Mean over resolutions of (spectral convergence + mean log-magnitude L1)."""
    est, ref = _samples(estimate, "estimate"), _samples(reference, "reference")
    check_same_length(est, ref)
    largest = max(n for n, _ in resolutions)
    if len(ref) < largest:
        raise ValidationError(f"signals shorter than the largest window ({len(ref)} < {largest})")
    total = 0.0
    for n_fft, hop in resolutions:
        m_est, m_ref = stft_magnitude(est, n_fft, hop), stft_magnitude(ref, n_fft, hop)
        sc = np.linalg.norm(m_ref - m_est) / np.linalg.norm(m_ref)
        log_l1 = np.mean(np.abs(np.log(m_ref) - np.log(m_est)))
        total += sc + log_l1
    return float(total / len(resolutions))


# -- Fréchet distance --------------------------------------------------------------

@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    model_id: str = "unknown"

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if self.vectors.ndim != 2:
            raise ValidationError("embedding vectors must form an (M, D) matrix")
        if not np.all(np.isfinite(self.vectors)):
            raise ValidationError("embeddings contain non-finite values")

    def statistics(self):
        m, d = self.vectors.shape
        if m < d + 1:
            raise ValidationError(f"need at least D + 1 = {d + 1} embeddings for a covariance estimate, got {m}")
        return self.vectors.mean(axis=0), np.atleast_2d(np.cov(self.vectors, rowvar=False))


def _psd_sqrt(mat):
    w, v = np.linalg.eigh((mat + mat.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def _is_positive_definite(mat):
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        return False
    return True


def frechet_from_stats(mu1, sigma1, mu2, sigma2):
    """``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`` via a symmetrised square root.

    A 1e-6 diagonal jitter is added only when a covariance is not positive
    definite; if it still is not, the input is rejected.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, float)), np.atleast_1d(np.asarray(mu2, float))
    sigma1, sigma2 = np.atleast_2d(np.asarray(sigma1, float)), np.atleast_2d(np.asarray(sigma2, float))
    if mu1.shape != mu2.shape or sigma1.shape != sigma2.shape or sigma1.shape != (mu1.size, mu1.size):
        raise ValidationError("mean/covariance dimensions disagree")
    if not (_is_positive_definite(sigma1) and _is_positive_definite(sigma2)):
        eye = np.eye(mu1.size) * FRECHET_JITTER
        sigma1, sigma2 = sigma1 + eye, sigma2 + eye
        if not (_is_positive_definite(sigma1) and _is_positive_definite(sigma2)):
            raise ValidationError("covariance is rank deficient even after jitter")
    root1 = _psd_sqrt(sigma1)
    inner = root1 @ sigma2 @ root1
    covmean_trace = np.sum(np.sqrt(np.clip(np.linalg.eigvalsh((inner + inner.T) / 2), 0, None)))
    diff = mu1 - mu2
    value = diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * covmean_trace
    return float(max(value, 0.0))


def frechet_distance(a, b):
    mu_a, cov_a = a.statistics()
    mu_b, cov_b = b.statistics()
    if mu_a.shape != mu_b.shape:
        raise ValidationError("embedding dimensions differ")
    return frechet_from_stats(mu_a, cov_a, mu_b, cov_b)


# -- embedding extractors ----------------------------------------------------------

class MelStatsExtractor:
    """Reference extractor: per-band mean and std of log-Mel over fixed windows.

    Each clip yields one 256-dimensional vector per ``window_frames``-frame
    block (a trailing partial block is dropped unless it is the only one).
    """

    def __init__(self, window_frames=16, stft=None):
        self.window_frames = window_frames
        self.stft = stft or StftConfig()
        self.model_id = f"mel-stats-v1-w{window_frames}"

    def __call__(self, clip):
        mel = mel_transform(clip, self.stft).values.astype(np.float64)
        n_blocks = max(1, mel.shape[0] // self.window_frames)
        blocks = [mel[i * self.window_frames : (i + 1) * self.window_frames] for i in range(n_blocks)]
        return np.stack([np.concatenate([b.mean(axis=0), b.std(axis=0)]) for b in blocks])


class ExternalExtractor:
    """Wraps a user callable ``embed(samples, sample_rate) -> (n, D) or (D,)`` array.

    ``spec`` is a ``.py`` file defining ``embed`` (and optionally ``MODEL_ID``)
    or an import path ``package.module:function``.
    """

    def __init__(self, spec):
        if spec.endswith(".py"):
            module_spec = importlib.util.spec_from_file_location("dryrecover_external_embedding", spec)
            if module_spec is None:
                raise ValidationError(f"cannot import {spec}")
            module = importlib.util.module_from_spec(module_spec)
            module_spec.loader.exec_module(module)
            fn = getattr(module, "embed", None)
        else:
            mod_name, _, attr = spec.partition(":")
            module = importlib.import_module(mod_name)
            fn = getattr(module, attr or "embed", None)
        if not callable(fn):
            raise ValidationError(f"{spec} does not provide an embed(samples, sample_rate) function")
        self.fn = fn
        self.model_id = str(getattr(module, "MODEL_ID", f"external:{spec}"))

    def __call__(self, clip):
        return np.atleast_2d(np.asarray(self.fn(clip.samples, clip.sample_rate), dtype=np.float64))


def make_extractor(name):
    if name in (None, "reference"):
        return MelStatsExtractor()
    if name.startswith("external:"):
        return ExternalExtractor(name[len("external:"):])
    raise ValidationError(f"unknown embedding extractor {name!r}")


# -- corpus evaluation -------------------------------------------------------------

@dataclass
class MetricsReport:
    per_pair: list
    corpus: dict
    embedding_model_id: str
    toolkit_version: str = __version__
    columns: tuple = REPORT_COLUMNS
    schema_version: int = REPORT_SCHEMA_VERSION
    notes: list = field(default_factory=list)

    def table_row(self):
        c = self.corpus
        return [c.get("fad"), c["esr_mean"], c["si_sdr_db_mean"], c["mr_stft_mean"]]

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["columns"] = list(self.columns)
        d["table_row"] = self.table_row()
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        d.pop("table_row", None)
        d["columns"] = tuple(d["columns"])
        return cls(**d)

    def format_table(self):
        fmt = lambda v: "n/a" if v is None else f"{v:.3f}"  # noqa: E731
        header = " | ".join(f"{c:>8}" for c in self.columns)
        row = " | ".join(f"{fmt(v):>8}" for v in self.table_row())
        return f"{header}\n{row}"


def _summary(values):
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(np.median(arr))


def evaluate_pairs(estimates, references, ids=None, extractor=None):
    """Metrics over in-memory clip lists (same order)."""
    if len(estimates) != len(references) or not estimates:
        raise ValidationError("need equally many (non-zero) estimates and references")
    ids = ids or [str(i) for i in range(len(estimates))]
    extractor = extractor or MelStatsExtractor()
    per_pair, emb_est, emb_ref = [], [], []
    for pair_id, est, ref in zip(ids, estimates, references):
        row = {"id": pair_id, "esr": esr(est, ref), "si_sdr_db": si_sdr(est, ref), "mr_stft": mr_stft(est, ref)}
        row["si_sdr_clamped"] = abs(row["si_sdr_db"]) >= SI_SDR_CLAMP_DB
        per_pair.append(row)
        emb_est.append(extractor(est))
        emb_ref.append(extractor(ref))
    corpus = {"count": len(per_pair)}
    for key in ("esr", "si_sdr_db", "mr_stft"):
        corpus[f"{key}_mean"], corpus[f"{key}_median"] = _summary([r[key] for r in per_pair])
    notes = []
    try:
        corpus["fad"] = frechet_distance(
            EmbeddingSet(np.concatenate(emb_est), extractor.model_id),
            EmbeddingSet(np.concatenate(emb_ref), extractor.model_id),
        )
    except ValidationError as exc:
        corpus["fad"] = None
        notes.append(f"FAD not computed: {exc}")
    return MetricsReport(per_pair, corpus, extractor.model_id, notes=notes)


def evaluate_corpus(estimates_dir, references_dir, embedding_extractor=None, max_length_mismatch=512):
    """Score every ``estimates_dir/X.wav`` against ``references_dir/X.wav``.

    Pairs whose lengths differ by at most ``max_length_mismatch`` samples are
    trimmed to the shorter one; larger mismatches are errors.
    """
    est_files = {p.stem: p for p in sorted(Path(estimates_dir).glob("*.wav"))}
    ref_files = {p.stem: p for p in sorted(Path(references_dir).glob("*.wav"))}
    unmatched = sorted(set(est_files) ^ set(ref_files))
    if unmatched:
        raise ValidationError(f"unmatched files: {', '.join(unmatched)}")
    if not est_files:
        raise ValidationError("no WAV files to evaluate")
    ids = sorted(est_files)
    estimates, references = [], []
    for pair_id in ids:
        est, ref = load_audio(est_files[pair_id]), load_audio(ref_files[pair_id])
        n = min(len(est), len(ref))
        if max(len(est), len(ref)) - n > max_length_mismatch:
            raise ValidationError(f"{pair_id}: length mismatch {len(est)} vs {len(ref)} samples")
        estimates.append(AudioClip(est.samples[:n], est.sample_rate))
        references.append(AudioClip(ref.samples[:n], ref.sample_rate))
    return evaluate_pairs(estimates, references, ids, embedding_extractor)


def count_parameters(module):
    """Trainable parameters of a torch module."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
