"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

import math

import numpy as np

from dryrecover.errors import ValidationError


def check_finite_scalar(value, name):
    try:
        value = float(value)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{name} must be a real number, got {value!r}") from exc
    if not math.isfinite(value):
        raise ValidationError(f"{name} must be finite, got {value}")
    return value


def check_waveform(x, name="waveform", dtype=np.float64, allow_empty=False):
    """Return ``x`` as a finite 1-D array of ``dtype``."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0 and not allow_empty:
        raise ValidationError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite samples")
    return arr


def check_same_length(a, b, names=("estimate", "reference")):
    if len(a) != len(b):
        raise ValidationError(
            f"{names[0]} and {names[1]} differ in length: {len(a)} != {len(b)}"
        )


def check_mel_batch(mel, n_mels=None, name="mel"):
    """Validate a ``(batch, frames, bins)`` or ``(frames, bins)`` array-like.

    Works for numpy arrays and torch tensors alike; returns the input untouched.
    """
    shape = tuple(mel.shape)
    if len(shape) not in (2, 3):
        raise ValidationError(f"{name} must be (frames, bins) or (batch, frames, bins), got {shape}")
    if n_mels is not None and shape[-1] != n_mels:
        raise ValidationError(f"{name} must have {n_mels} bins, got {shape[-1]}")
    if shape[-2] < 1:
        raise ValidationError(f"{name} has no frames")
    finite = mel.isfinite().all() if hasattr(mel, "isfinite") else np.isfinite(mel).all()
    if not bool(finite):
        raise ValidationError(f"{name} contains non-finite values")
    return mel


def check_waveform_list(X, name="X"):
    """Accept a 2-D array or a sequence of 1-D waveforms; return a list of float32 arrays."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        items = list(X)
    elif isinstance(X, np.ndarray) and X.ndim == 1 and X.dtype != object:
        items = [X]
    else:
        items = list(X)
    if not items:
        raise ValidationError(f"{name} contains no waveforms")
    return [check_waveform(x, name=f"{name}[{i}]", dtype=np.float32) for i, x in enumerate(items)]
