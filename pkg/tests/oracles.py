"""Slow, loop-based reference implementations used as independent test oracles."""

import functools
import math

import numpy as np
import scipy.linalg


def esr_loop(est, ref):
    num = den = 0.0
    for e, r in zip(est.tolist(), ref.tolist()):
        num += (r - e) ** 2
        den += r * r
    return num / den


def si_sdr_loop(est, ref):
    dot = sum(e * r for e, r in zip(est.tolist(), ref.tolist()))
    energy = sum(r * r for r in ref.tolist())
    alpha = dot / energy
    target = [alpha * r for r in ref.tolist()]
    t_energy = sum(t * t for t in target)
    n_energy = sum((e - t) ** 2 for e, t in zip(est.tolist(), target))
    return 10 * math.log10(t_energy / n_energy)


@functools.lru_cache(maxsize=8)
def _dft_basis(n_fft):
    n = np.arange(n_fft)
    k = np.arange(n_fft // 2 + 1)[:, None]
    window = np.array([math.sin(math.pi * i / n_fft) ** 2 for i in range(n_fft)])
    # window folded into the DFT matrix
    return np.exp(-2j * np.pi * k * n[None, :] / n_fft) * window[None, :]


def dft_magnitude(x, n_fft, hop):
    """Explicit DFT-matrix STFT with a periodic Hann window and reflect padding."""
    pad = n_fft // 2
    padded = np.pad(np.asarray(x, np.float64), pad, mode="reflect")
    frames = np.array([padded[s : s + n_fft] for s in range(0, len(padded) - n_fft + 1, hop)])
    spec = frames @ _dft_basis(n_fft).T
    return np.sqrt(np.maximum(np.abs(spec) ** 2, 1e-8))


def mr_stft_loop(est, ref, resolutions=((512, 128), (1024, 256), (2048, 512))):
    total = 0.0
    for n_fft, hop in resolutions:
        a, b = dft_magnitude(est, n_fft, hop), dft_magnitude(ref, n_fft, hop)
        sc = math.sqrt(float(np.sum((b - a) ** 2))) / math.sqrt(float(np.sum(b**2)))
        mag = float(np.mean(np.abs(np.log(b) - np.log(a))))
        total += sc + mag
    return total / len(resolutions)


def mean_cov_loop(vectors):
    m, d = vectors.shape
    mu = [sum(vectors[i, j] for i in range(m)) / m for j in range(d)]
    cov = np.zeros((d, d))
    for a in range(d):
        for b in range(d):
            cov[a, b] = sum((vectors[i, a] - mu[a]) * (vectors[i, b] - mu[b]) for i in range(m)) / (m - 1)
    return np.array(mu), cov


def frechet_sqrtm(mu1, s1, mu2, s2):
    """Textbook form with the Schur-based ``scipy.linalg.sqrtm`` of ``S1 S2``."""
    covmean = scipy.linalg.sqrtm(s1 @ s2)
    covmean = covmean.real
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2 * np.trace(covmean))
