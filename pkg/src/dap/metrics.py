"""Evaluation metrics: PSNR, spectral SNR, RMS envelope distance, BSS scores.

BSS decomposition uses gain-only (instantaneous) projections onto the
reference span, not filtered projections; scores are capped at +/-100 dB.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .dsp import Waveform, stft

DB_CAP = 100.0


def _capped_db(num: float, den: float) -> float:
    """10*log10(num/den) clipped to [-100, 100] dB, safe at zero endpoints."""
    if num <= den * 1e-10:
        return -DB_CAP
    if den <= num * 1e-10:
        return DB_CAP
    return float(10.0 * np.log10(num / den))


def psnr(ref: Waveform, est: Waveform) -> float:
    """Peak signal-to-noise ratio with peak = max|ref|, capped at 100 dB."""
    r, e = ref.samples, est.samples
    if r.size != e.size:
        raise ValueError(f"length mismatch: {r.size} vs {e.size}")
    peak = np.abs(r).max()
    if peak == 0:
        raise ValueError("zero reference signal")
    err = float(np.mean((r - e) ** 2))
    if err < peak * peak * 1e-10:
        return DB_CAP
    return float(10.0 * np.log10(peak * peak / err))


def spectral_snr(ref: Waveform, est: Waveform, n_fft: int = 1022, hop: int = 64) -> float:
    """SNR between magnitude spectrograms, capped at +/-100 dB."""
    sr = np.abs(stft(ref, n_fft, hop).complex_view)
    se = np.abs(stft(est, n_fft, hop).complex_view)
    num = float(np.sum(sr * sr))
    den = float(np.sum((sr - se) ** 2))
    return _capped_db(num, den)


def envelope(w: Waveform, frame: int = 1024, hop: int = 512) -> np.ndarray:
    """Frame-wise RMS amplitude envelope; the tail frame is zero-padded."""
    x = w.samples
    starts = range(0, max(len(x), 1), hop)
    env = np.empty(len(starts))
    for i, start in enumerate(starts):
        chunk = x[start:start + frame]
        env[i] = np.sqrt(np.sum(chunk * chunk) / frame)
    return env


def envelope_distance(ref: Waveform, est: Waveform) -> float:
    """RMS difference between the two signals' RMS envelopes."""
    if len(ref) != len(est):
        raise ValueError(f"length mismatch: {len(ref)} vs {len(est)}")
    d = envelope(ref) - envelope(est)
    return float(np.sqrt(np.mean(d * d)))


@dataclass(frozen=True)
class BssScores:
    """Per-reference SDR/SIR under the best permutation of estimates."""
    sdr: tuple[float, float]
    sir: tuple[float, float]
    permutation: tuple[int, int]   # permutation[j] = estimate assigned to ref j


def bss_eval(refs: list[Waveform], ests: list[Waveform]) -> BssScores:
    """Gain-only BSS decomposition of each estimate against two references.

    For estimate e assigned to reference s_j:
      s_target = (<e, s_j> / <s_j, s_j>) s_j
      e_interf = P(e) - s_target        (P = projection onto span of both refs)
      e_artif  = e - P(e)
      SDR = 10 log10 |s_target|^2 / |e_interf + e_artif|^2
      SIR = 10 log10 |s_target|^2 / |e_interf|^2
    The permutation maximizing mean SDR is reported.
    """
    if len(refs) != 2 or len(ests) != 2:
        raise ValueError("bss_eval handles exactly two references and two estimates")
    n = len(refs[0])
    if any(len(s) != n for s in refs + ests):
        raise ValueError("all signals must have equal lengths")
    s = np.stack([r.samples for r in refs])          # (2, n)
    gram = s @ s.T
    eigvals = np.linalg.eigvalsh(gram)
    if eigvals[0] <= eigvals[-1] * 1e-12:
        raise ValueError("collinear (or silent) references; separation scores undefined")

    def decompose(e: np.ndarray, j: int) -> tuple[float, float]:
        coeffs = np.linalg.solve(gram, s @ e)
        proj = coeffs @ s
        s_target = (e @ s[j] / gram[j, j]) * s[j]
        e_interf = proj - s_target
        e_artif = e - proj
        p_target = float(s_target @ s_target)
        sdr = _capped_db(p_target, float(np.sum((e_interf + e_artif) ** 2)))
        sir = _capped_db(p_target, float(e_interf @ e_interf))
        return sdr, sir

    best = None
    for perm in itertools.permutations(range(2)):
        scores = [decompose(ests[perm[j]].samples, j) for j in range(2)]
        mean_sdr = 0.5 * (scores[0][0] + scores[1][0])
        if best is None or mean_sdr > best[0]:
            best = (mean_sdr, perm, scores)
    _, perm, scores = best
    return BssScores(sdr=(scores[0][0], scores[1][0]),
                     sir=(scores[0][1], scores[1][1]),
                     permutation=tuple(perm))
