"""Waveform I/O and the spectral front/back end.

STFT with window length 1022 and hop 64 over a periodic Hann window,
center reflect padding, and a least-squares overlap-add inverse. The
two-channel (real, imaginary) spectrogram is the network-facing
representation. WAV support covers RIFF PCM 16-bit and IEEE float-32,
mono enforced by channel averaging.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

SPEC_MAGIC = b"DAPSPEC1"


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.isfinite(self.samples).all():
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.size


@dataclass
class Spectrogram:
    """(2, F, T) array: channel 0 real, channel 1 imaginary, F = n_fft//2 + 1."""
    data: np.ndarray
    n_fft: int
    hop: int
    sample_rate: int
    length: int          # original waveform length in samples
    window: str = "hann"
    pad_f: int = 0       # zero rows appended to F by pad_spec
    pad_t: int = 0       # zero columns appended to T by pad_spec

    @property
    def complex_view(self) -> np.ndarray:
        return self.data[0] + 1j * self.data[1]


def hann(n: int) -> np.ndarray:
    """Periodic Hann window: w[i] = 0.5 * (1 - cos(2*pi*i/n))."""
    if n < 1:
        raise ValueError(f"window length must be >= 1, got {n}")
    i = np.arange(n, dtype=np.float64)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * i / n))


def fft(x: np.ndarray, n: int) -> np.ndarray:
    """DFT X[k] = sum_j x[j] e^(-2*pi*i*j*k/n) for any n >= 1 (mixed radix)."""
    if n < 1:
        raise ValueError(f"fft length must be >= 1, got {n}")
    return np.fft.fft(np.asarray(x), n=n)


def _center_pad(samples: np.ndarray, pad: int) -> np.ndarray:
    if samples.size > 1:
        return np.pad(samples, pad, mode="reflect")
    # reflect is undefined for a single sample; repeat it instead
    return np.pad(samples, pad, mode="edge")


def stft(w: Waveform, n_fft: int = 1022, hop: int = 64) -> Spectrogram:
    """Center-padded short-time transform; T = 1 + len//hop frames."""
    if hop <= 0:
        raise ValueError(f"hop must be positive, got {hop}")
    if n_fft < hop:
        raise ValueError(f"n_fft ({n_fft}) must be >= hop ({hop})")
    if len(w) < 1:
        raise ValueError("empty waveform")
    pad = n_fft // 2
    padded = _center_pad(w.samples, pad)
    n_frames = 1 + len(w) // hop
    window = hann(n_fft)
    frames = np.empty((n_frames, n_fft), dtype=np.float64)
    for t in range(n_frames):
        frames[t] = padded[t * hop:t * hop + n_fft]
    spec = np.fft.rfft(frames * window, axis=1).T  # (F, T)
    data = np.stack([spec.real, spec.imag])
    return Spectrogram(data=data, n_fft=n_fft, hop=hop,
                       sample_rate=w.sample_rate, length=len(w))


def istft(s: Spectrogram) -> Waveform:
    """Least-squares inverse: window-weighted overlap-add over summed window^2."""
    spec = crop_spec(s) if (s.pad_f or s.pad_t) else s
    window = hann(spec.n_fft)
    frames = np.fft.irfft(spec.complex_view.T, n=spec.n_fft, axis=1)  # (T, n_fft)
    frames *= window
    n_frames = frames.shape[0]
    total = (n_frames - 1) * spec.hop + spec.n_fft
    acc = np.zeros(total, dtype=np.float64)
    wsum = np.zeros(total, dtype=np.float64)
    wsq = window * window
    for t in range(n_frames):
        start = t * spec.hop
        acc[start:start + spec.n_fft] += frames[t]
        wsum[start:start + spec.n_fft] += wsq
    pad = spec.n_fft // 2
    acc = acc[pad:pad + spec.length]
    wsum = wsum[pad:pad + spec.length]
    if wsum.min() < 1e-8:
        raise ValueError("degenerate window overlap; cannot invert")
    return Waveform(acc / wsum, spec.sample_rate)


def pad_spec(s: Spectrogram, multiple: int = 4) -> Spectrogram:
    """Zero-pad F and T up to the next multiple; the crop is recorded."""
    _, f, t = s.data.shape
    pad_f = (-f) % multiple
    pad_t = (-t) % multiple
    if pad_f == 0 and pad_t == 0:
        return replace(s, data=s.data.copy())
    data = np.pad(s.data, ((0, 0), (0, pad_f), (0, pad_t)))
    return replace(s, data=data, pad_f=s.pad_f + pad_f, pad_t=s.pad_t + pad_t)


def crop_spec(s: Spectrogram) -> Spectrogram:
    """Undo pad_spec exactly."""
    _, f, t = s.data.shape
    data = s.data[:, :f - s.pad_f, :t - s.pad_t]
    return replace(s, data=data.copy(), pad_f=0, pad_t=0)


def resample_linear(w: Waveform, target_rate: int) -> Waveform:
    """Linear interpolation onto the target sample grid."""
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    n_out = int(round(len(w) * target_rate / w.sample_rate))
    pos = np.arange(n_out, dtype=np.float64) * (w.sample_rate / target_rate)
    pos = np.minimum(pos, len(w) - 1)
    out = np.interp(pos, np.arange(len(w), dtype=np.float64), w.samples)
    return Waveform(out, target_rate)


# ---------------------------------------------------------------------------
# WAV (RIFF) reading and writing
# ---------------------------------------------------------------------------

class WavError(ValueError):
    pass


def read_wav(path) -> Waveform:
    """Read RIFF/WAVE, PCM 16-bit or IEEE float-32; channels are averaged."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[0:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise WavError(f"{path}: not a RIFF/WAVE file")
    fmt = None
    raw = None
    pos = 12
    while pos + 8 <= len(blob):
        cid = blob[pos:pos + 4]
        (size,) = struct.unpack_from("<I", blob, pos + 4)
        body = blob[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if size < 16:
                raise WavError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            raw = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned
    if fmt is None or raw is None:
        raise WavError(f"{path}: missing fmt or data chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if raw is None or len(raw) == 0:
        raise WavError(f"{path}: zero-length data chunk")
    if channels < 1:
        raise WavError(f"{path}: invalid channel count {channels}")
    if audio_format == 1 and bits == 16:
        samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    else:
        raise WavError(f"{path}: unsupported codec (format={audio_format}, bits={bits}); "
                       f"only PCM 16-bit and IEEE float-32 are handled")
    n = samples.size // channels
    samples = samples[:n * channels].reshape(n, channels).mean(axis=1)
    return Waveform(samples, sample_rate)


def write_wav(path, w: Waveform, bit_depth: int = 32):
    """Write mono WAV; bit_depth 32 = IEEE float (exact), 16 = PCM."""
    if bit_depth == 32:
        audio_format, data = 3, w.samples.astype("<f4").tobytes()
    elif bit_depth == 16:
        scaled = np.clip(np.round(w.samples * 32768.0), -32768, 32767)
        audio_format, data = 1, scaled.astype("<i2").tobytes()
    else:
        raise WavError(f"unsupported bit depth {bit_depth}; use 16 or 32")
    bytes_per = bit_depth // 8
    hdr = struct.pack("<4sI4s4sIHHIIHH4sI",
                      b"RIFF", 36 + len(data), b"WAVE",
                      b"fmt ", 16, audio_format, 1, w.sample_rate,
                      w.sample_rate * bytes_per, bytes_per, bit_depth,
                      b"data", len(data))
    with open(path, "wb") as fh:
        fh.write(hdr + data)


# ---------------------------------------------------------------------------
# Spectrogram debug dump (flat binary)
# ---------------------------------------------------------------------------

def write_spec(path, s: Spectrogram):
    """Flat binary dump: magic, precision, dims, stft metadata, raw data."""
    arr = np.ascontiguousarray(s.data, dtype=np.float64)
    bits = arr.itemsize * 8
    hdr = struct.pack("<8sI3I6I", SPEC_MAGIC, bits, *arr.shape,
                      s.n_fft, s.hop, s.sample_rate, s.length, s.pad_f, s.pad_t)
    with open(path, "wb") as fh:
        fh.write(hdr + arr.tobytes())


def read_spec(path) -> Spectrogram:
    with open(path, "rb") as fh:
        blob = fh.read()
    head = struct.calcsize("<8sI3I6I")
    if len(blob) < head or blob[:8] != SPEC_MAGIC:
        raise WavError(f"{path}: not a spectrogram dump")
    (_, bits, c, f, t, n_fft, hop, sample_rate,
     length, pad_f, pad_t) = struct.unpack_from("<8sI3I6I", blob, 0)
    dtype = np.float64 if bits == 64 else np.float32
    data = np.frombuffer(blob[head:], dtype=dtype).reshape(c, f, t).copy()
    return Spectrogram(data=data, n_fft=n_fft, hop=hop, sample_rate=sample_rate,
                       length=length, pad_f=pad_f, pad_t=pad_t)
