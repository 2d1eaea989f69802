"""Restoration procedures: corruption synthesis, objectives, fitting loops.

Each task fits one or more untrained prior networks to a single corrupted
spectrogram observation and reads the restoration off the network output.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import dsp, nn, tensor
from .dsp import Spectrogram, Waveform
from .optim import Adam
from .tensor import Rng, Tape, Tensor, derive_seed

LATENT_SCALE = 0.1

# rng stream tags, so every consumer draws from a decorrelated stream
_STREAM_LATENT = 0
_STREAM_NET = 1
_STREAM_NET2 = 2
_STREAM_MASK_NET = 3
_STREAM_CORRUPTION = 4


@dataclass(frozen=True)
class GaussianNoise:
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class EnvNoise:
    noise_path: str
    snr_db: float

    def __post_init__(self):
        if not np.isfinite(self.snr_db):
            raise ValueError(f"snr_db must be finite, got {self.snr_db}")


@dataclass(frozen=True)
class TimeMask:
    intervals: tuple[tuple[float, float], ...]

    def __post_init__(self):
        for a, b in self.intervals:
            if a < 0 or b < a:
                raise ValueError(f"bad mask interval [{a}, {b})")


@dataclass(frozen=True)
class Mixture:
    second_source_path: str


@dataclass(frozen=True)
class CorruptionSpec:
    variant: GaussianNoise | EnvNoise | TimeMask | Mixture
    seed: int = 0


@dataclass
class MaskSpec:
    """Binary (2, F, T) spectrogram mask; 0 marks corrupted cells."""
    data: np.ndarray
    intervals: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[0] != 2:
            raise ValueError(f"mask must be (2, F, T), got {self.data.shape}")
        if not np.isin(self.data, (0.0, 1.0)).all():
            raise ValueError("mask elements must be 0 or 1")


@dataclass(frozen=True)
class RunConfig:
    arch: nn.ArchVariant = field(default_factory=nn.DilatedExpDense)
    width_scale: float = 1.0
    latent_channels: int = 32
    iterations: int = 2000
    lr: float = 0.001
    seed: int = 0
    precision: int = 32
    exclusion_weight: float = 0.01
    n_fft: int = 1022
    hop: int = 64
    kernel: int = 3
    dilation_cap: int = 32

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.exclusion_weight < 0:
            raise ValueError(f"exclusion_weight must be >= 0, got {self.exclusion_weight}")
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def to_dict(self) -> dict:
        return {
            "arch": nn.variant_name(self.arch),
            "const_dilation": self.arch.d if isinstance(self.arch, nn.DilatedConst) else None,
            "width_scale": self.width_scale,
            "latent_channels": self.latent_channels,
            "iterations": self.iterations,
            "lr": self.lr,
            "seed": self.seed,
            "precision": self.precision,
            "exclusion_weight": self.exclusion_weight,
            "n_fft": self.n_fft,
            "hop": self.hop,
            "kernel": self.kernel,
            "dilation_cap": self.dilation_cap,
        }


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RunResult:
    restored: list[Waveform]
    loss_curve: np.ndarray
    metrics: dict
    wall_time: float
    config: RunConfig
    seed: int
    config_hash: str
    mask: np.ndarray | None = None   # separation soft mask (F, T)


# ---------------------------------------------------------------------------
# corruption synthesis
# ---------------------------------------------------------------------------

def add_gaussian(w: Waveform, sigma: float, rng: Rng) -> Waveform:
    noise = rng.normal_array(w.samples.shape)
    return Waveform(w.samples + sigma * noise, w.sample_rate)


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """clean + g * noise with g chosen so the achieved SNR equals snr_db."""
    n = noise.samples
    if n.size < len(clean):
        n = np.tile(n, int(np.ceil(len(clean) / n.size)))
    n = n[:len(clean)]
    p_clean = float(np.mean(clean.samples ** 2))
    p_noise = float(np.mean(n ** 2))
    if p_noise == 0:
        raise ValueError("silent noise signal; SNR undefined")
    gain = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(clean.samples + gain * n, clean.sample_rate)


def gen_time_masks(clip_s: float, rng: Rng, count: int,
                   dur_range: tuple[float, float] = (0.1, 0.25)) -> list[tuple[float, float]]:
    """`count` non-overlapping intervals with uniform durations and positions."""
    lo, hi = dur_range
    durations = [lo + rng.uniform() * (hi - lo) for _ in range(count)]
    free = clip_s - sum(durations)
    if free < 0:
        raise ValueError(f"masks totalling {sum(durations):.3f}s exceed the "
                         f"{clip_s:.3f}s clip")
    offsets = sorted(rng.uniform() * free for _ in range(count))
    intervals = []
    consumed = 0.0
    for off, dur in zip(offsets, durations):
        start = off + consumed
        intervals.append((start, start + dur))
        consumed += dur
    return intervals


def mask_from_intervals(intervals, spec: Spectrogram) -> MaskSpec:
    """Zero whole spectrogram columns for frames inside the intervals.

    Frame t sits at sample t*hop; it is masked when start <= t*hop < end.
    """
    _, _, n_frames = spec.data.shape
    clip_s = spec.length / spec.sample_rate
    mask = np.ones_like(spec.data)
    for a, b in intervals:
        if a < 0 or b < a or b > clip_s + 1e-9:
            raise ValueError(f"interval [{a}, {b}) outside the {clip_s:.3f}s clip")
        frames = [t for t in range(n_frames)
                  if a * spec.sample_rate <= t * spec.hop < b * spec.sample_rate]
        mask[:, :, frames] = 0.0
    return MaskSpec(mask, intervals=tuple((float(a), float(b)) for a, b in intervals))


def apply_time_masks(w: Waveform, intervals, n_fft: int, hop: int) -> tuple[Waveform, MaskSpec]:
    """Corrupt by zeroing spectrogram columns; returns observation + mask."""
    spec = dsp.stft(w, n_fft, hop)
    mask = mask_from_intervals(intervals, spec)
    spec.data *= mask.data
    return dsp.istft(spec), mask


def latent(shape, rng: Rng, dtype=np.float32) -> Tensor:
    """Frozen i.i.d. U(0, 0.1) latent input."""
    return Tensor((rng.uniform_array(shape) * LATENT_SCALE).astype(dtype))


# ---------------------------------------------------------------------------
# fitting loops
# ---------------------------------------------------------------------------

def _unet_spec(cfg: RunConfig, out_channels: int) -> nn.UNetSpec:
    return nn.UNetSpec(in_channels=cfg.latent_channels, out_channels=out_channels,
                       width_scale=cfg.width_scale, variant=cfg.arch,
                       kernel=cfg.kernel, dilation_cap=cfg.dilation_cap)


def _restored_from(out_data: np.ndarray, padded: Spectrogram) -> Waveform:
    spec = replace(padded, data=out_data[0].astype(np.float64))
    return dsp.istft(spec)


def _fit_single(observation: Waveform, cfg: RunConfig,
                mask: MaskSpec | None) -> RunResult:
    """Shared denoise/inpaint loop; mask=None means plain reconstruction."""
    t0 = time.perf_counter()
    padded = dsp.pad_spec(dsp.stft(observation, cfg.n_fft, cfg.hop))
    dtype = cfg.dtype
    target = Tensor(padded.data[None].astype(dtype))
    mask_t = None
    if mask is not None:
        # pad cells count as observed zeros, like the denoise objective
        m = np.pad(mask.data, ((0, 0), (0, padded.pad_f), (0, padded.pad_t)),
                   constant_values=1.0)
        mask_t = Tensor(m[None].astype(dtype))
    net = nn.build_unet(_unet_spec(cfg, out_channels=2),
                        Rng(derive_seed(cfg.seed, _STREAM_NET)), dtype)
    z = latent((1, cfg.latent_channels) + padded.data.shape[1:],
               Rng(derive_seed(cfg.seed, _STREAM_LATENT)), dtype)
    opt = Adam(net.parameters(), lr=cfg.lr)
    losses = np.empty(cfg.iterations, dtype=np.float64)
    for it in range(cfg.iterations):
        opt.zero_grad()
        with Tape() as tape:
            out = nn.forward(net, z)
            if mask_t is None:
                loss = tensor.mse(out, target)
            else:
                loss = tensor.masked_mse(out, target, mask_t)
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        losses[it] = value
        tensor.backward(loss, tape)
        opt.step()
    restored = _restored_from(nn.forward(net, z).data, padded)
    return RunResult(restored=[restored], loss_curve=losses, metrics={},
                     wall_time=time.perf_counter() - t0, config=cfg,
                     seed=cfg.seed, config_hash=config_hash(cfg))


def denoise(observation: Waveform, cfg: RunConfig) -> RunResult:
    """Fit the prior to the noisy spectrogram; the output is the restoration."""
    return _fit_single(observation, cfg, mask=None)


def inpaint(observation: Waveform, mask: MaskSpec, cfg: RunConfig) -> RunResult:
    """Fit only where the mask is 1; the unmasked network output is returned."""
    return _fit_single(observation, cfg, mask=mask)


def separate(mixture: Waveform, cfg: RunConfig,
             source_seeds: tuple[int, int] | None = None) -> RunResult:
    """Two source priors plus a sigmoid mask prior explain the mixture.

    loss = mse(m*s1 + (1-m)*s2, X) + lambda * mean(|s1| * |s2|)
    with |.| the per-bin magnitude. The mask net's output conv starts at
    zero, so the initial mask is exactly 0.5 and swapping the two source
    seeds mirrors the whole trajectory.
    """
    t0 = time.perf_counter()
    padded = dsp.pad_spec(dsp.stft(mixture, cfg.n_fft, cfg.hop))
    dtype = cfg.dtype
    target = Tensor(padded.data[None].astype(dtype))
    if source_seeds is None:
        source_seeds = (derive_seed(cfg.seed, _STREAM_NET),
                        derive_seed(cfg.seed, _STREAM_NET2))
    spatial = padded.data.shape[1:]
    nets, zs = [], []
    for src_seed in source_seeds:
        nets.append(nn.build_unet(_unet_spec(cfg, out_channels=2),
                                  Rng(derive_seed(src_seed, _STREAM_NET)), dtype))
        zs.append(latent((1, cfg.latent_channels) + spatial,
                         Rng(derive_seed(src_seed, _STREAM_LATENT)), dtype))
    mask_seed = derive_seed(cfg.seed, _STREAM_MASK_NET)
    mask_net = nn.build_unet(_unet_spec(cfg, out_channels=1),
                             Rng(derive_seed(mask_seed, _STREAM_NET)), dtype)
    nn.zero_final_layer(mask_net)
    z_mask = latent((1, cfg.latent_channels) + spatial,
                    Rng(derive_seed(mask_seed, _STREAM_LATENT)), dtype)
    params = nets[0].parameters() + nets[1].parameters() + mask_net.parameters()
    opt = Adam(params, lr=cfg.lr)
    losses = np.empty(cfg.iterations, dtype=np.float64)
    lam = cfg.exclusion_weight
    for it in range(cfg.iterations):
        opt.zero_grad()
        with Tape() as tape:
            s1 = nn.forward(nets[0], zs[0])
            s2 = nn.forward(nets[1], zs[1])
            m = tensor.sigmoid(nn.forward(mask_net, z_mask))
            mix = m * s1 + (1.0 - m) * s2
            loss = tensor.mse(mix, target)
            if lam > 0:
                overlap = tensor.mean(tensor.channel_magnitude(s1)
                                      * tensor.channel_magnitude(s2))
                loss = loss + lam * overlap
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        losses[it] = value
        tensor.backward(loss, tape)
        opt.step()
    est1 = _restored_from(nn.forward(nets[0], zs[0]).data, padded)
    est2 = _restored_from(nn.forward(nets[1], zs[1]).data, padded)
    mask_out = tensor.sigmoid(nn.forward(mask_net, z_mask)).data[0, 0]
    f = padded.data.shape[1] - padded.pad_f
    t = padded.data.shape[2] - padded.pad_t
    return RunResult(restored=[est1, est2], loss_curve=losses, metrics={},
                     wall_time=time.perf_counter() - t0, config=cfg,
                     seed=cfg.seed, config_hash=config_hash(cfg),
                     mask=mask_out[:f, :t].astype(np.float64))
