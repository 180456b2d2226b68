"""Signal kernels shared by every stage: STFT/iSTFT, log-mel, mixing, SI-SDR.

Conventions:
    * Waveforms are real tensors/arrays shaped ``(..., samples)``.
    * Spectrograms are complex tensors shaped ``(..., frames, bins)`` with
      ``bins = fft_size // 2 + 1``.
    * Framing is centred: the signal is reflect-padded by ``fft_size // 2``
      on both sides (zero-padded when it is too short to reflect), so
      ``frames = 1 + samples // hop_len``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy.io import wavfile

from .errors import ConfigError, DegenerateSignal, EmptySignal, ShapeError

SAMPLE_RATE = 16000
LOG_MEL_EPS = 1e-10
# SI-SDR loss floor in dB (i.e. a 60 dB SI-SDR ceiling)
SI_SDR_FLOOR_DB = -60.0

WINDOWS = ("sqrt_hann", "hann", "hamming", "rect")


@dataclass
class Waveform:
    """Mono audio with its sample rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise ShapeError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def read_wav(path, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Read a mono WAV file (16-bit PCM or float). Resampling is not supported."""
    sr, data = wavfile.read(str(path))
    if sr != sample_rate:
        raise ConfigError(f"{path}: sample rate {sr} != expected {sample_rate}")
    if data.ndim != 1:
        raise ShapeError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float32) / 2147483648.0
    elif np.issubdtype(data.dtype, np.floating):
        samples = data.astype(np.float32)
    else:
        raise ConfigError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, sr)


def write_wav(path, wav: Waveform | np.ndarray, sample_rate: int = SAMPLE_RATE):
    """Write 16-bit PCM. Samples outside [-1, 1] are clipped."""
    if isinstance(wav, Waveform):
        samples, sample_rate = wav.samples, wav.sample_rate
    else:
        samples = np.asarray(wav, dtype=np.float32)
    pcm = np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), sample_rate, pcm)


# ---------------------------------------------------------------------------
# STFT


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 320
    hop_len: int = 160
    fft_size: int = 320
    window: str = "sqrt_hann"

    def __post_init__(self):
        if self.window not in WINDOWS:
            raise ConfigError(f"unknown window {self.window!r}; choose from {WINDOWS}")
        if not (0 < self.hop_len <= self.window_len <= self.fft_size):
            raise ConfigError(
                "need 0 < hop_len <= window_len <= fft_size, got "
                f"{self.hop_len}/{self.window_len}/{self.fft_size}"
            )

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop_len

    def is_cola(self) -> bool:
        return _is_cola(self.window, self.window_len, self.hop_len)


FRONTEND_STFT = StftConfig(320, 160, 320, "sqrt_hann")
BACKEND_STFT = StftConfig(512, 256, 512, "sqrt_hann")


@functools.lru_cache(maxsize=None)
def _window_np(kind: str, length: int) -> np.ndarray:
    n = np.arange(length)
    if kind == "rect":
        return np.ones(length)
    if kind == "hamming":
        return 0.54 - 0.46 * np.cos(2 * np.pi * n / length)
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * n / length)  # periodic
    return np.sqrt(hann) if kind == "sqrt_hann" else hann


@functools.lru_cache(maxsize=None)
def _is_cola(kind: str, length: int, hop: int) -> bool:
    # Analysis and synthesis both apply the window, so the overlap-added
    # squared window must be constant for perfect reconstruction.
    w2 = _window_np(kind, length) ** 2
    env = np.zeros(hop)
    for start in range(0, length, hop):
        seg = w2[start:start + hop]
        env[: len(seg)] += seg
    return env.min() > 0 and (env.max() - env.min()) <= 1e-3 * env.max()


def get_window(cfg: StftConfig, dtype=torch.float32, device=None) -> torch.Tensor:
    return torch.as_tensor(_window_np(cfg.window, cfg.window_len), dtype=dtype, device=device)


def _as_tensor(w) -> torch.Tensor:
    if isinstance(w, Waveform):
        w = w.samples
    if isinstance(w, np.ndarray):
        w = torch.from_numpy(np.ascontiguousarray(w))
    if not torch.is_floating_point(w):
        w = w.float()
    return w


def _center_pad(x: torch.Tensor, pad: int) -> torch.Tensor:
    shape = x.shape
    flat = x.reshape(-1, 1, shape[-1])
    mode = "reflect" if shape[-1] > pad else "constant"
    flat = F.pad(flat, (pad, pad), mode=mode)
    return flat.reshape(*shape[:-1], flat.shape[-1])


def stft(w, cfg: StftConfig = FRONTEND_STFT) -> torch.Tensor:
    """Complex STFT of ``w`` shaped ``(..., frames, bins)``."""
    x = _as_tensor(w)
    if x.shape[-1] == 0:
        raise EmptySignal("cannot take the STFT of an empty signal")
    if not isinstance(cfg, StftConfig):
        raise ConfigError("cfg must be a StftConfig")
    lead = x.shape[:-1]
    x = _center_pad(x, cfg.fft_size // 2).reshape(-1, x.shape[-1] + 2 * (cfg.fft_size // 2))
    spec = torch.stft(
        x,
        n_fft=cfg.fft_size,
        hop_length=cfg.hop_len,
        win_length=cfg.window_len,
        window=get_window(cfg, x.dtype, x.device),
        center=False,
        return_complex=True,
    )
    return spec.transpose(-1, -2).reshape(*lead, spec.shape[-1], spec.shape[-2])


def istft(spec: torch.Tensor, cfg: StftConfig = FRONTEND_STFT, length: int | None = None) -> torch.Tensor:
    """Inverse of :func:`stft`. ``length`` defaults to ``(frames - 1) * hop``."""
    if not cfg.is_cola():
        raise ConfigError(f"window {cfg.window}/{cfg.window_len} is not COLA at hop {cfg.hop_len}")
    if spec.shape[-1] != cfg.n_bins:
        raise ShapeError(f"expected {cfg.n_bins} bins, got {spec.shape[-1]}")
    lead = spec.shape[:-2]
    n_frames = spec.shape[-2]
    if length is None:
        length = (n_frames - 1) * cfg.hop_len
    s = spec.reshape(-1, n_frames, cfg.n_bins).transpose(-1, -2)
    real_dtype = s.real.dtype
    out = torch.istft(
        s,
        n_fft=cfg.fft_size,
        hop_length=cfg.hop_len,
        win_length=cfg.window_len,
        window=get_window(cfg, real_dtype, s.device),
        center=True,
        length=length,
    )
    return out.reshape(*lead, length)


# ---------------------------------------------------------------------------
# Log-mel


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=None)
def mel_filterbank(n_mels: int, fft_size: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular HTK-style filters covering [0, sample_rate / 2], shape (n_mels, bins)."""
    if n_mels < 1:
        raise ConfigError("n_mels must be >= 1")
    bin_hz = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_hz - lo) / (mid - lo)
    down = (hi - bin_hz) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    return fb


def log_mel(w, cfg: StftConfig = BACKEND_STFT, n_mels: int = 64, sample_rate: int = SAMPLE_RATE,
            eps: float = LOG_MEL_EPS) -> torch.Tensor:
    """``log(mel_fb @ |stft|^2 + eps)`` shaped ``(..., frames, n_mels)``."""
    spec = stft(w, cfg)
    power = spec.real ** 2 + spec.imag ** 2
    fb = torch.as_tensor(mel_filterbank(n_mels, cfg.fft_size, sample_rate), dtype=power.dtype,
                         device=power.device)
    return torch.log(power @ fb.T + eps)


# ---------------------------------------------------------------------------
# Mixing


class MixResult(NamedTuple):
    mixture: np.ndarray
    scaled_interferer: np.ndarray
    target: np.ndarray
    gain: float    # joint peak-protection factor (1.0 if none was needed)
    scale: float   # amplitude factor applied to the interferer before ``gain``


def match_length(x: np.ndarray, n: int) -> np.ndarray:
    """Crop to the first ``n`` samples, or loop ``x`` until it covers ``n``."""
    if len(x) >= n:
        return x[:n]
    return np.resize(x, n)


def power(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def mix_at_snr(target, interferer, snr_db: float) -> MixResult:
    """Scale ``interferer`` so that target/interferer power ratio equals ``snr_db``.

    The interferer is cropped or looped to the target's length. If any output
    would exceed unit peak, target, interferer and mixture are all divided by
    the same factor (``gain`` < 1), which leaves the SNR unchanged.
    """
    t = np.asarray(target, dtype=np.float64)
    i = match_length(np.asarray(interferer, dtype=np.float64), len(t))
    pt, pi = power(t), power(i)
    if pt == 0.0 or pi == 0.0:
        raise DegenerateSignal("target and interferer must have nonzero energy")
    scale = math.sqrt(pt / (pi * 10.0 ** (snr_db / 10.0)))
    i = i * scale
    mixture = t + i
    peak = max(np.abs(mixture).max(), np.abs(t).max(), np.abs(i).max())
    gain = 1.0
    if peak > 1.0:
        gain = 1.0 / peak
        t, i = t * gain, i * gain
        mixture = t + i
    return MixResult(mixture, i, t, gain, scale)


def measured_snr(target, interferer) -> float:
    return 10.0 * math.log10(power(target) / power(interferer))


# ---------------------------------------------------------------------------
# SI-SDR


def si_sdr_loss(est, ref) -> torch.Tensor:
    """Negative SI-SDR in dB over the last axis, floored at ``SI_SDR_FLOOR_DB``.

    No mean removal is applied. Differentiable w.r.t. ``est``.
    """
    est, ref = _as_tensor(est), _as_tensor(ref)
    if est.shape[-1] != ref.shape[-1]:
        raise ShapeError(f"length mismatch: {est.shape[-1]} vs {ref.shape[-1]}")
    ref_energy = (ref * ref).sum(-1, keepdim=True)
    if torch.any(ref_energy == 0):
        raise DegenerateSignal("reference has zero energy")
    alpha = (est * ref).sum(-1, keepdim=True) / ref_energy
    s_t = alpha * ref
    s_e = est - s_t
    t_energy = (s_t * s_t).sum(-1).clamp_min(torch.finfo(est.dtype).tiny)
    e_energy = (s_e * s_e).sum(-1)
    e_energy = torch.maximum(e_energy, t_energy * 10.0 ** (SI_SDR_FLOOR_DB / 10.0))
    return 10.0 * torch.log10(e_energy) - 10.0 * torch.log10(t_energy)


def si_sdr(est, ref) -> torch.Tensor:
    """SI-SDR in dB (the metric, i.e. the negated loss)."""
    return -si_sdr_loss(est, ref)
