"""STFT analysis/synthesis and the waveform container.

Analysis is centre-padded by reflection (``n_fft // 2`` on both ends), so a
signal of ``L`` samples gives ``L // hop + 1`` frames.  Synthesis is weighted
overlap-add normalised by the summed squared window, trimmed back to the
recorded original length.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

WOLA_FLOOR = 1e-10


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 1 or s.size < 1:
            raise ValueError(f"waveform must be 1-D and non-empty, got shape {s.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(s)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", s)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 512
    hop: int = 256
    window: str = "hann"

    def __post_init__(self):
        if self.n_fft < 2 or self.n_fft % 2:
            raise ValueError(f"n_fft must be even and >= 2, got {self.n_fft}")
        if not 1 <= self.hop <= self.n_fft:
            raise ValueError(f"hop must lie in [1, n_fft], got {self.hop}")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, length: int) -> int:
        return length // self.hop + 1


@dataclass(frozen=True)
class Spectrogram:
    frames: np.ndarray  # complex (..., T, F)
    config: StftConfig
    original_length: int | None


def hann_window(n: int, dtype=np.float64) -> np.ndarray:
    """Periodic Hann window, ``w[k] = 0.5 * (1 - cos(2*pi*k/n))``."""
    if n < 2:
        raise ValueError(f"window length must be >= 2, got {n}")
    k = np.arange(n)
    return (0.5 * (1.0 - np.cos(2.0 * np.pi * k / n))).astype(dtype)


def _frame(padded: np.ndarray, n_fft: int, hop: int, n_frames: int) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(padded, n_fft, axis=-1)
    return view[..., ::hop, :][..., :n_frames, :]


def stft_array(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Complex STFT of real ``x`` (..., L) -> (..., T, F)."""
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("stft: non-finite samples")
    pad = cfg.n_fft // 2
    widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    mode = "reflect" if x.shape[-1] > 1 else "constant"
    padded = np.pad(x, widths, mode=mode)
    frames = _frame(padded, cfg.n_fft, cfg.hop, cfg.n_frames(x.shape[-1]))
    w = hann_window(cfg.n_fft, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    return np.fft.rfft(frames * w, n=cfg.n_fft, axis=-1)


def _wola_norm(n_frames: int, cfg: StftConfig, dtype) -> np.ndarray:
    w2 = hann_window(cfg.n_fft, dtype) ** 2
    total = np.zeros(cfg.n_fft + cfg.hop * (n_frames - 1), dtype=dtype)
    for t in range(n_frames):
        total[t * cfg.hop: t * cfg.hop + cfg.n_fft] += w2
    return np.maximum(total, WOLA_FLOOR)


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    *lead, T, n = frames.shape
    out = np.zeros((*lead, n + hop * (T - 1)), dtype=frames.dtype)
    for t in range(T):
        out[..., t * hop: t * hop + n] += frames[..., t, :]
    return out


def istft_array(frames: np.ndarray, cfg: StftConfig, length: int) -> np.ndarray:
    """Inverse of :func:`stft_array`; complex (..., T, F) -> real (..., length)."""
    return _istft_fwd([frames.real, frames.imag], n_fft=cfg.n_fft, hop=cfg.hop, length=length)[0]


def stft(wave: Waveform, cfg: StftConfig = StftConfig()) -> Spectrogram:
    return Spectrogram(stft_array(wave.samples, cfg), cfg, len(wave))


def istft(spec: Spectrogram, sample_rate: int = 16000) -> Waveform:
    if spec.original_length is None:
        raise ValueError("istft: spectrogram has no original_length")
    if spec.frames.shape[-1] != spec.config.n_bins:
        raise ValueError(f"istft: expected {spec.config.n_bins} bins, got {spec.frames.shape[-1]}")
    return Waveform(istft_array(spec.frames, spec.config, spec.original_length), sample_rate)


# -- differentiable inverse STFT on (real, imag) tensors ----------------------------

def _istft_fwd(x, n_fft, hop, length):
    re, im = x
    if re.shape != im.shape or re.shape[-1] != n_fft // 2 + 1:
        raise ad.ShapeError(f"istft: real {re.shape} / imag {im.shape} for n_fft={n_fft}")
    cfg = StftConfig(n_fft, hop)
    T = re.shape[-2]
    if cfg.n_frames(length) != T:
        raise ad.ShapeError(f"istft: {T} frames cannot represent length {length} with hop {hop}")
    dtype = re.dtype
    w = hann_window(n_fft, dtype)
    frames = np.fft.irfft(re + 1j * im, n=n_fft, axis=-1).astype(dtype) * w
    norm = _wola_norm(T, cfg, dtype)
    y = _overlap_add(frames, hop) / norm
    pad = n_fft // 2
    return np.ascontiguousarray(y[..., pad: pad + length]), norm


def _istft_bwd(g, norm, x, n_fft, hop, length):
    re = x[0]
    T = re.shape[-2]
    pad = n_fft // 2
    full = np.zeros((*g.shape[:-1], norm.size), dtype=g.dtype)
    full[..., pad: pad + length] = g
    full /= norm
    gframes = _frame(full, n_fft, hop, T) * hann_window(n_fft, g.dtype)
    # adjoint of irfft: one-sided bins 1..n/2-1 appear twice in the real signal
    G = np.fft.rfft(gframes, n=n_fft, axis=-1) / n_fft
    G[..., 1:-1] *= 2.0
    return G.real.astype(g.dtype), G.imag.astype(g.dtype)


ad.register_primitive("istft", _istft_fwd, _istft_bwd)


def istft_tensor(re: ad.Tensor, im: ad.Tensor, n_fft: int, hop: int, length: int) -> ad.Tensor:
    """Differentiable iSTFT: (..., T, F) real and imaginary parts -> (..., length)."""
    return ad.apply_primitive("istft", [re, im], {"n_fft": n_fft, "hop": hop, "length": length})
