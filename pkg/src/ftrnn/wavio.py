"""Mono WAV reading and writing (16-bit PCM or 32-bit IEEE float)."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .dsp import Waveform


def read_wav(path: str | Path) -> Waveform:
    """Read a mono WAV file as float64 samples in [-1, 1] (PCM) or as stored (float)."""
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, int(rate))


def write_wav(path: str | Path, wave: Waveform, fmt: str = "float32") -> None:
    """Write ``wave``; ``fmt`` is ``"float32"`` (default, no clipping) or ``"pcm16"``."""
    x = np.asarray(wave.samples, dtype=np.float64)
    if fmt == "float32":
        data = x.astype("<f4")
    elif fmt == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), int(wave.sample_rate), data)
