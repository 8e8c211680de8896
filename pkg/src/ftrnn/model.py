"""Frequency-temporal recurrent separator.

Signal path (batch ``B``, frames ``T``, bins ``F``)::

    mixture (B, L) -> STFT -> [re, im] (B, 2, T, F) -> conv 3x3 -> (B, T, F, D)
      -> N x (full-band block over F, sub-band block over T)
      -> deconv 3x3 -> (B, 2C, T, F) -> C complex spectrograms -> iSTFT -> (B, C, L)

Decoder channel ``2c`` is the real part and ``2c + 1`` the imaginary part of
speaker ``c``.  Parameters live in a flat ``name -> Tensor`` dict so the
optimizer and checkpoint code can treat them uniformly.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dsp import StftConfig, Waveform, hann_window, istft_tensor, stft_array

CHECKPOINT_MAGIC = b"FTRN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FtrnnConfig:
    n_fft: int = 512
    hop: int = 256
    sample_rate: int = 16000
    D: int = 32
    N: int = 4
    H_full: int = 96
    H_sub: int = 96
    C: int = 2
    norm: str = "pre"  # "pre": z + FFN(BLSTM(LN(z)));  "post": LN(z + FFN(BLSTM(z)))
    normalize_input: bool = True

    def __post_init__(self):
        StftConfig(self.n_fft, self.hop)
        if self.D < 1 or self.N < 1 or self.H_full < 1 or self.H_sub < 1:
            raise ValueError(f"D, N, H_full, H_sub must be >= 1: {self}")
        if self.C < 2:
            raise ValueError(f"C must be >= 2, got {self.C}")
        if self.norm not in ("pre", "post"):
            raise ValueError(f"norm must be 'pre' or 'post', got {self.norm!r}")

    @property
    def stft(self) -> StftConfig:
        return StftConfig(self.n_fft, self.hop)

    @classmethod
    def from_dict(cls, d: dict) -> "FtrnnConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class LstmCellParams(NamedTuple):
    """Weights of one LSTM direction; gates stacked as (input, forget, cell, output)."""

    W: Tensor  # (4H, D_in)
    U: Tensor  # (4H, H)
    b: Tensor  # (4H,)


def _module_shapes(prefix: str, D: int, H: int) -> dict[str, tuple[int, ...]]:
    shapes = {f"{prefix}.norm.gamma": (D,), f"{prefix}.norm.beta": (D,)}
    for direction in ("fwd", "bwd"):
        shapes[f"{prefix}.lstm_{direction}.W"] = (4 * H, D)
        shapes[f"{prefix}.lstm_{direction}.U"] = (4 * H, H)
        shapes[f"{prefix}.lstm_{direction}.b"] = (4 * H,)
    shapes[f"{prefix}.ffn.weight"] = (2 * H, D)
    shapes[f"{prefix}.ffn.bias"] = (D,)
    return shapes


def param_shapes(cfg: FtrnnConfig) -> dict[str, tuple[int, ...]]:
    shapes = {"encoder.weight": (cfg.D, 2, 3, 3), "encoder.bias": (cfg.D,)}
    for n in range(cfg.N):
        shapes.update(_module_shapes(f"blocks.{n}.full", cfg.D, cfg.H_full))
        shapes.update(_module_shapes(f"blocks.{n}.sub", cfg.D, cfg.H_sub))
    shapes["decoder.weight"] = (cfg.D, 2 * cfg.C, 3, 3)
    # no decoder bias: a constant real offset on every bin becomes an impulse at
    # the frame start, where the synthesis window is zero, and an imaginary one
    # only reaches the signal edges
    return shapes


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class FtrnnModel:
    config: FtrnnConfig
    params: dict[str, Tensor]

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def param_count(self) -> int:
        return param_count(self)

    def with_params(self, params: dict[str, Tensor]) -> "FtrnnModel":
        return FtrnnModel(self.config, params)

    def astype(self, dtype) -> "FtrnnModel":
        return self.with_params(
            {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in self.params.items()}
        )

    def lstm_params(self, prefix: str, direction: str) -> LstmCellParams:
        p = self.params
        key = f"{prefix}.lstm_{direction}"
        return LstmCellParams(p[f"{key}.W"], p[f"{key}.U"], p[f"{key}.b"])


def init_model(cfg: FtrnnConfig, seed: int = 0, dtype=np.float32) -> FtrnnModel:
    """Glorot-uniform weights, zero biases (LSTM forget gate 1.0), LN gamma 1 / beta 0."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("encoder.weight", "decoder.weight"):
            # conv: (out, in, k, k), deconv: (in, out, k, k)
            a, b = shape[:2] if name == "encoder.weight" else shape[1::-1]
            value = _glorot(rng, shape, b * 9, a * 9)
        elif leaf in ("W", "U"):
            value = _glorot(rng, shape, shape[1], shape[0])
        elif leaf == "weight":
            value = _glorot(rng, shape, shape[0], shape[1])
        elif leaf == "gamma":
            value = np.ones(shape)
        elif leaf == "b" and ".lstm_" in name:
            value = np.zeros(shape)
            H = shape[0] // 4
            value[H:2 * H] = 1.0
        else:
            value = np.zeros(shape)
        params[name] = Tensor(value.astype(dtype), requires_grad=True)
    return FtrnnModel(cfg, params)


def param_count(model: FtrnnModel) -> int:
    return int(sum(t.size for t in model.params.values()))


def lstm_cell(x_t: Tensor, h: Tensor, c: Tensor, p: LstmCellParams) -> tuple[Tensor, Tensor]:
    """One LSTM step built from elementary primitives.

    Works on (batch, features) or unbatched vectors.  The fused ``lstm``
    primitive used by the model must agree with repeated application of this.
    """
    squeeze = x_t.ndim == 1
    if squeeze:
        x_t, h, c = x_t.reshape(1, -1), h.reshape(1, -1), c.reshape(1, -1)
    H = p.U.shape[1]
    z = x_t @ p.W.permute(1, 0) + h @ p.U.permute(1, 0) + p.b
    i = ad.sigmoid(z[:, :H])
    f = ad.sigmoid(z[:, H:2 * H])
    g = ad.tanh(z[:, 2 * H:3 * H])
    o = ad.sigmoid(z[:, 3 * H:])
    c_new = f * c + i * g
    h_new = o * ad.tanh(c_new)
    if squeeze:
        return h_new.reshape(H), c_new.reshape(H)
    return h_new, c_new


def blstm(seqs: Tensor, fwd: LstmCellParams, bwd: LstmCellParams) -> Tensor:
    """(batch, steps, D) -> (batch, steps, 2H); forward and backward outputs concatenated."""
    return ad.blstm(seqs, fwd, bwd)


def _as_batched(z: Tensor, D: int) -> tuple[Tensor, bool]:
    if z.ndim == 3:
        z = z.reshape(1, *z.shape)
        squeeze = True
    elif z.ndim == 4:
        squeeze = False
    else:
        raise ad.ShapeError(f"expected (T, F, D) or (B, T, F, D), got {z.shape}")
    if z.shape[-1] != D:
        raise ad.ShapeError(f"feature dimension {z.shape[-1]} != D={D}")
    return z, squeeze


def _residual(model: FtrnnModel, prefix: str, z: Tensor, sweep) -> Tensor:
    p = model.params
    gamma, beta = p[f"{prefix}.norm.gamma"], p[f"{prefix}.norm.beta"]
    fwd, bwd = model.lstm_params(prefix, "fwd"), model.lstm_params(prefix, "bwd")
    inner = ad.layer_norm(z, gamma, beta) if model.config.norm == "pre" else z
    branch = sweep(inner, lambda s: blstm(s, fwd, bwd) @ p[f"{prefix}.ffn.weight"] + p[f"{prefix}.ffn.bias"])
    out = z + branch
    return ad.layer_norm(out, gamma, beta) if model.config.norm == "post" else out


def _over_freq(z: Tensor, fn) -> Tensor:
    B, T, F, D = z.shape
    return fn(z.reshape(B * T, F, D)).reshape(B, T, F, D)


def _over_time(z: Tensor, fn) -> Tensor:
    B, T, F, D = z.shape
    seqs = z.permute(0, 2, 1, 3).reshape(B * F, T, D)
    return fn(seqs).reshape(B, F, T, D).permute(0, 2, 1, 3)


def fullband_block(model: FtrnnModel, n: int, z: Tensor) -> Tensor:
    """Block ``n``'s full-band module: a BLSTM across frequency, per time frame."""
    z, squeeze = _as_batched(z, model.config.D)
    out = _residual(model, f"blocks.{n}.full", z, _over_freq)
    return out.reshape(*out.shape[1:]) if squeeze else out


def subband_block(model: FtrnnModel, n: int, z: Tensor) -> Tensor:
    """Block ``n``'s sub-band module: a BLSTM across time, per frequency bin (shared weights)."""
    z, squeeze = _as_batched(z, model.config.D)
    out = _residual(model, f"blocks.{n}.sub", z, _over_time)
    return out.reshape(*out.shape[1:]) if squeeze else out


def forward_batch(model: FtrnnModel, mixtures: np.ndarray) -> Tensor:
    """Separate a batch of equal-length mixtures (B, L) into a (B, C, L) tensor."""
    cfg = model.config
    mix = np.asarray(mixtures, dtype=model.dtype)
    if mix.ndim != 2:
        raise ad.ShapeError(f"mixtures must be (batch, samples), got {mix.shape}")
    B, L = mix.shape
    if L < cfg.hop:
        raise ValueError(f"input of {L} samples is shorter than one hop ({cfg.hop})")
    scale = np.ones((B, 1), dtype=mix.dtype)
    if cfg.normalize_input:
        rms = np.sqrt(np.mean(mix.astype(np.float64) ** 2, axis=-1, keepdims=True))
        scale = np.where(rms > 1e-8, rms, 1.0).astype(mix.dtype)
    # divide by the window norm so unit-RMS white input gives unit-variance bins
    win_norm = float(np.sqrt(np.sum(hann_window(cfg.n_fft) ** 2)))
    spec = stft_array(mix / scale, cfg.stft) / win_norm
    x = Tensor(np.stack([spec.real, spec.imag], axis=1).astype(mix.dtype))
    p = model.params
    z = ad.conv2d(x, p["encoder.weight"], p["encoder.bias"]).permute(0, 2, 3, 1)
    for n in range(cfg.N):
        z = fullband_block(model, n, z)
        z = subband_block(model, n, z)
    y = ad.conv_transpose2d(z.permute(0, 3, 1, 2), p["decoder.weight"], Tensor(np.zeros(2 * cfg.C, dtype=mix.dtype)))
    T, F = y.shape[2:]
    y = y.reshape(B, cfg.C, 2, T, F)
    wav = istft_tensor(y[:, :, 0], y[:, :, 1], cfg.n_fft, cfg.hop, L)
    return wav * (scale * win_norm)[:, :, None]


def forward(model: FtrnnModel, mixture: Waveform) -> list[Waveform]:
    """Separate one mixture into ``C`` waveforms of the same length."""
    if mixture.sample_rate != model.config.sample_rate:
        raise ValueError(f"model expects {model.config.sample_rate} Hz, got {mixture.sample_rate} Hz")
    out = forward_batch(model, mixture.samples[None, :]).data[0]
    return [Waveform(ch.astype(np.float64), mixture.sample_rate) for ch in out]


def separate(model: FtrnnModel, samples: np.ndarray) -> np.ndarray:
    """Array convenience around :func:`forward`: (L,) -> (C, L)."""
    return forward_batch(model, np.asarray(samples)[None, :]).data[0].astype(np.float64)


# -- checkpoints ---------------------------------------------------------------------------
# "FTRN" | u32 version | u32 len + UTF-8 JSON config | u32 count |
# per tensor: u32 name len, name, u32 rank, u64 dims..., little-endian float32 data

def save_checkpoint(model: FtrnnModel, path: str | Path) -> None:
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg]
    parts.append(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{t.ndim}Q", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(parts))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | Path, dtype=np.float32) -> FtrnnModel:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, cfg_len = take("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    cfg = FtrnnConfig.from_dict(json.loads(buf[pos: pos + cfg_len].decode("utf-8")))
    pos += cfg_len
    expected = param_shapes(cfg)
    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = buf[pos: pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}Q")
        if expected.get(name) != tuple(dims):
            raise CheckpointError(f"{path}: tensor {name!r} has shape {dims}, config expects {expected.get(name)}")
        n = int(np.prod(dims))
        if pos + 4 * n > len(buf):
            raise CheckpointError(f"{path}: truncated data for {name!r}")
        data = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims)
        pos += 4 * n
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    return FtrnnModel(cfg, {k: params[k] for k in expected})
