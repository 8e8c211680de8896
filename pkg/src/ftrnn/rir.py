"""Shoebox room impulse responses by the image-source method.

Early reflections come from image sources up to ``max_order`` with a single
uniform wall reflection coefficient.  Because a low-order image set stops
long before the reverberation has decayed, a diffuse tail (Gaussian noise
under the target exponential envelope) continues the response from the time
the first missing image would arrive, in the spirit of hybrid simulators.
"""
from __future__ import annotations

import warnings

import numpy as np

SPEED_OF_SOUND = 343.0
SINC_HALF_WIDTH = 32


def eyring_absorption(room, rt60: float) -> float:
    """Absorption whose image-source decay reaches -60 dB after exactly ``rt60``."""
    Lx, Ly, Lz = room
    volume = Lx * Ly * Lz
    surface = 2.0 * (Lx * Ly + Lx * Lz + Ly * Lz)
    return float(1.0 - np.exp(-0.161 * volume / (surface * rt60)))


def sabine_absorption(room, rt60: float) -> tuple[float, bool]:
    """Uniform absorption from Sabine's formula; returns (alpha, clamped)."""
    Lx, Ly, Lz = room
    volume = Lx * Ly * Lz
    surface = 2.0 * (Lx * Ly + Lx * Lz + Ly * Lz)
    alpha = 0.161 * volume / (surface * rt60)
    clamped = not (0.0 < alpha < 1.0)
    return float(np.clip(alpha, 1e-6, 1.0 - 1e-6)), clamped


def image_sources(room, src, max_order: int):
    """Positions and reflection counts of all images with total order <= max_order."""
    room = np.asarray(room, dtype=np.float64)
    src = np.asarray(src, dtype=np.float64)
    n = np.arange(-max_order, max_order + 1)
    per_axis = []
    for ax in range(3):
        pos = np.concatenate([src[ax] + 2 * n * room[ax], -src[ax] + 2 * n * room[ax]])
        count = np.concatenate([np.abs(2 * n), np.abs(2 * n - 1)])
        keep = count <= max_order
        per_axis.append((pos[keep], count[keep]))
    (px, cx), (py, cy), (pz, cz) = per_axis
    gx, gy, gz = np.meshgrid(np.arange(px.size), np.arange(py.size), np.arange(pz.size), indexing="ij")
    order = cx[gx] + cy[gy] + cz[gz]
    sel = order <= max_order
    positions = np.stack([px[gx[sel]], py[gy[sel]], pz[gz[sel]]], axis=-1)
    return positions, order[sel]


def _add_fractional(h: np.ndarray, delays: np.ndarray, amps: np.ndarray) -> None:
    offsets = np.arange(-SINC_HALF_WIDTH + 1, SINC_HALF_WIDTH + 1)
    base = np.floor(delays).astype(np.int64)
    idx = base[:, None] + offsets[None, :]
    frac = idx - delays[:, None]
    window = 0.5 * (1.0 + np.cos(np.pi * frac / SINC_HALF_WIDTH))
    taps = amps[:, None] * np.sinc(frac) * window
    ok = (idx >= 0) & (idx < h.size)
    np.add.at(h, idx[ok], taps[ok])


def render_rir(
    room,
    src,
    mic,
    rt60: float,
    rate: int,
    max_order: int = 6,
    diffuse_tail: bool = True,
    rng: np.random.Generator | None = None,
    absorption: str = "eyring",
) -> np.ndarray:
    """Impulse response from ``src`` to ``mic``, scaled so the direct-path peak is 1.

    ``absorption`` picks how the uniform wall absorption follows from ``rt60``:
    Sabine's ``0.161 V / (S T)`` (clamped into (0, 1)) or Eyring's
    ``1 - exp(-0.161 V / (S T))``, which an image-source field decays at
    exactly.  The Sabine value is always computed so an out-of-range
    configuration raises a ``RuntimeWarning``.
    """
    room = np.asarray(room, dtype=np.float64)
    src = np.asarray(src, dtype=np.float64)
    mic = np.asarray(mic, dtype=np.float64)
    for name, p in (("source", src), ("microphone", mic)):
        if np.any(p <= 0) or np.any(p >= room):
            raise ValueError(f"{name} position {p.tolist()} is not strictly inside room {room.tolist()}")
    if rt60 <= 0:
        raise ValueError(f"rt60 must be positive, got {rt60}")
    alpha, clamped = sabine_absorption(room, rt60)
    if clamped:
        warnings.warn(f"absorption clamped for room {room.tolist()} and rt60 {rt60}", RuntimeWarning)
    if absorption == "eyring":
        alpha = eyring_absorption(room, rt60)
    elif absorption != "sabine":
        raise ValueError(f"absorption must be 'eyring' or 'sabine', got {absorption!r}")
    beta = np.sqrt(1.0 - alpha)

    positions, order = image_sources(room, src, max_order + 1)
    dist = np.linalg.norm(positions - mic, axis=-1)
    d0 = float(np.linalg.norm(src - mic))
    delays = dist / SPEED_OF_SOUND * rate
    early = order <= max_order
    # first arrival the truncated image set misses; past it the tail takes over
    t_mix = float(delays[~early].min())
    if diffuse_tail:
        early &= delays < t_mix

    length = int(np.ceil(delays[early].max())) + SINC_HALF_WIDTH + 1
    if diffuse_tail:
        length = max(length, int(np.ceil(t_mix + rt60 * rate)) + SINC_HALF_WIDTH)
    h = np.zeros(length)
    amps = beta ** order[early] * d0 / dist[early]
    _add_fractional(h, delays[early], amps)
    # the sampled sinc of an off-grid direct path peaks below 1; rescale so it is exactly 1
    direct = np.zeros(length)
    _add_fractional(direct, np.array([d0 / SPEED_OF_SOUND * rate]), np.array([1.0]))
    peak_gain = 1.0 / np.abs(direct).max()
    h *= peak_gain

    if diffuse_tail:
        rng = rng if rng is not None else np.random.default_rng(0)
        decay = 3.0 * np.log(10.0) / (rt60 * rate)  # amplitude: -60 dB after rt60
        win = max(int(0.02 * rate), 1)
        start = int(np.floor(t_mix))
        level = np.sqrt(_diffuse_power(room, d0, beta, t_mix / rate) / rate)
        n = np.arange(length - start)
        fade = np.minimum(n / win, 1.0)
        fade = 0.5 - 0.5 * np.cos(np.pi * fade)
        h[start:] += peak_gain * level * np.exp(-decay * n) * fade * rng.standard_normal(n.size)
    return h


def _diffuse_power(room, d0: float, beta: float, t: float) -> float:
    """Expected image-source power per second at time ``t`` (statistical image density)."""
    volume = float(np.prod(room))
    surface = 2.0 * (room[0] * room[1] + room[0] * room[2] + room[1] * room[2])
    reflections = SPEED_OF_SOUND * t * surface / (4.0 * volume)
    return 4.0 * np.pi * SPEED_OF_SOUND * d0 ** 2 / volume * beta ** (2.0 * reflections)


def direct_delay(src, mic, rate: int) -> float:
    """Direct-path delay in samples."""
    return float(np.linalg.norm(np.asarray(src) - np.asarray(mic)) / SPEED_OF_SOUND * rate)
