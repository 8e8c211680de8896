"""Multi-utterance two-speaker mixture synthesis.

Each speaker signal alternates random silences and utterances (a leading gap
precedes the first utterance), is reverberated with its own room impulse
response, and the speakers plus a noise signal scaled to a sampled SNR are
summed.  References are the reverberant, pre-noise speaker signals, so

    mixture == sum(references) + noise

holds exactly.  Every mixture is drawn from its own generator seeded with
``SeedSequence([seed, index])``.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .dsp import Waveform
from .rir import render_rir, sabine_absorption
from .wavio import read_wav, write_wav

MAX_GEOMETRY_RETRIES = 1000


@dataclass(frozen=True)
class GenConfig:
    utterances_per_speaker: tuple[int, int] = (4, 5)
    gap_range: tuple[float, float] = (1.0, 3.0)
    level_range_db: tuple[float, float] = (0.0, 5.0)
    snr_range_db: tuple[float, float] = (0.0, 10.0)
    rt60_range_s: tuple[float, float] = (0.2, 0.6)
    room_lw_range_m: tuple[float, float] = (4.0, 8.0)
    room_h_range_m: tuple[float, float] = (3.0, 4.0)
    mic_h_range_m: tuple[float, float] = (1.0, 1.5)
    src_h_range_m: tuple[float, float] = (1.5, 2.0)
    min_separation_m: float = 0.5
    sample_rate: int = 16000
    reverb_enabled: bool = True
    source_kind: str = "synthetic"  # or "file-corpus"
    n_speakers: int = 2
    utterance_s_range: tuple[float, float] = (2.0, 6.0)  # synthetic utterance durations
    utterance_rms: float = 0.05  # synthetic utterances are normalised to this before level offsets
    rir_max_order: int = 6
    rir_diffuse_tail: bool = True
    fixed_length_s: float | None = None
    corpus_dir: str | None = None  # speaker subdirectories of WAV utterances
    noise_dir: str | None = None  # WAV noise files; synthetic noise when unset

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name.endswith("_range") or "_range_" in f.name or f.name == "utterances_per_speaker":
                if isinstance(v, list):
                    object.__setattr__(self, f.name, tuple(v))
                    v = tuple(v)
                if len(v) != 2 or v[0] > v[1]:
                    raise ValueError(f"{f.name} must be a (low, high) pair with low <= high, got {v}")
        if self.utterances_per_speaker[0] < 1:
            raise ValueError("utterances_per_speaker must be >= 1")
        if self.gap_range[0] < 0 or self.rt60_range_s[0] <= 0 or self.utterance_s_range[0] <= 0:
            raise ValueError("gaps must be >= 0; rt60 and utterance durations > 0")
        if self.source_kind not in ("synthetic", "file-corpus"):
            raise ValueError(f"unknown source_kind {self.source_kind!r}")
        if self.source_kind == "file-corpus" and not self.corpus_dir:
            raise ValueError("source_kind 'file-corpus' needs corpus_dir")
        if self.sample_rate <= 0 or self.n_speakers < 2 or self.min_separation_m < 0:
            raise ValueError("sample_rate > 0, n_speakers >= 2 and min_separation_m >= 0 required")

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown gen config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SpeakerTraits:
    f0: float
    vibrato_rate: float
    vibrato_depth: float
    formant_scale: float
    tilt: float

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "SpeakerTraits":
        return cls(
            f0=float(rng.uniform(90.0, 300.0)),
            vibrato_rate=float(rng.uniform(4.0, 7.0)),
            vibrato_depth=float(rng.uniform(0.005, 0.02)),
            formant_scale=float(rng.uniform(0.85, 1.15)),
            tilt=float(rng.uniform(0.8, 1.6)),
        )


@dataclass
class MixtureSpec:
    utterances: list[list[tuple[str, float]]]  # per speaker: (source id, duration s)
    gaps_s: list[list[float]]
    levels_db: list[list[float]]
    snr_db: float
    room_m: tuple[float, float, float]
    rt60_s: float
    mic_m: tuple[float, float, float]
    sources_m: list[tuple[float, float, float]]
    seed: int
    speaker_seeds: list[int] = field(default_factory=list)


def _uniform(rng: np.random.Generator, lo_hi) -> float:
    lo, hi = lo_hi
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def _sample_geometry(cfg: GenConfig, rng: np.random.Generator):
    sep = cfg.min_separation_m
    for _ in range(MAX_GEOMETRY_RETRIES):
        room = (_uniform(rng, cfg.room_lw_range_m), _uniform(rng, cfg.room_lw_range_m), _uniform(rng, cfg.room_h_range_m))
        if min(room[0], room[1]) <= 2 * sep:
            continue

        def point(h_range):
            return (_uniform(rng, (sep, room[0] - sep)), _uniform(rng, (sep, room[1] - sep)), _uniform(rng, h_range))

        mic = point(cfg.mic_h_range_m)
        srcs = [point(cfg.src_h_range_m) for _ in range(cfg.n_speakers)]
        pts = [mic, *srcs]
        if any(p[2] < sep or p[2] > room[2] - sep for p in pts):
            continue
        if all(math.dist(a, b) >= sep for i, a in enumerate(pts) for b in pts[i + 1:]):
            return room, mic, srcs
    raise ValueError(f"could not satisfy geometry constraints after {MAX_GEOMETRY_RETRIES} tries: {cfg}")


class FileCorpus:
    """Utterances from ``root/<speaker>/*.wav`` and noise from ``noise_dir/*.wav``."""

    def __init__(self, root: str | Path, noise_dir: str | Path | None = None):
        self.root = Path(root)
        self.speakers = sorted(p.name for p in self.root.iterdir() if p.is_dir() and any(p.glob("*.wav")))
        if len(self.speakers) < 2:
            raise ValueError(f"{root}: need at least two speaker directories with WAV files")
        self.noise_files = sorted(Path(noise_dir).glob("*.wav")) if noise_dir else []

    def utterances(self, speaker: str) -> list[Path]:
        return sorted((self.root / speaker).glob("*.wav"))

    def load(self, source_id: str, rate: int) -> np.ndarray:
        wave = read_wav(self.root / source_id)
        if wave.sample_rate != rate:
            raise ValueError(f"{source_id}: sample rate {wave.sample_rate} != {rate}")
        return wave.samples

    def noise(self, rng: np.random.Generator, length: int, rate: int) -> np.ndarray:
        path = self.noise_files[rng.integers(len(self.noise_files))]
        wave = read_wav(path)
        if wave.sample_rate != rate:
            raise ValueError(f"{path}: sample rate {wave.sample_rate} != {rate}")
        x = wave.samples
        if x.size < length:
            x = np.tile(x, length // x.size + 1)
        start = int(rng.integers(0, x.size - length + 1))
        return x[start: start + length]


def sample_spec(cfg: GenConfig, rng: np.random.Generator, seed: int = 0, corpus: FileCorpus | None = None) -> MixtureSpec:
    """Draw every generation parameter uniformly from its configured range."""
    utterances, gaps, levels, speaker_seeds = [], [], [], []
    if cfg.source_kind == "file-corpus":
        corpus = corpus or FileCorpus(cfg.corpus_dir, cfg.noise_dir)
        chosen = rng.choice(len(corpus.speakers), size=cfg.n_speakers, replace=False)
    for c in range(cfg.n_speakers):
        n = int(rng.integers(cfg.utterances_per_speaker[0], cfg.utterances_per_speaker[1] + 1))
        if cfg.source_kind == "synthetic":
            spk_seed = int(rng.integers(2 ** 31))
            speaker_seeds.append(spk_seed)
            utts = [(f"synth:{spk_seed}:{k}", _uniform(rng, cfg.utterance_s_range)) for k in range(n)]
        else:
            spk = corpus.speakers[int(chosen[c])]
            files = corpus.utterances(spk)
            picks = rng.choice(len(files), size=n, replace=len(files) < n)
            utts = []
            for i in picks:
                rel = f"{spk}/{files[int(i)].name}"
                utts.append((rel, len(corpus.load(rel, cfg.sample_rate)) / cfg.sample_rate))
        utterances.append(utts)
        gaps.append([_uniform(rng, cfg.gap_range) for _ in range(n)])
        levels.append([_uniform(rng, cfg.level_range_db) for _ in range(n)])
    room, mic, srcs = _sample_geometry(cfg, rng)
    return MixtureSpec(
        utterances=utterances,
        gaps_s=gaps,
        levels_db=levels,
        snr_db=_uniform(rng, cfg.snr_range_db),
        room_m=room,
        rt60_s=_uniform(rng, cfg.rt60_range_s),
        mic_m=mic,
        sources_m=srcs,
        seed=seed,
        speaker_seeds=speaker_seeds,
    )


# (F1, F2, F3) in Hz for a handful of vowels; each syllable glides between two of them
VOWEL_FORMANTS = np.array([
    [730.0, 1090.0, 2440.0], [270.0, 2290.0, 3010.0], [300.0, 870.0, 2240.0], [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0], [660.0, 1720.0, 2410.0], [440.0, 1020.0, 2240.0],
])
FORMANT_BANDWIDTH_HZ = 100.0


def _syllables(rng: np.random.Generator, n: int, rate: int):
    """Syllable spans ``(start, length)`` separated by short pauses; the last one ends at ``n``."""
    spans, pos = [], 0
    min_len = int(0.1 * rate)
    while pos < n:
        length = int(rng.uniform(0.12, 0.3) * rate)
        pause = int(rng.uniform(0.02, 0.12) * rate)
        if n - pos - length - pause < min_len:
            length = n - pos  # stretch the final syllable so it closes the utterance
        spans.append((pos, length))
        pos += length + pause
    return spans


def synth_utterance(rng: np.random.Generator, duration: float, rate: int, traits: SpeakerTraits) -> np.ndarray:
    """Voiced-speech stand-in: harmonic syllables with gliding vowel formants and pitch.

    Syllables of 120-300 ms alternate with 20-120 ms pauses, so the signal
    is sparse in time as well as in frequency.
    """
    n = int(round(duration * rate))
    t = np.arange(n) / rate
    env = np.zeros(n)
    contour = np.ones(n)
    formants = np.empty((n, 3))
    prev = VOWEL_FORMANTS[rng.integers(len(VOWEL_FORMANTS))] * traits.formant_scale
    pos = 0
    for start, length in _syllables(rng, n, rate):
        a = VOWEL_FORMANTS[rng.integers(len(VOWEL_FORMANTS))] * traits.formant_scale
        b = VOWEL_FORMANTS[rng.integers(len(VOWEL_FORMANTS))] * traits.formant_scale
        formants[pos:start] = prev  # pause keeps the previous shape; it is silent anyway
        glide = np.linspace(0.0, 1.0, length)[:, None]
        formants[start:start + length] = a * (1 - glide) + b * glide
        env[start:start + length] = np.sin(np.pi * np.arange(length) / length) ** 1.5
        contour[start:start + length] = 1.0 + rng.uniform(-0.12, 0.12) * np.linspace(-1.0, 1.0, length)
        prev, pos = b, start + length
    f0 = traits.f0 * contour
    f0 = f0 * (1.0 + traits.vibrato_depth * np.sin(2 * np.pi * traits.vibrato_rate * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / rate
    x = np.zeros(n)
    k_max = int(0.45 * rate / f0.max())
    for k in range(1, k_max + 1):
        resonance = np.exp(-0.5 * ((k * f0[:, None] - formants) / FORMANT_BANDWIDTH_HZ) ** 2).sum(axis=1)
        x += k ** -traits.tilt * (0.05 + resonance) * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    ramp_n = min(int(0.05 * rate), n // 2)
    if ramp_n > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(1, ramp_n + 1) / (ramp_n + 1))
        env[:ramp_n] *= ramp
        env[n - ramp_n:] *= ramp[::-1]
    return x * env


def synth_noise(rng: np.random.Generator, length: int, rate: int) -> np.ndarray:
    """Coloured noise with slow amplitude modulation, unit RMS."""
    white = rng.standard_normal(length + 2048)
    lo = rng.uniform(50.0, 300.0)
    hi = rng.uniform(0.15, 0.45) * rate
    sos = sps.butter(2, [lo, hi], btype="bandpass", fs=rate, output="sos")
    x = sps.sosfilt(sos, white)[2048:]
    t = np.arange(length) / rate
    x *= 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.2, 1.0) * t + rng.uniform(0, 2 * np.pi))
    return x / np.sqrt(np.mean(x ** 2))


def build_speaker_signal(utterances, gaps, levels, rate: int):
    """Concatenate ``gap[0], utt[0], gap[1], utt[1], ...`` with per-utterance dB gains.

    Returns the signal and the sample-accurate timeline ``[(start_s, end_s), ...]``.
    """
    if len(utterances) == 0:
        raise ValueError("empty utterance list")
    if not (len(gaps) == len(levels) == len(utterances)):
        raise ValueError(f"need one gap and one level per utterance: {len(utterances)}, {len(gaps)}, {len(levels)}")
    pieces, timeline, pos = [], [], 0
    for utt, gap, level in zip(utterances, gaps, levels):
        u = np.asarray(getattr(utt, "samples", utt), dtype=np.float64)
        g = int(round(gap * rate))
        pieces.append(np.zeros(g))
        pieces.append(u if level == 0 else u * 10.0 ** (level / 20.0))
        timeline.append(((pos + g) / rate, (pos + g + u.size) / rate))
        pos += g + u.size
    return np.concatenate(pieces), timeline


def signal_level_db(speakers: np.ndarray) -> float:
    """Signal level: arithmetic mean of the per-speaker powers in dB."""
    powers = np.mean(np.asarray(speakers, dtype=np.float64) ** 2, axis=-1)
    if np.any(powers <= 0):
        raise ValueError("silent speaker: signal level undefined")
    return float(np.mean(10.0 * np.log10(powers)))


def measured_snr_db(speakers: np.ndarray, noise: np.ndarray) -> float:
    return signal_level_db(speakers) - 10.0 * math.log10(float(np.mean(noise ** 2)))


def scale_and_mix(speakers, noise, snr_db: float):
    """Scale ``noise`` to ``snr_db`` below the mean speaker level and add it.

    Returns (mixture, references, scaled noise).  ``snr_db = inf`` adds no noise.
    """
    refs = np.asarray([getattr(s, "samples", s) for s in speakers], dtype=np.float64)
    L = refs.shape[1]
    noise = np.asarray(getattr(noise, "samples", noise), dtype=np.float64)
    if noise.size < L:
        noise = np.tile(noise, L // noise.size + 1)
    noise = noise[:L]
    level = signal_level_db(refs)
    if math.isinf(snr_db) and snr_db > 0:
        gain = 0.0
    else:
        p_noise = float(np.mean(noise ** 2))
        if p_noise <= 0:
            raise ValueError("noise is silent")
        gain = math.sqrt(10.0 ** ((level - snr_db) / 10.0) / p_noise)
    noise_scaled = gain * noise
    mixture = refs.sum(axis=0) + noise_scaled
    return mixture, refs, noise_scaled


@dataclass
class Mixture:
    mixture: np.ndarray
    references: np.ndarray  # (C, L) reverberant, pre-noise
    noise: np.ndarray
    dry: np.ndarray  # (C, L) before reverberation
    record: dict


def _speaker_rng(spk_seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spk_seed, 1]))


def generate_mixture(cfg: GenConfig, seed: int, index: int = 0, corpus: FileCorpus | None = None) -> Mixture:
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    if cfg.source_kind == "file-corpus":
        corpus = corpus or FileCorpus(cfg.corpus_dir, cfg.noise_dir)
    spec = sample_spec(cfg, rng, seed=seed, corpus=corpus)
    rate = cfg.sample_rate
    dry, timelines = [], []
    for c, utts in enumerate(spec.utterances):
        if cfg.source_kind == "synthetic":
            srng = _speaker_rng(spec.speaker_seeds[c])
            traits = SpeakerTraits.sample(srng)
            waves = []
            for _, dur in utts:
                u = synth_utterance(srng, dur, rate, traits)
                waves.append(u * (cfg.utterance_rms / np.sqrt(np.mean(u ** 2))))
            levels = spec.levels_db[c]
        else:
            waves = []
            for src, _ in utts:
                u = corpus.load(src, rate)
                rms = np.sqrt(np.mean(u ** 2))
                waves.append(u * (cfg.utterance_rms / rms) if rms > 0 else u)
            levels = spec.levels_db[c]
        sig, tl = build_speaker_signal(waves, spec.gaps_s[c], levels, rate)
        dry.append(sig)
        timelines.append(tl)
    L = max(s.size for s in dry)
    if cfg.fixed_length_s is not None:
        L = int(round(cfg.fixed_length_s * rate))
    dry_arr = np.zeros((len(dry), L))
    for c, s in enumerate(dry):
        dry_arr[c, : min(L, s.size)] = s[:L]
    end_s = L / rate
    timelines = [[(s, min(e, end_s)) for s, e in tl if s < end_s] for tl in timelines]

    warn = []
    if cfg.reverb_enabled:
        _, clamped = sabine_absorption(spec.room_m, spec.rt60_s)
        if clamped:
            warn.append("absorption_clamped")
        wet = np.zeros_like(dry_arr)
        for c in range(len(dry)):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                h = render_rir(spec.room_m, spec.sources_m[c], spec.mic_m, spec.rt60_s, rate,
                               max_order=cfg.rir_max_order, diffuse_tail=cfg.rir_diffuse_tail, rng=rng)
            wet[c] = sps.fftconvolve(dry_arr[c], h)[:L]
    else:
        wet = dry_arr

    noise = synth_noise(rng, L, rate) if corpus is None or not corpus.noise_files else corpus.noise(rng, L, rate)
    mixture, refs, noise_scaled = scale_and_mix(wet, noise, spec.snr_db)
    record = {
        "id": f"mix{index:05d}",
        "seed": seed,
        "index": index,
        "length_s": L / rate,
        "sample_rate": rate,
        "snr_db": spec.snr_db,
        "rt60_s": spec.rt60_s,
        "room_m": list(spec.room_m),
        "mic_m": list(spec.mic_m),
        "sources_m": [list(p) for p in spec.sources_m],
        "timeline": sorted([c, s, e] for c, tl in enumerate(timelines) for s, e in tl),
        "n_utterances": [len(u) for u in spec.utterances],
        "gaps_s": spec.gaps_s,
        "levels_db": spec.levels_db,
        "sources": [[src for src, _ in u] for u in spec.utterances],
        "gap_range_s": list(cfg.gap_range),
        "utterances_per_speaker": list(cfg.utterances_per_speaker),
        "reverb": cfg.reverb_enabled,
        "warnings": warn,
    }
    return Mixture(mixture, refs, noise_scaled, dry_arr, record)


def generate_dataset(cfg: GenConfig, n: int, out_dir: str | Path, seed: int = 0, split: str = "train") -> Path:
    """Write ``n`` mixtures to ``out_dir/split`` plus ``manifest.jsonl``; returns the manifest path."""
    root = Path(out_dir) / split
    root.mkdir(parents=True, exist_ok=True)
    corpus = FileCorpus(cfg.corpus_dir, cfg.noise_dir) if cfg.source_kind == "file-corpus" else None
    manifest = root / "manifest.jsonl"
    with manifest.open("w", encoding="utf-8") as fh:
        for i in range(n):
            mix = generate_mixture(cfg, seed, i, corpus=corpus)
            rec = mix.record
            rec["mixture"] = f"{rec['id']}_mix.wav"
            rec["references"] = [f"{rec['id']}_spk{c}.wav" for c in range(len(mix.references))]
            write_wav(root / rec["mixture"], Waveform(mix.mixture, cfg.sample_rate))
            for c, ref in enumerate(mix.references):
                write_wav(root / rec["references"][c], Waveform(ref, cfg.sample_rate))
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (root / "gen_config.json").write_text(json.dumps(asdict(cfg), sort_keys=True, indent=2))
    return manifest


class ManifestError(ValueError):
    pass


def read_manifest(path: str | Path) -> list[dict]:
    records = []
    required = {"id", "mixture", "references", "timeline", "length_s", "sample_rate"}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            missing = required - set(rec)
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing keys {sorted(missing)}")
            records.append(rec)
    return records


def load_example(manifest: str | Path, rec: dict) -> tuple[np.ndarray, np.ndarray]:
    """Mixture and (C, L) references of one manifest record."""
    root = Path(manifest).parent
    mix = read_wav(root / rec["mixture"]).samples
    refs = np.stack([read_wav(root / r).samples for r in rec["references"]])
    return mix, refs
