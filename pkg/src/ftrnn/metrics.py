"""Recording-level SI-SDR, energy VAD and diarization error rate."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .losses import best_permutation, si_sdr_matrix

Intervals = list[tuple[float, float]]


@dataclass(frozen=True)
class Annotation:
    speakers: tuple[tuple[tuple[float, float], ...], ...]  # per speaker, sorted disjoint (start, end)
    length: float | None = None

    def __post_init__(self):
        spk = tuple(tuple((float(s), float(e)) for s, e in ivs) for ivs in self.speakers)
        object.__setattr__(self, "speakers", spk)
        for c, ivs in enumerate(spk):
            prev = -np.inf
            for s, e in ivs:
                if s < 0 or e < s or (self.length is not None and e > self.length + 1e-9):
                    raise ValueError(f"speaker {c}: interval ({s}, {e}) outside [0, {self.length}]")
                if s < prev:
                    raise ValueError(f"speaker {c}: intervals overlap or are unsorted near {s}")
                prev = e

    @classmethod
    def from_timeline(cls, timeline, n_speakers: int, length: float | None = None) -> "Annotation":
        """From manifest records ``[(speaker, start, end), ...]``."""
        per = [[] for _ in range(n_speakers)]
        for c, s, e in timeline:
            per[int(c)].append((s, e))
        return cls(tuple(tuple(sorted(p)) for p in per), length)

    @property
    def n_speakers(self) -> int:
        return len(self.speakers)


@dataclass(frozen=True)
class DerResult:
    missed: float
    false_alarm: float
    confusion: float
    total_speech: float
    mapping: tuple[int, ...] = ()  # reference speaker r -> hypothesis speaker mapping[r]

    @property
    def der(self) -> float:
        return (self.missed + self.false_alarm + self.confusion) / self.total_speech


def eval_si_sdr(references, estimates) -> tuple[float, tuple[int, ...]]:
    """Mean SI-SDR under the single best permutation for the whole recording."""
    perm, mean = best_permutation(si_sdr_matrix(np.asarray(references), np.asarray(estimates)))
    return mean, perm


def energy_vad(wave, rate: int | None = None, frame_s: float = 0.025, threshold_db: float = -40.0,
               bridge_s: float = 0.2) -> Intervals:
    """Active intervals where the frame RMS is within ``threshold_db`` of the peak frame RMS."""
    x = np.asarray(getattr(wave, "samples", wave), dtype=np.float64)
    rate = rate or wave.sample_rate
    if frame_s <= 0:
        raise ValueError("frame_s must be positive")
    frame = max(int(round(frame_s * rate)), 1)
    hop = max(frame // 2, 1)
    n_frames = max(1 + (x.size - frame) // hop, 1) if x.size >= frame else 1
    padded = np.pad(x, (0, max(frame + (n_frames - 1) * hop - x.size, 0)))
    idx = np.arange(n_frames)[:, None] * hop + np.arange(frame)[None, :]
    rms = np.sqrt(np.mean(padded[idx] ** 2, axis=1))
    peak = rms.max()
    if peak <= 0:
        return []
    active = 20.0 * np.log10(np.maximum(rms, 1e-300) / peak) > threshold_db
    intervals: Intervals = []
    for i in np.flatnonzero(active):
        s, e = float(i * hop / rate), float(min((i * hop + frame) / rate, x.size / rate))
        if intervals and s - intervals[-1][1] < bridge_s:
            intervals[-1] = (intervals[-1][0], e)
        else:
            intervals.append((s, e))
    return intervals


def _boundaries(*annotations: Annotation) -> np.ndarray:
    pts = {0.0}
    for a in annotations:
        for ivs in a.speakers:
            for s, e in ivs:
                pts.update((s, e))
    return np.array(sorted(pts))


def _activity(ann: Annotation, mids: np.ndarray) -> np.ndarray:
    """(speakers, slices) boolean activity at slice midpoints."""
    act = np.zeros((ann.n_speakers, mids.size), dtype=bool)
    for c, ivs in enumerate(ann.speakers):
        for s, e in ivs:
            act[c] |= (mids >= s) & (mids < e)
    return act


def _collar_mask(ref: Annotation, mids: np.ndarray, collar: float) -> np.ndarray:
    keep = np.ones(mids.size, dtype=bool)
    if collar > 0:
        for ivs in ref.speakers:
            for s, e in ivs:
                for b in (s, e):
                    keep &= ~((mids > b - collar) & (mids < b + collar))
    return keep


def _score_counts(ref_n: np.ndarray, hyp_n: np.ndarray, correct: np.ndarray, dur: np.ndarray):
    missed = np.sum(dur * np.maximum(ref_n - hyp_n, 0))
    fa = np.sum(dur * np.maximum(hyp_n - ref_n, 0))
    conf = np.sum(dur * (np.minimum(ref_n, hyp_n) - correct))
    return float(missed), float(fa), float(conf), float(np.sum(dur * ref_n))


def der(reference: Annotation, hypothesis: Annotation, collar_s: float = 0.0) -> DerResult:
    """DER with the optimal one-to-one speaker mapping, scored over homogeneous slices.

    Per slice with ``R`` reference and ``H`` hypothesis speakers active and
    ``K`` mapped pairs both active: missed ``max(R-H, 0)``, false alarm
    ``max(H-R, 0)``, confusion ``min(R, H) - K``, each weighted by the slice
    duration.  Slices within ``collar_s`` of a reference boundary are ignored.
    """
    if collar_s < 0:
        raise ValueError("collar_s must be >= 0")
    edges = _boundaries(reference, hypothesis)
    if collar_s > 0:
        extra = [b + d for ivs in reference.speakers for iv in ivs for b in iv for d in (-collar_s, collar_s)]
        edges = np.unique(np.concatenate([edges, np.clip(extra, 0.0, None)]))
    dur = np.diff(edges)
    mids = edges[:-1] + dur / 2
    keep = _collar_mask(reference, mids, collar_s) & (dur > 0)
    dur, mids = dur[keep], mids[keep]
    R = _activity(reference, mids)
    H = _activity(hypothesis, mids)
    total = float(np.sum(dur * R.sum(0)))
    if total <= 0:
        raise ValueError("reference has no scored speech; DER is undefined")
    # overlap[r, h] = time both reference r and hypothesis h are active
    overlap = (R[:, None, :] & H[None, :, :]).astype(np.float64) @ dur
    mapping = _best_mapping(overlap)
    correct = np.zeros(mids.size)
    for r, h in enumerate(mapping):
        if h >= 0:
            correct += R[r] & H[h]
    missed, fa, conf, total = _score_counts(R.sum(0), H.sum(0), correct, dur)
    return DerResult(missed, fa, conf, total, tuple(mapping))


def _best_mapping(overlap: np.ndarray) -> list[int]:
    """Reference -> hypothesis assignment maximising matched time (-1 = unmapped)."""
    n_ref, n_hyp = overlap.shape
    if max(n_ref, n_hyp) <= 3:
        best, best_val = None, -1.0
        size = max(n_ref, n_hyp)
        for perm in itertools.permutations(range(size)):
            m = [perm[r] if perm[r] < n_hyp else -1 for r in range(n_ref)]
            val = sum(overlap[r, h] for r, h in enumerate(m) if h >= 0)
            if val > best_val + 1e-12:
                best, best_val = m, val
        return best
    rows, cols = linear_sum_assignment(-overlap)
    m = [-1] * n_ref
    for r, h in zip(rows, cols):
        m[r] = int(h)
    return m


def intervals_to_annotation(per_channel: list[Intervals], length: float | None = None) -> Annotation:
    return Annotation(tuple(tuple(ivs) for ivs in per_channel), length)
