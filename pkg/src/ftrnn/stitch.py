"""Whole-recording inference and the segment-separate-stitch baseline.

The stitched pipeline cuts a recording into fixed-length overlapping
segments, separates each one, aligns every segment's output channels to the
ground-truth references (oracle permutation), and averages overlaps.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .losses import _si_sdr_nocheck
from .model import FtrnnModel, separate


@dataclass(frozen=True)
class SegmentPlan:
    length: int  # original signal length
    segment_length: int
    hop: int
    segments: tuple[tuple[int, int, int], ...]  # (start, end within signal, zero padding)


def plan_segments(length: int, seg_s: float = 5.0, overlap_frac: float = 0.2, rate: int = 16000) -> SegmentPlan:
    if not 0.0 <= overlap_frac < 1.0:
        raise ValueError(f"overlap_frac must be in [0, 1), got {overlap_frac}")
    if seg_s <= 0 or length <= 0:
        raise ValueError("seg_s and length must be positive")
    seg = int(round(seg_s * rate))
    hop = max(seg - int(round(overlap_frac * seg)), 1)
    segments, start = [], 0
    while True:
        end = min(start + seg, length)
        segments.append((start, end, seg - (end - start)))
        if start + seg >= length:
            break
        start += hop
    return SegmentPlan(length, seg, hop, tuple(segments))


def slice_segments(signal: np.ndarray, plan: SegmentPlan) -> np.ndarray:
    """Cut ``signal`` (..., L) into (S, ..., segment_length), zero-padding the tail."""
    x = np.asarray(signal)
    if x.shape[-1] != plan.length:
        raise ValueError(f"signal length {x.shape[-1]} does not match plan length {plan.length}")
    out = np.zeros((len(plan.segments), *x.shape[:-1], plan.segment_length), dtype=x.dtype)
    for i, (s, e, _) in enumerate(plan.segments):
        out[i, ..., : e - s] = x[..., s:e]
    return out


def overlap_add_stitch(segments: np.ndarray, plan: SegmentPlan) -> np.ndarray:
    """Sample-wise mean over contributing segments; padding dropped."""
    segs = np.asarray(segments, dtype=np.float64)
    if segs.shape[0] != len(plan.segments) or segs.shape[-1] != plan.segment_length:
        raise ValueError(f"segments {segs.shape} do not conform to plan ({len(plan.segments)} x {plan.segment_length})")
    acc = np.zeros((*segs.shape[1:-1], plan.length))
    count = np.zeros(plan.length)
    for seg, (s, e, _) in zip(segs, plan.segments):
        acc[..., s:e] += seg[..., : e - s]
        count[s:e] += 1
    return acc / count


@dataclass
class SegmentDiagnostics:
    index: int
    permutation: tuple[int, ...]  # estimate channel c goes to reference permutation[c]
    si_sdr: list[float | None]  # per reference channel after alignment; None when silent
    fallback: list[int] = field(default_factory=list)  # reference channels aligned by energy

    def as_dict(self) -> dict:
        return {"fallback": self.fallback, "index": self.index, "permutation": list(self.permutation), "si_sdr": self.si_sdr}


def _align_one(est: np.ndarray, ref: np.ndarray) -> tuple[tuple[int, ...], list[int], np.ndarray]:
    C = ref.shape[0]
    silent = [r for r in range(C) if not np.any(ref[r])]
    score = np.empty((C, C))
    for e in range(C):
        for r in range(C):
            if r in silent:
                # a silent reference should receive the quietest estimate
                score[e, r] = -10.0 * np.log10(np.mean(est[e] ** 2) + 1e-20)
            else:
                score[e, r] = _si_sdr_nocheck(ref[r], est[e])
    # silent channels are scored on a different scale, so rank them after the SI-SDR channels
    best, best_key = None, None
    for perm in itertools.permutations(range(C)):
        sdr = [score[e, perm[e]] for e in range(C) if perm[e] not in silent]
        energy = [score[e, perm[e]] for e in range(C) if perm[e] in silent]
        key = (np.mean(sdr) if sdr else 0.0, np.mean(energy) if energy else 0.0)
        if best_key is None or key > best_key:
            best, best_key = perm, key
    return best, silent, score


def oracle_align(est_segments: np.ndarray, ref_segments: np.ndarray):
    """Permute each segment's channels to maximise mean SI-SDR against the references.

    Arrays are (S, C, segment_length).  Returns the aligned estimates, where
    ``aligned[s, r]`` is the estimate assigned to reference ``r``, and one
    :class:`SegmentDiagnostics` per segment.
    """
    est = np.asarray(est_segments, dtype=np.float64)
    ref = np.asarray(ref_segments, dtype=np.float64)
    if est.shape[0] != ref.shape[0]:
        raise ValueError(f"segment count mismatch: {est.shape[0]} estimates vs {ref.shape[0]} references")
    if est.shape != ref.shape:
        raise ValueError(f"segment shape mismatch: {est.shape} vs {ref.shape}")
    aligned = np.empty_like(est)
    diags = []
    for s in range(est.shape[0]):
        perm, silent, score = _align_one(est[s], ref[s])
        for e, r in enumerate(perm):
            aligned[s, r] = est[s, e]
        sdr = [None if r in silent else float(score[perm.index(r), r]) for r in range(len(perm))]
        diags.append(SegmentDiagnostics(s, tuple(perm), sdr, silent))
    return aligned, diags


def separate_direct(model: FtrnnModel, mixture: np.ndarray) -> np.ndarray:
    """One forward pass over the whole recording: (L,) -> (C, L)."""
    return separate(model, mixture)


Separator = Callable[[np.ndarray], np.ndarray]


def separate_stitched(separator: Separator, mixture: np.ndarray, references: np.ndarray,
                      seg_s: float = 5.0, overlap_frac: float = 0.2, rate: int = 16000):
    """Segment, separate, oracle-align and average.  Returns (C, L) output and diagnostics."""
    mixture = np.asarray(mixture, dtype=np.float64)
    plan = plan_segments(mixture.size, seg_s, overlap_frac, rate)
    mix_segs = slice_segments(mixture, plan)
    ref_segs = slice_segments(np.asarray(references, dtype=np.float64), plan)
    est_segs = np.stack([separator(m) for m in mix_segs])
    aligned, diags = oracle_align(est_segs, ref_segs)
    return overlap_add_stitch(aligned, plan), diags, plan
