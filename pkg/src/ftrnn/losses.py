"""SI-SDR, SA-SDR and permutation invariant training losses.

Metric functions take numpy arrays and return floats.  The ``*_tensor``
variants build the same quantities on the autodiff tape for training.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

EPS = 1e-8
TINY = 1e-30  # keeps 0/0 away when an estimate is exactly zero
_LOG10 = math.log(10.0)


def _check_pair(reference: np.ndarray, estimate: np.ndarray) -> None:
    if reference.shape != estimate.shape:
        raise ValueError(f"length mismatch: reference {reference.shape} vs estimate {estimate.shape}")


def si_sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB, signals mean-subtracted.

    The regulariser is ``EPS`` times the estimate energy, added to both the
    target and the error energy.  It caps the value near ``-10 log10(EPS)``
    = 80 dB for a perfect estimate at any level, and keeps the result exactly
    invariant to the estimate's gain.
    """
    ref = np.asarray(getattr(reference, "samples", reference), dtype=np.float64)
    est = np.asarray(getattr(estimate, "samples", estimate), dtype=np.float64)
    _check_pair(ref, est)
    if not np.any(ref):
        raise ValueError("si_sdr: reference is identically zero")
    return _si_sdr_nocheck(ref, est)


def si_sdr_matrix(references: np.ndarray, estimates: np.ndarray) -> np.ndarray:
    """``M[e, r]`` = SI-SDR of estimate ``e`` against reference ``r``."""
    C = len(references)
    return np.array([[si_sdr(references[r], estimates[e]) for r in range(C)] for e in range(len(estimates))])


def best_permutation(score: np.ndarray, maximize: bool = True) -> tuple[tuple[int, ...], float]:
    """Exhaustive search over assignments estimate ``c`` -> reference ``perm[c]``.

    Returns the permutation and the mean of ``score[c, perm[c]]``.  Ties keep
    the lexicographically first permutation (identity first).
    """
    C = score.shape[0]
    best, best_val = None, None
    for perm in itertools.permutations(range(C)):
        val = float(np.mean([score[c, perm[c]] for c in range(C)]))
        if best_val is None or (val > best_val if maximize else val < best_val):
            best, best_val = perm, val
    return best, best_val


@dataclass(frozen=True)
class PitResult:
    permutation: tuple[int, ...]  # estimate index -> reference index
    loss: float
    per_pair: tuple[float, ...]  # metric (dB) of each estimate against its assigned reference


def pit_loss(references, estimates, channel_loss: str = "si-sdr") -> PitResult:
    """Permutation invariant loss evaluated over all C! assignments."""
    refs, ests = _stack(references), _stack(estimates)
    if channel_loss == "sa-sdr":
        value, perm = sa_sdr(refs, ests)
        per = tuple(si_sdr_safe(refs[perm[c]], ests[c]) for c in range(len(ests)))
        return PitResult(perm, -value, per)
    if channel_loss != "si-sdr":
        raise ValueError(f"unknown channel loss {channel_loss!r}")
    M = si_sdr_matrix(refs, ests)
    perm, mean = best_permutation(M)
    return PitResult(perm, -mean, tuple(float(M[c, perm[c]]) for c in range(len(perm))))


def sa_sdr(references, estimates) -> tuple[float, tuple[int, ...]]:
    """Source-aggregated SDR (dB) maximised over permutations; no per-channel rescaling."""
    refs, ests = _stack(references), _stack(estimates)
    best, best_val = None, None
    num = float(np.sum(refs * refs))
    for perm in itertools.permutations(range(len(ests))):
        err = sum(float(np.sum((refs[perm[c]] - ests[c]) ** 2)) for c in range(len(ests)))
        val = 10.0 * math.log10((num + EPS) / (err + EPS))
        if best_val is None or val > best_val:
            best, best_val = perm, val
    return best_val, best


def si_sdr_safe(reference: np.ndarray, estimate: np.ndarray) -> float:
    return si_sdr(reference, estimate) if np.any(reference) else float("nan")


def _stack(signals) -> np.ndarray:
    arrs = [np.asarray(getattr(s, "samples", s), dtype=np.float64) for s in signals]
    if len(arrs) < 2:
        raise ValueError(f"need at least two channels, got {len(arrs)}")
    for a in arrs[1:]:
        _check_pair(arrs[0], a)
    return np.stack(arrs)


# -- differentiable versions ------------------------------------------------------------

def si_sdr_tensor(reference: np.ndarray, estimate: Tensor) -> Tensor:
    """Per-signal SI-SDR along the last axis; ``reference`` is a constant."""
    ref = np.asarray(reference, dtype=estimate.dtype)
    if ref.shape != estimate.shape:
        raise ValueError(f"length mismatch: reference {ref.shape} vs estimate {estimate.shape}")
    ref = ref - ref.mean(axis=-1, keepdims=True)
    est = estimate - estimate.mean(axis=-1, keepdims=True)
    ref_energy = np.sum(ref * ref, axis=-1, keepdims=True)
    ref_energy = np.where(ref_energy > 0, ref_energy, 1.0)  # silent reference: alpha = 0
    alpha = (est * ref).sum(axis=-1, keepdims=True) / ref_energy
    target = alpha * ref
    err = est - target
    t_energy = (target * target).sum(axis=-1)
    e_energy = (err * err).sum(axis=-1)
    floor = (t_energy + e_energy) * EPS + TINY
    return ad.log((t_energy + floor) / (e_energy + floor)) * (10.0 / _LOG10)


def sa_sdr_tensor(references: np.ndarray, estimates: Tensor) -> Tensor:
    """SA-SDR over the channel axis (-2) of already-aligned (..., C, L) signals."""
    ref = np.asarray(references, dtype=estimates.dtype)
    num = np.sum(ref * ref, axis=(-2, -1)) + EPS
    diff = estimates - ref
    den = (diff * diff).sum(axis=-1).sum(axis=-1) + EPS
    return ad.log(Tensor(num.astype(estimates.dtype)) / den) * (10.0 / _LOG10)


def pit_loss_tensor(references: np.ndarray, estimates: Tensor, channel_loss: str = "si-sdr"):
    """Batch PIT loss: references (B, C, L) constants, estimates (B, C, L) tensor.

    The assignment is chosen per item without gradient; only the winning
    branch is differentiated.  Returns the mean loss over the batch and the
    chosen permutations.
    """
    refs = np.asarray(references, dtype=np.float64)
    est_np = estimates.data.astype(np.float64)
    perms = []
    for b in range(refs.shape[0]):
        if channel_loss == "si-sdr":
            M = np.array([[_si_sdr_nocheck(refs[b, r], est_np[b, e]) for r in range(refs.shape[1])]
                          for e in range(refs.shape[1])])
            perms.append(best_permutation(M)[0])
        elif channel_loss == "sa-sdr":
            perms.append(sa_sdr(refs[b], est_np[b])[1])
        else:
            raise ValueError(f"unknown channel loss {channel_loss!r}")
    aligned = np.stack([refs[b, list(p)] for b, p in enumerate(perms)])
    if channel_loss == "si-sdr":
        loss = -si_sdr_tensor(aligned, estimates).mean()
    else:
        loss = -sa_sdr_tensor(aligned, estimates).mean()
    return loss, perms


def _si_sdr_nocheck(ref: np.ndarray, est: np.ndarray) -> float:
    # training crops may contain a silent speaker; eps keeps this finite
    ref = ref - ref.mean()
    est = est - est.mean()
    ref_energy = np.dot(ref, ref)
    alpha = np.dot(est, ref) / ref_energy if ref_energy > 0 else 0.0
    target = alpha * ref
    err = est - target
    t_energy, e_energy = np.dot(target, target), np.dot(err, err)
    floor = (t_energy + e_energy) * EPS + TINY
    return float(10.0 * np.log10((t_energy + floor) / (e_energy + floor)))
