"""Permutation invariant training with Adam, global-norm clipping and early stopping."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import pit_loss_tensor
from .model import FtrnnModel, forward_batch, save_checkpoint

LOSS_KINDS = {"si-sdr-pit": "si-sdr", "sa-sdr": "sa-sdr"}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 24
    max_epochs: int = 200
    clip_norm: float | None = 5.0  # None disables clipping
    segment_s: float = 10.0
    early_stop_patience: int = 10
    loss: str = "si-sdr-pit"
    seed: int = 0
    max_steps: int | None = None  # stop after this many optimizer steps
    max_skip_frac: float = 0.01  # abort when more steps than this are skipped in one epoch

    def __post_init__(self):
        for name in ("lr", "batch_size", "max_epochs", "segment_s", "early_stop_patience"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or None")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {sorted(LOSS_KINDS)}, got {self.loss!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class NonFiniteGradient(FloatingPointError):
    pass


class TrainingAborted(RuntimeError):
    pass


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None):
    """Rescale all gradients together when their joint L2 norm exceeds ``max_norm``.

    Returns (gradients, norm before clipping).
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NonFiniteGradient(f"gradient norm is {norm}")
    if max_norm is None or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * np.asarray(scale, dtype=g.dtype) for k, g in grads.items()}, norm


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float):
    """Bias-corrected Adam.  Returns new (params, state); inputs are not modified."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m.get(k, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(k, np.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[k] = (p - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
        m_new[k], v_new[k] = m, v
    return new_params, AdamState(t, m_new, v_new, b1, b2, state.eps)


def batch_loss(model: FtrnnModel, mixtures: np.ndarray, references: np.ndarray, loss: str = "si-sdr-pit"):
    """Mean PIT loss of a batch, on a fresh tape.  Returns (tape, loss tensor)."""
    with ad.Tape() as tape:
        est = forward_batch(model, mixtures)
        value, _ = pit_loss_tensor(references, est, LOSS_KINDS[loss])
    return tape, value


def loss_and_grads(model: FtrnnModel, mixtures: np.ndarray, references: np.ndarray, loss: str = "si-sdr-pit"):
    tape, value = batch_loss(model, mixtures, references, loss)
    by_id = ad.backward(tape, value, wrt=list(model.params.values()))
    grads = {k: by_id[t.id] for k, t in model.params.items()}
    return float(value.data), grads


def eval_loss(model: FtrnnModel, mixtures: np.ndarray, references: np.ndarray, loss: str = "si-sdr-pit",
              batch_size: int = 8) -> float:
    """Mean PIT loss without recording a tape."""
    total = 0.0
    for s in range(0, len(mixtures), batch_size):
        est = forward_batch(model, mixtures[s: s + batch_size])
        value, _ = pit_loss_tensor(references[s: s + batch_size], est, LOSS_KINDS[loss])
        total += float(value.data) * len(mixtures[s: s + batch_size])
    return total / len(mixtures)


def random_crop(mixture: np.ndarray, references: np.ndarray, length: int, rng: np.random.Generator):
    """A random ``length``-sample crop; shorter examples are zero-padded at the end."""
    L = mixture.shape[-1]
    if L <= length:
        pad = length - L
        return np.pad(mixture, (0, pad)), np.pad(references, ((0, 0), (0, pad)))
    s = int(rng.integers(0, L - length + 1))
    return mixture[s: s + length], references[:, s: s + length]


def fixed_crops(dataset, length: int):
    """Deterministic leading crops, used for validation."""
    rng = np.random.default_rng(0)
    pairs = [random_crop(m[: length], r[:, : length], length, rng) for m, r in dataset]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    train_loss: float
    val_loss: float | None
    grad_norm_mean: float
    grad_norm_max: float
    skipped: int
    wall_s: float


def train(model: FtrnnModel, train_set: Sequence, val_set: Sequence | None, cfg: TrainConfig,
          out_dir: str | Path | None = None, log=None):
    """Train on (mixture, references) pairs.  Returns (best model, history).

    Every epoch draws one random ``segment_s`` crop per training mixture.  The
    model with the lowest validation loss is kept (training loss when no
    validation set is given) and written to ``out_dir/best.ckpt``.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if val_set is not None and len(val_set) == 0:
        raise ValueError("empty validation set")
    rate = model.config.sample_rate
    seg = int(round(cfg.segment_s * rate))
    rng = np.random.default_rng(cfg.seed)
    params = {k: t.data for k, t in model.params.items()}
    state = AdamState()
    val_batch = fixed_crops(val_set, seg) if val_set is not None else None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    history: list[EpochRecord] = []
    best_loss, best_params, bad_epochs, steps = math.inf, dict(params), 0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        losses, norms, skipped, epoch_steps = [], [], 0, 0
        for s in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            crops = [random_crop(*train_set[i], seg, rng) for i in order[s: s + cfg.batch_size]]
            mix = np.stack([c[0] for c in crops])
            refs = np.stack([c[1] for c in crops])
            current = model.with_params({k: Tensor(v, requires_grad=True) for k, v in params.items()})
            epoch_steps += 1
            steps += 1
            try:
                value, grads = loss_and_grads(current, mix, refs, cfg.loss)
                if not math.isfinite(value):
                    raise NonFiniteGradient(f"loss is {value}")
                grads, norm = clip_global_norm(grads, cfg.clip_norm)
            except NonFiniteGradient as exc:
                skipped += 1
                if log:
                    log(f"epoch {epoch} step {steps}: skipped ({exc})")
                continue
            params, state = adam_step(params, grads, state, cfg.lr)
            losses.append(value)
            norms.append(norm)
        if epoch_steps == 0:
            break
        if skipped > cfg.max_skip_frac * epoch_steps:
            raise TrainingAborted(f"epoch {epoch}: {skipped}/{epoch_steps} steps skipped for non-finite values")
        current = model.with_params({k: Tensor(v, requires_grad=True) for k, v in params.items()})
        train_loss = float(np.mean(losses)) if losses else math.nan
        val_loss = eval_loss(current, *val_batch, cfg.loss) if val_batch is not None else None
        rec = EpochRecord(epoch, epoch_steps, train_loss, val_loss,
                          float(np.mean(norms)) if norms else math.nan, float(np.max(norms)) if norms else math.nan,
                          skipped, time.perf_counter() - t0)
        history.append(rec)
        if log:
            log(json.dumps(asdict(rec), sort_keys=True))
        criterion = val_loss if val_loss is not None else train_loss
        if criterion < best_loss:
            best_loss, best_params, bad_epochs = criterion, dict(params), 0
            if out is not None:
                save_checkpoint(current, out / "best.ckpt")
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.early_stop_patience:
                break
    if out is not None:
        with (out / "history.jsonl").open("w", encoding="utf-8") as fh:
            for rec in history:
                fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
    best = model.with_params({k: Tensor(v, requires_grad=True) for k, v in best_params.items()})
    return best, history
