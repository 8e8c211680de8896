"""Desk-scale configuration shared by the overfit experiment, its tests and the CLI."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .metrics import eval_si_sdr
from .mixgen import GenConfig, generate_mixture
from .model import FtrnnConfig, FtrnnModel, init_model, separate
from .trainer import TrainConfig, train

TOY_MODEL = FtrnnConfig(sample_rate=8000, n_fft=128, hop=64, D=8, N=2, H_full=16, H_sub=16, C=2)

# 4 s mixtures cannot hold 4-5 utterances with 1-3 s gaps, so the toy data
# shortens both while keeping the alternating gap/utterance structure.
TOY_GEN = GenConfig(
    sample_rate=8000,
    utterances_per_speaker=(1, 2),
    gap_range=(0.2, 1.0),
    utterance_s_range=(0.8, 1.8),
    fixed_length_s=4.0,
)


def make_toy_set(n: int, seed: int, gen: GenConfig = TOY_GEN, start_index: int = 0):
    """``n`` (mixture, references) pairs from the synthetic generator."""
    out = []
    for i in range(start_index, start_index + n):
        m = generate_mixture(gen, seed, i)
        out.append((m.mixture, m.references))
    return out


def concat_examples(examples) -> tuple[np.ndarray, np.ndarray]:
    """Join examples end to end into one long recording with consistent speaker channels."""
    mix = np.concatenate([m for m, _ in examples])
    refs = np.concatenate([r for _, r in examples], axis=1)
    return mix, refs


def toy_gen(**overrides) -> GenConfig:
    return replace(TOY_GEN, **overrides)


TOY_TRAIN = TrainConfig(lr=1e-2, batch_size=3, max_epochs=10_000, segment_s=4.0, early_stop_patience=10_000,
                        max_steps=300)


@dataclass
class OverfitResult:
    model: FtrnnModel
    unprocessed_si_sdr: float
    trained_si_sdr: float
    steps: int
    wall_s: float

    @property
    def improvement(self) -> float:
        return self.trained_si_sdr - self.unprocessed_si_sdr


def mean_si_sdr(model: FtrnnModel | None, examples) -> float:
    """Mean recording-level SI-SDR; ``model=None`` scores the mixture copied to every channel."""
    scores = []
    for mix, refs in examples:
        est = np.stack([mix] * len(refs)) if model is None else separate(model, mix)
        scores.append(eval_si_sdr(refs, est)[0])
    return float(np.mean(scores))


def toy_overfit(n_mixtures: int = 20, data_seed: int = 0, model_seed: int = 0, train_cfg: TrainConfig = TOY_TRAIN,
                log=None) -> OverfitResult:
    """Train the toy model on ``n_mixtures`` toy mixtures and score it on the same data."""
    data = make_toy_set(n_mixtures, data_seed)
    model = init_model(TOY_MODEL, seed=model_seed)
    t0 = time.perf_counter()
    best, history = train(model, data, None, train_cfg, log=log)
    wall = time.perf_counter() - t0
    return OverfitResult(best, mean_si_sdr(None, data), mean_si_sdr(best, data), sum(h.steps for h in history), wall)


def long_toy_set(n: int, seed: int, length_s: float = 48.0):
    """Held-out recordings of ``length_s`` seconds with the same two speakers throughout."""
    # about 1.9 s per utterance plus gap, so 24-28 utterances cover 48 s before the crop
    per_speaker = int(math.ceil(length_s / 1.9))
    gen = toy_gen(fixed_length_s=length_s, utterances_per_speaker=(per_speaker, per_speaker + 4))
    return make_toy_set(n, seed, gen)
