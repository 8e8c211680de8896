"""Fast randomized invariant checks across all modules, run by ``ftrnn selftest``."""
from __future__ import annotations

import itertools
import tempfile
import time
from pathlib import Path

import numpy as np

from . import gradcheck
from .dsp import StftConfig, istft_array, stft_array
from .losses import pit_loss, si_sdr
from .metrics import Annotation, der, energy_vad
from .mixgen import GenConfig, generate_mixture, measured_snr_db, sample_spec
from .model import load_checkpoint, save_checkpoint, init_model
from .stitch import oracle_align, overlap_add_stitch, plan_segments, slice_segments
from .toy import TOY_MODEL
from .trainer import AdamState, adam_step, clip_global_norm


def check_stft(rng) -> str:
    cfg = StftConfig(512, 256)
    worst = 0.0
    for _ in range(20):
        x = rng.standard_normal(int(rng.integers(8000, 48000)))
        worst = max(worst, float(np.abs(istft_array(stft_array(x, cfg), cfg, x.size) - x).max()))
    assert worst < 1e-6, worst
    return f"max reconstruction error {worst:.1e}"


def check_pit(rng) -> str:
    for _ in range(100):
        C = int(rng.integers(2, 4))
        refs = rng.standard_normal((C, 400))
        ests = refs[rng.permutation(C)] + 0.5 * rng.standard_normal((C, 400))
        res = pit_loss(refs, ests)
        brute = max(np.mean([si_sdr(refs[p[c]], ests[c]) for c in range(C)])
                    for p in itertools.permutations(range(C)))
        assert abs(-res.loss - brute) < 1e-9
        # matched pair: the projection is far above the eps regularizer
        r, e = refs[res.permutation[0]], ests[0]
        g = float(rng.uniform(0.1, 10.0))
        assert abs(si_sdr(r, g * e) - si_sdr(r, e)) < 1e-6
    return "PIT equals brute force, SI-SDR scale invariant"


def check_stitch(rng) -> str:
    rate = 100
    for _ in range(20):
        x = rng.standard_normal((2, int(rng.integers(50, 2000))))
        plan = plan_segments(x.shape[1], float(rng.uniform(0.5, 5.0)), float(rng.uniform(0.0, 0.9)), rate)
        segs = slice_segments(x, plan)
        assert np.abs(overlap_add_stitch(segs, plan) - x).max() < 1e-12
        swapped = segs.copy()
        flips = rng.random(len(segs)) < 0.5
        swapped[flips] = swapped[flips][:, ::-1]
        aligned, _ = oracle_align(swapped, segs)
        assert np.array_equal(aligned, segs)
    return "identity round trip and swap recovery"


def check_der(rng) -> str:
    ref = Annotation((((0.0, 10.0),), ()))
    assert abs(der(ref, Annotation((((0.0, 8.0),), ((8.0, 10.0),)))).der - 0.2) < 1e-12
    a = Annotation((((0.0, 3.0), (5.0, 6.0)), ((2.0, 4.0),)))
    b = Annotation((a.speakers[1], a.speakers[0]))
    assert der(a, a).der == 0.0 and der(a, b).der == 0.0
    x = np.zeros(5000)
    x[2000:3000] = np.sin(np.arange(1000))
    iv = energy_vad(x, 1000)
    assert len(iv) == 1 and abs(iv[0][0] - 2.0) <= 0.025 and abs(iv[0][1] - 3.0) <= 0.025
    return "reference cases"


def check_mixgen(rng) -> str:
    cfg = GenConfig()
    for _ in range(200):
        spec = sample_spec(cfg, rng)
        assert all(1.0 <= g <= 3.0 for gs in spec.gaps_s for g in gs)
        assert 0.0 <= spec.snr_db <= 10.0 and 0.2 <= spec.rt60_s <= 0.6
    small = GenConfig(sample_rate=8000, utterances_per_speaker=(1, 2), gap_range=(0.2, 1.0),
                      utterance_s_range=(0.5, 1.0), fixed_length_s=3.0)
    m = generate_mixture(small, int(rng.integers(1 << 30)), 0)
    assert np.array_equal(m.mixture, m.references.sum(axis=0) + m.noise)
    assert abs(measured_snr_db(m.references, m.noise) - m.record["snr_db"]) < 0.1
    return "ranges, additivity, SNR"


def check_checkpoint(rng) -> str:
    model = init_model(TOY_MODEL, seed=int(rng.integers(1000)))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.ckpt"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
    assert all(np.array_equal(model.params[k].data, back.params[k].data) for k in model.params)
    return f"{model.param_count()} parameters bit-exact"


def check_optimizer(rng) -> str:
    g, norm = clip_global_norm({"a": np.array([6.0, 8.0])}, 5.0)
    assert norm == 10.0 and np.allclose(g["a"], [3.0, 4.0])
    p, s = adam_step({"w": np.array([1.0])}, {"w": np.array([0.3])}, AdamState(), 1e-3)
    assert abs(1.0 - p["w"][0] - 1e-3) < 1e-7 and s.step == 1
    return "clipping and first Adam step"


def check_gradients(rng) -> str:
    results = gradcheck.run(gradcheck.primitive_cases(int(rng.integers(1000))) + [gradcheck.lstm_cell_case()])
    worst = max(results, key=lambda r: r.max_rel_error)
    assert all(r.ok for r in results), worst
    return f"worst {worst.name} {worst.max_rel_error:.1e}"


CHECKS = [check_stft, check_pit, check_stitch, check_der, check_mixgen, check_checkpoint, check_optimizer,
          check_gradients]


def run_all(seed: int = 0) -> list[tuple[str, bool, str]]:
    results = []
    for k, check in enumerate(CHECKS):
        rng = np.random.default_rng([seed, k])
        t0 = time.perf_counter()
        try:
            detail = check(rng)
            ok = True
        except AssertionError as exc:
            detail, ok = f"assertion failed: {exc}", False
        results.append((check.__name__.removeprefix("check_"), ok, f"{detail} ({time.perf_counter() - t0:.1f} s)"))
    return results
