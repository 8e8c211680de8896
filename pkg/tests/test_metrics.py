import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ftrnn.losses import si_sdr
from ftrnn.metrics import Annotation, der, energy_vad, eval_si_sdr, intervals_to_annotation

from oracles import grid_der


def ann(*speakers, length=None):
    return Annotation(tuple(tuple(s) for s in speakers), length)


def test_annotation_validation():
    with pytest.raises(ValueError):
        ann([(2.0, 1.0)])
    with pytest.raises(ValueError):
        ann([(0.0, 2.0), (1.0, 3.0)])
    with pytest.raises(ValueError):
        ann([(0.0, 2.0)], length=1.0)
    a = Annotation.from_timeline([[1, 2.0, 3.0], [0, 0.0, 1.0], [1, 0.5, 1.5]], 2)
    assert a.speakers == (((0.0, 1.0),), ((0.5, 1.5), (2.0, 3.0)))


def test_der_identity_swap_and_hand_case():
    ref = ann([(0.0, 3.0), (5.0, 6.0)], [(2.0, 4.0)])
    assert der(ref, ref).der == 0.0
    assert der(ref, ann(*ref.speakers[::-1])).der == 0.0
    res = der(ann([(0.0, 10.0)]), ann([(0.0, 8.0)], [(8.0, 10.0)]))
    assert res.confusion == pytest.approx(2.0) and res.der == pytest.approx(0.2)
    assert res.missed == 0.0 and res.false_alarm == 0.0


def test_der_missed_false_alarm_and_overlap():
    ref = ann([(0.0, 4.0)], [(2.0, 6.0)])
    hyp = ann([(0.0, 4.0)], [(3.0, 8.0)])
    res = der(ref, hyp)
    assert res.missed == pytest.approx(1.0) and res.false_alarm == pytest.approx(2.0)
    assert res.total_speech == pytest.approx(8.0) and res.der == pytest.approx(3.0 / 8.0)


def test_der_collar():
    ref = ann([(1.0, 3.0)])
    hyp = ann([(1.2, 2.8)])
    assert der(ref, hyp).missed == pytest.approx(0.4)
    assert der(ref, hyp, collar_s=0.25).der == 0.0


def test_der_errors():
    with pytest.raises(ValueError, match="undefined"):
        der(ann([]), ann([(0.0, 1.0)]))
    with pytest.raises(ValueError):
        der(ann([(0.0, 1.0)]), ann([(0.0, 1.0)]), collar_s=-1.0)


def test_der_many_speakers_uses_assignment():
    ref = ann(*[[(float(k), k + 1.0)] for k in range(5)])
    hyp = ann(*[[(float(k), k + 1.0)] for k in (3, 1, 4, 0, 2)])
    res = der(ref, hyp)
    assert res.der == 0.0 and res.mapping == (3, 1, 4, 0, 2)


def random_annotation(rng, n_spk, length=6.0):
    out = []
    for _ in range(n_spk):
        cuts = np.sort(np.round(rng.uniform(0, length, size=2 * rng.integers(1, 4)), 2))
        out.append([(float(a), float(b)) for a, b in cuts.reshape(-1, 2) if b > a])
    if not any(out):
        out[0] = [(0.0, 1.0)]
    return ann(*out)


@given(seed=st.integers(0, 2 ** 31 - 1), n_ref=st.integers(1, 3), n_hyp=st.integers(1, 3))
def test_der_matches_grid_oracle(seed, n_ref, n_hyp):
    rng = np.random.default_rng(seed)
    ref, hyp = random_annotation(rng, n_ref), random_annotation(rng, n_hyp)
    res = der(ref, hyp)
    want = grid_der([list(s) for s in ref.speakers], [list(s) for s in hyp.speakers])
    for got, exp in zip((res.missed, res.false_alarm, res.confusion, res.total_speech), want):
        assert abs(got - exp) <= 0.01 + 1e-9


@given(seed=st.integers(0, 2 ** 31 - 1))
def test_der_invariant_to_hypothesis_relabeling(seed):
    rng = np.random.default_rng(seed)
    ref, hyp = random_annotation(rng, 3), random_annotation(rng, 3)
    base = der(ref, hyp).der
    for perm in itertools.permutations(range(3)):
        assert der(ref, ann(*[hyp.speakers[p] for p in perm])).der == pytest.approx(base, abs=1e-12)


def test_eval_si_sdr():
    rng = np.random.default_rng(0)
    refs = rng.standard_normal((2, 1000))
    mean, perm = eval_si_sdr(refs, refs)
    assert perm == (0, 1) and mean >= 79.9
    est = refs[::-1] + 0.5 * rng.standard_normal(refs.shape)
    mean, perm = eval_si_sdr(refs, est)
    brute = max(((np.mean([si_sdr(refs[p[c]], est[c]) for c in range(2)]), p)
                 for p in itertools.permutations(range(2))))
    assert perm == brute[1] == (1, 0) and mean == pytest.approx(brute[0])


def test_unprocessed_mixture_scores_below_references():
    rng = np.random.default_rng(1)
    refs = rng.standard_normal((2, 4000))
    mix = refs.sum(axis=0)
    mean, _ = eval_si_sdr(refs, np.stack([mix, mix]))
    assert -1.0 < mean < 1.0


def test_vad_silence_tone_and_threshold():
    rate = 8000
    assert energy_vad(np.zeros(rate), rate) == []
    x = np.zeros(5 * rate)
    t = np.arange(rate) / rate
    x[2 * rate:3 * rate] = np.sin(2 * np.pi * 440 * t)
    (iv,) = energy_vad(x, rate)
    assert abs(iv[0] - 2.0) <= 0.025 and abs(iv[1] - 3.0) <= 0.025
    floor = x + 1e-9 * np.random.default_rng(0).standard_normal(x.size)
    assert energy_vad(floor, rate, threshold_db=-200.0) == [(0.0, 5.0)]


@given(gain=st.floats(1e-3, 1e3))
def test_vad_scale_invariant(gain):
    rng = np.random.default_rng(2)
    x = np.concatenate([np.zeros(4000), rng.standard_normal(4000), np.zeros(6000), 0.3 * rng.standard_normal(2000)])
    assert energy_vad(gain * x, 8000) == energy_vad(x, 8000)


def test_vad_bridges_short_gaps():
    rate = 8000
    x = np.zeros(3 * rate)
    x[8000:12000] = 1.0
    x[12800:16000] = 1.0  # 0.1 s gap gets bridged
    x[20000:22000] = 1.0  # 0.5 s gap does not
    out = energy_vad(x, rate)
    assert len(out) == 2


def test_intervals_to_annotation():
    a = intervals_to_annotation([[(0.0, 1.0)], []], length=2.0)
    assert a.n_speakers == 2 and a.length == 2.0
