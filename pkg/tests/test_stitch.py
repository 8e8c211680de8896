import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ftrnn.losses import si_sdr
from ftrnn.model import init_model
from ftrnn.stitch import (
    SegmentDiagnostics, oracle_align, overlap_add_stitch, plan_segments, separate_direct, separate_stitched,
    slice_segments,
)
from ftrnn.toy import TOY_MODEL


def test_plan_worked_example():
    plan = plan_segments(12 * 16000, 5.0, 0.2, 16000)
    assert [s for s, _, _ in plan.segments] == [0, 64000, 128000]
    assert plan.hop == 64000 and plan.segments[-1][2] == 16000


def test_plan_short_input_and_disjoint_tiling():
    plan = plan_segments(3000, 1.0, 0.2, 8000)
    assert plan.segments == ((0, 3000, 5000),)
    plan = plan_segments(24000, 1.0, 0.0, 8000)
    assert plan.segments == ((0, 8000, 0), (8000, 16000, 0), (16000, 24000, 0))


@given(length=st.integers(1, 50000), seg_s=st.floats(0.1, 2.0), overlap=st.floats(0.0, 0.9))
def test_plan_invariants(length, seg_s, overlap):
    plan = plan_segments(length, seg_s, overlap, 8000)
    starts = [s for s, _, _ in plan.segments]
    assert starts[0] == 0 and all(b - a == plan.hop for a, b in zip(starts, starts[1:]))
    assert plan.segments[-1][1] == length
    assert all(pad == 0 for _, _, pad in plan.segments[:-1])
    covered = np.zeros(length, dtype=bool)
    for s, e, _ in plan.segments:
        covered[s:e] = True
    assert covered.all()


def test_plan_rejects_bad_overlap():
    with pytest.raises(ValueError):
        plan_segments(100, 1.0, 1.0, 8000)


@given(length=st.integers(1, 30000), seed=st.integers(0, 2 ** 31 - 1))
def test_identity_round_trip(length, seed):
    x = np.random.default_rng(seed).standard_normal((2, length))
    plan = plan_segments(length, 1.0, 0.2, 8000)
    assert np.abs(overlap_add_stitch(slice_segments(x, plan), plan) - x).max() < 1e-12


def test_overlap_is_averaged():
    plan = plan_segments(15, 10 / 8000, 0.5, 8000)
    segs = np.stack([np.full(10, 1.0), np.full(10, 3.0)])
    out = overlap_add_stitch(segs, plan)
    np.testing.assert_array_equal(out, [1.0] * 5 + [2.0] * 5 + [3.0] * 5)


def test_stitch_rejects_nonconforming():
    plan = plan_segments(100, 50 / 8000, 0.2, 8000)
    with pytest.raises(ValueError):
        overlap_add_stitch(np.zeros((1, 50)), plan)


def swapped(refs, rng):
    perms = [rng.permutation(refs.shape[1]) for _ in range(refs.shape[0])]
    return np.stack([r[p] for r, p in zip(refs, perms)]), perms


@given(seed=st.integers(0, 2 ** 31 - 1), C=st.sampled_from([2, 3]))
def test_oracle_recovers_swaps(seed, C):
    rng = np.random.default_rng(seed)
    refs = rng.standard_normal((6, C, 200))
    est, perms = swapped(refs, rng)
    aligned, diags = oracle_align(est, refs)
    assert np.array_equal(aligned, refs)
    for d, p in zip(diags, perms):
        assert d.permutation == tuple(int(v) for v in p)
        assert not d.fallback


@given(seed=st.integers(0, 2 ** 31 - 1))
def test_alignment_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    refs = rng.standard_normal((4, 2, 150))
    est = refs[:, ::-1] + rng.uniform(0.3, 3.0) * rng.standard_normal(refs.shape)
    _, diags = oracle_align(est, refs)
    for s, d in enumerate(diags):
        want = max(itertools.permutations(range(2)),
                   key=lambda p: np.mean([si_sdr(refs[s, p[e]], est[s, e]) for e in range(2)]))
        assert d.permutation == want


def test_silent_reference_uses_energy_fallback():
    rng = np.random.default_rng(0)
    refs = np.zeros((1, 2, 300))
    refs[0, 1] = rng.standard_normal(300)
    est = np.stack([[refs[0, 1] + 0.1 * rng.standard_normal(300), 1e-3 * rng.standard_normal(300)]])
    aligned, diags = oracle_align(est, refs)
    assert diags[0].fallback == [0] and diags[0].permutation == (1, 0)
    assert diags[0].si_sdr[0] is None and diags[0].si_sdr[1] > 15
    assert set(diags[0].as_dict()) == {"index", "permutation", "si_sdr", "fallback"}
    assert isinstance(diags[0], SegmentDiagnostics)


def test_oracle_rejects_mismatch():
    with pytest.raises(ValueError, match="count"):
        oracle_align(np.zeros((2, 2, 10)), np.zeros((3, 2, 10)))
    with pytest.raises(ValueError, match="shape"):
        oracle_align(np.zeros((2, 2, 10)), np.zeros((2, 2, 11)))


def test_oracle_separator_stitches_to_sources():
    rng = np.random.default_rng(1)
    refs = rng.standard_normal((2, 20000))
    mix = refs.sum(axis=0)
    lookup = {}

    def separator(seg):
        # an oracle that returns the true sources of the segment in a random order
        return lookup[seg.tobytes()][rng.permutation(2)]

    plan = plan_segments(mix.size, 0.5, 0.2, 8000)
    for m, r in zip(slice_segments(mix, plan), slice_segments(refs, plan)):
        lookup[m.tobytes()] = r
    out, diags, _ = separate_stitched(separator, mix, refs, 0.5, 0.2, 8000)
    assert np.abs(out - refs).max() < 1e-6 and len(diags) == len(plan.segments)


def test_direct_inference_contract():
    model = init_model(TOY_MODEL)
    x = np.random.default_rng(2).standard_normal(8000)
    a, b = separate_direct(model, x), separate_direct(model, x)
    assert a.shape == (2, 8000) and np.array_equal(a, b)
