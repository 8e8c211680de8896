import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from ftrnn import autodiff as ad
from ftrnn import gradcheck
from ftrnn.autodiff import Tensor, Tape, backward, finite_diff_check
from ftrnn.model import LstmCellParams, lstm_cell

from oracles import direct_conv2d, lstm_reference, scatter_conv_transpose2d


def grads_of(fn, *tensors):
    with Tape() as tape:
        loss = fn(*tensors)
    g = backward(tape, loss, wrt=tensors)
    return [g[t.id] for t in tensors]


def test_square_sum_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    (g,) = grads_of(lambda t: (t * t).sum(), x)
    np.testing.assert_array_equal(g, [2.0, 4.0, 6.0])


def test_sum_gradient_is_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
    (g,) = grads_of(lambda t: t.sum(), x)
    np.testing.assert_array_equal(g, np.ones((3, 4)))


def test_untouched_leaf_gets_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([5.0, 6.0, 7.0], requires_grad=True)
    gx, gy = grads_of(lambda a, b: (a * a).sum(), x, y)
    np.testing.assert_array_equal(gy, np.zeros(3))


def test_gradients_accumulate_over_reuse():
    x = Tensor([2.0], requires_grad=True)
    (g,) = grads_of(lambda t: (t * t + t * 3.0).sum(), x)
    assert g[0] == pytest.approx(7.0)


def test_nonscalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * x
    with pytest.raises(ad.ShapeError):
        backward(tape, y)


def test_loss_from_other_tape_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        loss = (x * x).sum()
    with Tape() as other:
        (x + 1.0).sum()
    with pytest.raises(ValueError):
        backward(other, loss)


def test_unknown_primitive():
    with pytest.raises(ad.UnknownPrimitiveError):
        ad.apply_primitive("fft_of_doom", [Tensor([1.0])])


def test_zero_sized_dimension_rejected():
    with pytest.raises(ad.ShapeError):
        Tensor(np.zeros((0, 3)))


def test_matmul_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))


def test_no_tape_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    y = x * 2.0
    assert ad.active_tape() is None and y.requires_grad is False


def test_mixed_dtypes_rejected():
    with pytest.raises(TypeError):
        Tensor(np.ones(2, dtype=np.float32)) + Tensor(np.ones(2))


def test_layer_norm_sum_gradient_matches_finite_differences():
    # sum(layer_norm(x)) is constant in x, so both routes give ~0 and the relative
    # metric is meaningless; instead check the absolute difference
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    g, b = Tensor(np.ones(5)), Tensor(np.zeros(5))
    (ga,) = grads_of(lambda t: ad.layer_norm(t, g, b).sum(), x)
    assert np.abs(ga).max() < 1e-12


def test_layer_norm_weighted_sum_within_1e6():
    rng = np.random.default_rng(2)
    w = Tensor(rng.standard_normal((3, 5)))
    g, b = Tensor(rng.standard_normal(5)), Tensor(rng.standard_normal(5))
    err = finite_diff_check(lambda p: (ad.layer_norm(p[0], g, b) * w).sum(), [Tensor(rng.standard_normal((3, 5)))])
    assert err < 1e-6


def test_fd_sigmoid_sum():
    x = Tensor(np.random.default_rng(3).standard_normal((4, 5)))
    assert finite_diff_check(lambda p: ad.sigmoid(p[0]).sum(), [x]) < 1e-7


def test_fd_constant_function_is_zero():
    x = Tensor(np.ones(3))
    assert finite_diff_check(lambda p: Tensor(np.array(2.0)), [x]) == 0.0


def test_fd_reports_nonfinite_entry():
    x = Tensor(np.array([1.0, 0.0]))
    with np.errstate(divide="ignore", invalid="ignore"):
        with pytest.raises(FloatingPointError, match=r"param 0 entry \d+"):
            finite_diff_check(lambda p: (1.0 / p[0]).sum(), [x])


def test_fd_full_block_on_2x4x4():
    model = gradcheck._randomized(gradcheck.TINY_CHECK, 0)
    names = [k for k in model.params if k.startswith("blocks.0.")]
    rng = np.random.default_rng(0)
    z = Tensor(rng.standard_normal((2, 4, 4)))
    w = Tensor(rng.standard_normal((2, 4, 4)))
    from ftrnn.model import fullband_block, subband_block

    def fn(p):
        m = model.with_params({**model.params, **dict(zip(names, p[1:]))})
        return (subband_block(m, 0, fullband_block(m, 0, p[0])) * w).sum()

    assert finite_diff_check(fn, [z, *(model.params[k] for k in names)]) < 1e-5


@pytest.mark.parametrize("case", gradcheck.primitive_cases(), ids=lambda c: c.name)
def test_primitive_gradients(case):
    assert finite_diff_check(case.fn, case.params) < 1e-5


def test_lstm_cell_gradient():
    case = gradcheck.lstm_cell_case()
    assert finite_diff_check(case.fn, case.params) < 1e-5


shapes = hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=6).filter(
    lambda s: len(s) < 3 or s[0] <= 4 and s[1] <= 5
)
elementwise = st.sampled_from(["add", "sub", "mul", "div", "tanh", "sigmoid", "neg", "log"])


@given(shape=shapes, op=elementwise, seed=st.integers(0, 2 ** 31 - 1))
def test_elementwise_gradients_property(shape, op, seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.uniform(0.5, 2.0, size=shape))
    b = Tensor(rng.uniform(0.5, 2.0, size=shape))
    w = Tensor(rng.standard_normal(shape))
    fns = {
        "add": lambda p: p[0] + p[1], "sub": lambda p: p[0] - p[1], "mul": lambda p: p[0] * p[1],
        "div": lambda p: p[0] / p[1], "tanh": lambda p: ad.tanh(p[0]), "sigmoid": lambda p: ad.sigmoid(p[0]),
        "neg": lambda p: -p[0], "log": lambda p: ad.log(p[0]),
    }
    assert finite_diff_check(lambda p: (fns[op](p) * w).sum(), [a, b]) < 1e-5


@given(seed=st.integers(0, 2 ** 31 - 1), axis=st.sampled_from([0, 1, 2, -1]))
def test_reduction_gradients_property(seed, axis):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((4, 5, 6)))
    w = Tensor(rng.standard_normal(np.delete(np.array([4, 5, 6]), axis)))
    assert finite_diff_check(lambda p: (p[0].mean(axis=axis) * w).sum(), [x]) < 1e-5


def test_conv2d_matches_direct_loops_and_keeps_size():
    rng = np.random.default_rng(4)
    x, w, b = rng.standard_normal((2, 3, 7, 5)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    assert out.shape == (2, 4, 7, 5)
    np.testing.assert_allclose(out, direct_conv2d(x, w, b, 1), atol=1e-12)


def test_conv_transpose2d_matches_scatter_and_keeps_size():
    rng = np.random.default_rng(5)
    x, w, b = rng.standard_normal((2, 3, 6, 4)), rng.standard_normal((3, 5, 3, 3)), rng.standard_normal(5)
    out = ad.conv_transpose2d(Tensor(x), Tensor(w), Tensor(b)).data
    assert out.shape == (2, 5, 6, 4)
    np.testing.assert_allclose(out, scatter_conv_transpose2d(x, w, b, 1), atol=1e-12)


def test_conv_rejects_other_strides():
    x = Tensor(np.ones((1, 1, 4, 4)))
    with pytest.raises(ValueError):
        ad.conv2d(x, Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), stride=2)


@pytest.mark.parametrize("reverse", [False, True])
def test_fused_lstm_matches_reference(reverse):
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 7, 4))
    W, U, b = rng.standard_normal((20, 4)), rng.standard_normal((20, 5)), rng.standard_normal(20)
    out = ad.lstm(Tensor(x), Tensor(W), Tensor(U), Tensor(b), reverse=reverse).data
    np.testing.assert_allclose(out, lstm_reference(x, W, U, b, reverse), atol=1e-12)


def test_fused_lstm_matches_cell_composition():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 5, 3))
    p = LstmCellParams(Tensor(rng.standard_normal((12, 3))), Tensor(rng.standard_normal((12, 3))),
                       Tensor(rng.standard_normal(12)))
    h = c = Tensor(np.zeros((2, 3)))
    steps = []
    for t in range(5):
        h, c = lstm_cell(Tensor(x[:, t]), h, c, p)
        steps.append(h.data)
    np.testing.assert_allclose(ad.lstm(Tensor(x), *p).data, np.stack(steps, axis=1), atol=1e-12)


def test_blstm_halves():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 6, 3))
    f = [rng.standard_normal(s) for s in ((8, 3), (8, 2), (8,))]
    r = [rng.standard_normal(s) for s in ((8, 3), (8, 2), (8,))]
    out = ad.blstm(Tensor(x), [Tensor(a) for a in f], [Tensor(a) for a in r]).data
    np.testing.assert_allclose(out[..., :2], lstm_reference(x, *f), atol=1e-12)
    np.testing.assert_allclose(out[..., 2:], lstm_reference(x, *r, reverse=True), atol=1e-12)


def test_determinism_bit_identical():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 9, 4)).astype(np.float32)
    W, U, b = (rng.standard_normal(s).astype(np.float32) for s in ((16, 4), (16, 4), (16,)))
    a = ad.lstm(Tensor(x), Tensor(W), Tensor(U), Tensor(b)).data
    c = ad.lstm(Tensor(x), Tensor(W), Tensor(U), Tensor(b)).data
    assert np.array_equal(a, c) and a.dtype == np.float32
