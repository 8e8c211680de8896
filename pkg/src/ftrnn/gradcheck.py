"""Finite-difference checks for every primitive, the LSTM cell, one block and the full model.

Each case reduces its output to a scalar with fixed random weights, so that
no gradient is identically zero by symmetry (``sum(layer_norm(x))`` would be).
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dsp import istft_tensor
from .losses import pit_loss_tensor
from .model import FtrnnConfig, LstmCellParams, forward_batch, fullband_block, init_model, lstm_cell, subband_block

PRIMITIVE_TOL = 1e-5
MODEL_TOL = 1e-4


@dataclass
class GradCase:
    name: str
    fn: Callable[[list[Tensor]], Tensor]
    params: list[Tensor]
    tol: float = PRIMITIVE_TOL
    max_entries: int | None = None


def _t(rng, *shape, low=None):
    if low is not None:
        return Tensor(rng.uniform(low, low + 1.0, size=shape))
    return Tensor(rng.standard_normal(shape))


def primitive_cases(seed: int = 0) -> list[GradCase]:
    rng = np.random.default_rng(seed)
    out_rng = np.random.default_rng(seed + 1)

    def case(name, fn, *params):
        # fixed weighting drawn once, so every evaluation sees the same reduction
        weights = Tensor(out_rng.standard_normal(fn(list(params)).shape))
        return GradCase(name, lambda p: (fn(p) * weights).sum(), list(params))

    lstm_in = _t(rng, 2, 5, 3)
    lstm_w = [Tensor(0.5 * rng.standard_normal(s)) for s in ((16, 3), (16, 4), (16,))]
    bw = [Tensor(0.5 * rng.standard_normal(p.shape)) for p in lstm_w]
    T_frames, n_fft, hop, L = 6, 16, 4, 20
    return [
        case("add", lambda p: p[0] + p[1], _t(rng, 3, 4), _t(rng, 4)),
        case("sub", lambda p: p[0] - p[1], _t(rng, 3, 1), _t(rng, 3, 4)),
        case("mul", lambda p: p[0] * p[1], _t(rng, 2, 3, 4), _t(rng, 3, 1)),
        case("div", lambda p: p[0] / p[1], _t(rng, 3, 4), _t(rng, 4, low=0.5)),
        case("neg", lambda p: -p[0], _t(rng, 3, 4)),
        case("sigmoid", lambda p: ad.sigmoid(p[0]), _t(rng, 3, 4)),
        case("tanh", lambda p: ad.tanh(p[0]), _t(rng, 3, 4)),
        case("log", lambda p: ad.log(p[0]), _t(rng, 3, 4, low=0.5)),
        case("matmul", lambda p: p[0] @ p[1], _t(rng, 2, 3, 4), _t(rng, 4, 5)),
        case("sum", lambda p: p[0].sum(axis=1, keepdims=True), _t(rng, 3, 4, 2)),
        case("mean", lambda p: p[0].mean(axis=-1), _t(rng, 3, 4, 2)),
        case("reshape", lambda p: p[0].reshape(4, 6), _t(rng, 2, 3, 4)),
        case("permute", lambda p: p[0].permute(2, 0, 1), _t(rng, 2, 3, 4)),
        case("slice", lambda p: p[0][:, 1:3], _t(rng, 2, 4, 3)),
        case("concat", lambda p: ad.concat([p[0], p[1]], axis=1), _t(rng, 2, 3), _t(rng, 2, 2)),
        case("layer_norm", lambda p: ad.layer_norm(p[0], p[1], p[2]), _t(rng, 2, 3, 5), _t(rng, 5), _t(rng, 5)),
        case("conv2d", lambda p: ad.conv2d(p[0], p[1], p[2]), _t(rng, 1, 2, 5, 4), _t(rng, 3, 2, 3, 3), _t(rng, 3)),
        case("conv_transpose2d", lambda p: ad.conv_transpose2d(p[0], p[1], p[2]),
             _t(rng, 1, 3, 5, 4), _t(rng, 3, 2, 3, 3), _t(rng, 2)),
        case("lstm", lambda p: ad.lstm(p[0], p[1], p[2], p[3]), lstm_in, *lstm_w),
        case("lstm_reverse", lambda p: ad.lstm(p[0], p[1], p[2], p[3], reverse=True), lstm_in, *lstm_w),
        case("blstm", lambda p: ad.blstm(p[0], p[1:4], p[4:7]), lstm_in, *lstm_w, *bw),
        case("istft", lambda p: istft_tensor(p[0], p[1], n_fft, hop, L),
             _t(rng, 2, T_frames, n_fft // 2 + 1), _t(rng, 2, T_frames, n_fft // 2 + 1)),
    ]


def lstm_cell_case(seed: int = 0) -> GradCase:
    rng = np.random.default_rng(seed)
    D, H = 3, 4
    params = [_t(rng, 2, D), _t(rng, 2, H), _t(rng, 2, H), _t(rng, 4 * H, D), _t(rng, 4 * H, H), _t(rng, 4 * H)]
    wh, wc = rng.standard_normal((2, H)), rng.standard_normal((2, H))

    def fn(p):
        h, c = lstm_cell(p[0], p[1], p[2], LstmCellParams(p[3], p[4], p[5]))
        return (h * Tensor(wh)).sum() + (c * Tensor(wc)).sum()

    return GradCase("lstm_cell", fn, params)


TINY_CHECK = FtrnnConfig(sample_rate=8000, n_fft=16, hop=8, D=4, N=1, H_full=3, H_sub=3, C=2)


def _randomized(cfg: FtrnnConfig, seed: int):
    # non-trivial norm parameters so every path carries gradient
    model = init_model(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 7)
    params = {k: Tensor(v.data + 0.1 * rng.standard_normal(v.shape)) for k, v in model.params.items()}
    return model.with_params(params)


def block_case(seed: int = 0) -> GradCase:
    model = _randomized(TINY_CHECK, seed)
    rng = np.random.default_rng(seed)
    names = [k for k in model.params if k.startswith("blocks.0.")]
    z = Tensor(rng.standard_normal((1, 3, 5, TINY_CHECK.D)))
    weights = Tensor(rng.standard_normal(z.shape))

    def fn(p):
        m = model.with_params({**model.params, **dict(zip(names, p[1:]))})
        return (subband_block(m, 0, fullband_block(m, 0, p[0])) * weights).sum()

    return GradCase("block", fn, [z, *(model.params[k] for k in names)])


def model_case(seed: int = 0, cfg: FtrnnConfig = TINY_CHECK, length: int = 101, max_entries: int | None = None) -> GradCase:
    """Whole separator followed by the PIT SI-SDR loss."""
    model = _randomized(cfg, seed)
    rng = np.random.default_rng(seed)
    mix = rng.standard_normal((1, length))
    refs = rng.standard_normal((1, cfg.C, length))
    names = list(model.params)

    def fn(p):
        est = forward_batch(model.with_params(dict(zip(names, p))), mix)
        return pit_loss_tensor(refs, est)[0]

    return GradCase("full_model", fn, [model.params[k] for k in names], MODEL_TOL, max_entries)


def all_cases(seed: int = 0) -> list[GradCase]:
    return [*primitive_cases(seed), lstm_cell_case(seed), block_case(seed), model_case(seed)]


@dataclass
class GradResult:
    name: str
    max_rel_error: float
    tol: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tol


def run(cases: list[GradCase] | None = None, eps: float = 1e-5) -> list[GradResult]:
    results = []
    for c in cases or all_cases():
        t0 = time.perf_counter()
        err = ad.finite_diff_check(c.fn, c.params, eps=eps, max_entries=c.max_entries)
        results.append(GradResult(c.name, err, c.tol, time.perf_counter() - t0))
    return results
