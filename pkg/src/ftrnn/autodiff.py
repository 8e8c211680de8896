"""Dense tensors with define-by-run reverse-mode differentiation.

Only the primitives the separator needs are provided.  Every primitive is a
pair of numpy kernels (forward, backward) kept in a registry; ``apply_primitive``
runs the forward kernel and, when a :class:`Tape` is active and any input
requires a gradient, records a node so :func:`backward` can replay it.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> backward(tape, loss)[x.id]
    array([2., 4., 6.])
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LN_EPS = 1e-5
_SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_ids = itertools.count()


class ShapeError(ValueError):
    """Input shapes do not satisfy a primitive's shape rule."""


class UnknownPrimitiveError(KeyError):
    pass


class Tensor:
    """Immutable n-d array with an identity used to key gradients."""

    __slots__ = ("data", "requires_grad", "id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype not in _SUPPORTED_DTYPES:
            arr = arr.astype(np.float64)
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"all dimensions must be >= 1, got {arr.shape}")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # output of a kernel: no copy, dims may legitimately be validated already
        t = cls.__new__(cls)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        t.id = next(_ids)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return apply_primitive("add", [self, other])

    def __radd__(self, other):
        return apply_primitive("add", [other, self])

    def __sub__(self, other):
        return apply_primitive("sub", [self, other])

    def __rsub__(self, other):
        return apply_primitive("sub", [other, self])

    def __mul__(self, other):
        return apply_primitive("mul", [self, other])

    def __rmul__(self, other):
        return apply_primitive("mul", [other, self])

    def __truediv__(self, other):
        return apply_primitive("div", [self, other])

    def __rtruediv__(self, other):
        return apply_primitive("div", [other, self])

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, other])

    def __neg__(self):
        return apply_primitive("neg", [self])

    def __getitem__(self, key):
        return apply_primitive("slice", [self], {"key": key})

    def sum(self, axis=None, keepdims: bool = False):
        return apply_primitive("sum", [self], {"axis": axis, "keepdims": keepdims})

    def mean(self, axis=None, keepdims: bool = False):
        return apply_primitive("mean", [self], {"axis": axis, "keepdims": keepdims})

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", [self], {"shape": shape})

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return apply_primitive("permute", [self], {"axes": axes})


class Node(NamedTuple):
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: object
    attrs: dict


@dataclass
class Tape:
    """Ordered record of primitive applications; use as a context manager."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)


_tape_stack: list[Tape] = []


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


@dataclass(frozen=True)
class Primitive:
    # forward(arrays, **attrs) -> (out, saved)
    # backward(grad_out, saved, arrays, **attrs) -> sequence of grads (None = no grad)
    forward: Callable
    backward: Callable


PRIMITIVES: dict[str, Primitive] = {}


def register_primitive(name: str, forward: Callable, backward: Callable) -> None:
    PRIMITIVES[name] = Primitive(forward, backward)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def apply_primitive(kind: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Run primitive ``kind`` on ``inputs`` and record it on the active tape."""
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise UnknownPrimitiveError(f"unknown primitive {kind!r}") from None
    attrs = attrs or {}
    dtype = next((x.dtype for x in inputs if isinstance(x, Tensor)), np.dtype(np.float64))
    tensors = tuple(_as_tensor(x, dtype) for x in inputs)
    if any(t.dtype != dtype for t in tensors):
        raise TypeError(f"{kind}: mixed dtypes {[str(t.dtype) for t in tensors]}")
    arrays = [t.data for t in tensors]
    out, saved = prim.forward(arrays, **attrs)
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in tensors)
    out = Tensor._wrap(np.asarray(out, dtype=dtype), needs_grad)
    if needs_grad:
        tape.nodes.append(Node(kind, tensors, out, saved, attrs))
    return out


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] = ()) -> dict[int, np.ndarray]:
    """Gradients of scalar ``loss`` for every leaf on ``tape`` (and ``wrt``).

    Leaves listed in ``wrt`` that the loss does not depend on get zeros.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    produced = {node.output.id for node in tape.nodes}
    if loss.id not in produced:
        raise ValueError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape, dtype=loss.dtype)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output.id, None)
        if g is None:
            continue
        prim = PRIMITIVES[node.kind]
        arrays = [t.data for t in node.inputs]
        in_grads = prim.backward(g, node.saved, arrays, **node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.id not in produced:
                leaves[t.id] = t
            if t.id in grads:
                grads[t.id] = grads[t.id] + gi
            else:
                grads[t.id] = gi
    out = {tid: grads.get(tid, np.zeros(t.shape, dtype=t.dtype)) for tid, t in leaves.items()}
    for t in wrt:
        if t.id not in out:
            out[t.id] = np.zeros(t.shape, dtype=t.dtype)
    return out


def finite_diff_check(
    f: Callable[[list[Tensor]], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a list of tensors to a scalar tensor.  With ``max_entries`` set,
    only that many randomly chosen entries per parameter are probed.
    """
    params = [Tensor(p.data, requires_grad=True) for p in params]
    with Tape() as tape:
        loss = f(params)
    if loss.size != 1:
        raise ShapeError(f"f must return a scalar, got shape {loss.shape}")
    grads = backward(tape, loss, wrt=params) if tape.nodes else {p.id: np.zeros(p.shape) for p in params}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, p in enumerate(params):
        analytic = grads[p.id].reshape(-1)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for j in idx:
            vals = []
            for sign in (1.0, -1.0):
                bumped = flat.copy()
                bumped[j] += sign * eps
                trial = list(params)
                trial[k] = Tensor(bumped.reshape(p.shape))
                vals.append(float(f(trial).data.reshape(-1)[0]))
            numeric = (vals[0] - vals[1]) / (2 * eps)
            a = float(analytic[j])
            if not (np.isfinite(numeric) and np.isfinite(a)):
                raise FloatingPointError(
                    f"non-finite gradient at param {k} entry {j}: analytic={a}, numeric={numeric}"
                )
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise ------------------------------------------------------------

def _add_fwd(x, **_):
    _broadcast_shape("add", *x)
    return x[0] + x[1], None


def _add_bwd(g, _, x, **__):
    return _unbroadcast(g, x[0].shape), _unbroadcast(g, x[1].shape)


def _sub_fwd(x, **_):
    _broadcast_shape("sub", *x)
    return x[0] - x[1], None


def _sub_bwd(g, _, x, **__):
    return _unbroadcast(g, x[0].shape), _unbroadcast(-g, x[1].shape)


def _mul_fwd(x, **_):
    _broadcast_shape("mul", *x)
    return x[0] * x[1], None


def _mul_bwd(g, _, x, **__):
    return _unbroadcast(g * x[1], x[0].shape), _unbroadcast(g * x[0], x[1].shape)


def _div_fwd(x, **_):
    _broadcast_shape("div", *x)
    return x[0] / x[1], None


def _div_bwd(g, _, x, **__):
    a, b = x
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


register_primitive("add", _add_fwd, _add_bwd)
register_primitive("sub", _sub_fwd, _sub_bwd)
register_primitive("mul", _mul_fwd, _mul_bwd)
register_primitive("div", _div_fwd, _div_bwd)
register_primitive("neg", lambda x, **_: (-x[0], None), lambda g, s, x, **_: (-g,))


def _sigmoid_fwd(x, **_):
    y = 0.5 * np.tanh(0.5 * x[0]) + 0.5
    return y, y


def _tanh_fwd(x, **_):
    y = np.tanh(x[0])
    return y, y


def _log_fwd(x, **_):
    if np.any(x[0] <= 0):
        raise ValueError("log: non-positive input")
    return np.log(x[0]), None


register_primitive("sigmoid", _sigmoid_fwd, lambda g, y, x, **_: (g * y * (1 - y),))
register_primitive("tanh", _tanh_fwd, lambda g, y, x, **_: (g * (1 - y * y),))
register_primitive("log", _log_fwd, lambda g, s, x, **_: (g / x[0],))


# -- linear algebra -----------------------------------------------------------

def _matmul_fwd(x, **_):
    a, b = x
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch dims {a.shape} and {b.shape}") from None
    return a @ b, None


def _matmul_bwd(g, _, x, **__):
    a, b = x
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


register_primitive("matmul", _matmul_fwd, _matmul_bwd)


# -- reductions and shape ops -------------------------------------------------

def _sum_fwd(x, axis=None, keepdims=False):
    return np.sum(x[0], axis=axis, keepdims=keepdims), None


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        g = np.expand_dims(g, tuple(a % len(shape) for a in axes))
    return np.broadcast_to(g, shape)


def _sum_bwd(g, _, x, axis=None, keepdims=False):
    return (np.array(_expand_reduced(g, x[0].shape, axis, keepdims)),)


def _mean_fwd(x, axis=None, keepdims=False):
    return np.mean(x[0], axis=axis, keepdims=keepdims), None


def _mean_bwd(g, _, x, axis=None, keepdims=False):
    shape = x[0].shape
    n = x[0].size if axis is None else np.prod(
        [shape[a] for a in ((axis,) if isinstance(axis, int) else axis)]
    )
    return (np.array(_expand_reduced(g, shape, axis, keepdims)) / n,)


def _reshape_fwd(x, shape):
    try:
        return x[0].reshape(shape), None
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x[0].shape} as {shape}") from None


def _permute_fwd(x, axes):
    if sorted(a % x[0].ndim for a in axes) != list(range(x[0].ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {x[0].shape}")
    return np.transpose(x[0], axes), None


def _permute_bwd(g, _, x, axes):
    return (np.transpose(g, np.argsort([a % x[0].ndim for a in axes])),)


def _slice_fwd(x, key):
    keys = key if isinstance(key, tuple) else (key,)
    if not all(isinstance(k, (slice, int, type(Ellipsis))) for k in keys):
        raise TypeError("slice: only basic indexing is supported")
    out = x[0][key]
    if out.size == 0:
        raise ShapeError(f"slice: {key} selects nothing from {x[0].shape}")
    return np.array(out), None


def _slice_bwd(g, _, x, key):
    full = np.zeros_like(x[0])
    full[key] = g
    return (full,)


def _concat_fwd(x, axis=-1):
    ref = x[0].shape
    ax = axis % len(ref)
    for a in x[1:]:
        if a.ndim != len(ref) or any(a.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {a.shape} differ off axis {axis}")
    return np.concatenate(x, axis=axis), [a.shape[ax] for a in x]


def _concat_bwd(g, sizes, x, axis=-1):
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


register_primitive("sum", _sum_fwd, _sum_bwd)
register_primitive("mean", _mean_fwd, _mean_bwd)
register_primitive("reshape", _reshape_fwd, lambda g, s, x, shape: (g.reshape(x[0].shape),))
register_primitive("permute", _permute_fwd, _permute_bwd)
register_primitive("slice", _slice_fwd, _slice_bwd)
register_primitive("concat", _concat_fwd, _concat_bwd)


# -- layer normalization ----------------------------------------------------------

def _layer_norm_fwd(x, eps=LN_EPS):
    a, gamma, beta = x
    n = a.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape}/beta {beta.shape} vs last axis of {a.shape}")
    if n < 2 and a.dtype == np.float32:
        raise ValueError("layer_norm: normalized axis of size < 2 is degenerate in single precision")
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd)


def _layer_norm_bwd(g, saved, x, eps=LN_EPS):
    xhat, rstd = saved
    gamma = x[1]
    red = tuple(range(g.ndim - 1))
    dgamma = (g * xhat).sum(axis=red)
    dbeta = g.sum(axis=red)
    dxhat = g * gamma
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


register_primitive("layer_norm", _layer_norm_fwd, _layer_norm_bwd)


# -- 2-D convolution (stride 1, zero padding) -------------------------------------

def _check_conv_attrs(stride, padding):
    if stride is None or padding is None:
        raise ValueError("conv: 'stride' and 'padding' attributes are required")
    if stride != 1:
        raise ValueError(f"conv: only stride 1 is supported, got {stride}")


def _corr2d(x, w, pad):
    """Cross-correlate x (B,Ci,H,W) with w (Co,Ci,kh,kw); returns (B,Co,H',W') and patches."""
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = sliding_window_view(xp, w.shape[2:], axis=(2, 3))
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cols


def _conv_core_bwd(g, cols, x, w, pad):
    kh, kw = w.shape[2:]
    gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
    wf = w[:, :, ::-1, ::-1]
    gx, _ = _corr2d(g, np.ascontiguousarray(wf.transpose(1, 0, 2, 3)), kh - 1 - pad)
    return gx, gw


def _conv2d_fwd(x, stride=None, padding=None):
    _check_conv_attrs(stride, padding)
    a, w, b = x
    if a.ndim != 4 or w.ndim != 4 or a.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: input {a.shape}, weight {w.shape}, bias {b.shape}")
    if a.shape[2] + 2 * padding < w.shape[2] or a.shape[3] + 2 * padding < w.shape[3]:
        raise ShapeError(f"conv2d: kernel {w.shape[2:]} larger than padded input {a.shape[2:]}")
    out, cols = _corr2d(a, w, padding)
    return out + b[None, :, None, None], cols


def _conv2d_bwd(g, cols, x, stride=None, padding=None):
    a, w, _ = x
    gx, gw = _conv_core_bwd(g, cols, a, w, padding)
    return gx, gw, g.sum(axis=(0, 2, 3))


def _deconv_as_conv(w):
    # transposed conv with weight (Ci,Co,kh,kw) == correlation with flipped, swapped kernel
    return np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))


def _conv_transpose2d_fwd(x, stride=None, padding=None):
    _check_conv_attrs(stride, padding)
    a, w, b = x
    if a.ndim != 4 or w.ndim != 4 or a.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"conv_transpose2d: input {a.shape}, weight {w.shape}, bias {b.shape}")
    k = w.shape[2]
    if w.shape[3] != k or padding > k - 1:
        raise ShapeError(f"conv_transpose2d: need square kernel and padding <= k-1, got {w.shape}, {padding}")
    out, cols = _corr2d(a, _deconv_as_conv(w), k - 1 - padding)
    return out + b[None, :, None, None], cols


def _conv_transpose2d_bwd(g, cols, x, stride=None, padding=None):
    a, w, _ = x
    k = w.shape[2]
    wc = _deconv_as_conv(w)
    gx, gwc = _conv_core_bwd(g, cols, a, wc, k - 1 - padding)
    gw = gwc.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
    return gx, np.ascontiguousarray(gw), g.sum(axis=(0, 2, 3))


register_primitive("conv2d", _conv2d_fwd, _conv2d_bwd)
register_primitive("conv_transpose2d", _conv_transpose2d_fwd, _conv_transpose2d_bwd)


# -- fused LSTM scans ------------------------------------------------------------------
# Gate order along the 4H axis: input i, forget f, cell g, output o.  Directions are
# stacked on a leading axis K and run in one time loop; arrays are time-major
# (K, S, B, .) with reverse directions pre-flipped so every scan runs forward.

def _scan_fwd(xg, UT):
    K, S, B, G = xg.shape
    H = G // 4
    acts = np.empty_like(xg)
    cs = np.empty((K, S, B, H), dtype=xg.dtype)
    tcs = np.empty_like(cs)
    hs = np.empty_like(cs)
    h = np.zeros((K, B, H), dtype=xg.dtype)
    c = np.zeros((K, B, H), dtype=xg.dtype)
    # every gate via one tanh: sigmoid(u) = 0.5 * tanh(u / 2) + 0.5
    half = np.full(4 * H, 0.5, dtype=xg.dtype)
    half[2 * H:3 * H] = 1.0
    shift = np.full(4 * H, 0.5, dtype=xg.dtype)
    shift[2 * H:3 * H] = 0.0
    xg = xg * half
    UT = UT * half
    for t in range(S):
        a = acts[:, t]
        np.matmul(h, UT, out=a)
        a += xg[:, t]
        np.tanh(a, out=a)
        a *= half
        a += shift
        c = a[..., H:2 * H] * c
        c += a[..., :H] * a[..., 2 * H:3 * H]
        cs[:, t] = c
        np.tanh(c, out=tcs[:, t])
        np.multiply(a[..., 3 * H:], tcs[:, t], out=hs[:, t])
        h = hs[:, t]
    return acts, cs, tcs, hs


def _scan_bwd(gh, saved, U):
    acts, cs, tcs, _ = saved
    K, S, B, H = cs.shape
    dz = np.empty_like(acts)
    dh_next = np.zeros((K, B, H), dtype=gh.dtype)
    dc_next = np.zeros((K, B, H), dtype=gh.dtype)
    zero = np.zeros((K, B, H), dtype=gh.dtype)
    for t in range(S - 1, -1, -1):
        a = acts[:, t]
        i, f, g, o = a[..., :H], a[..., H:2 * H], a[..., 2 * H:3 * H], a[..., 3 * H:]
        tc = tcs[:, t]
        dh = gh[:, t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        d = dz[:, t]
        d[..., :H] = dc * g * i * (1.0 - i)
        d[..., H:2 * H] = dc * (cs[:, t - 1] if t else zero) * f * (1.0 - f)
        d[..., 2 * H:3 * H] = dc * i * (1.0 - g * g)
        d[..., 3 * H:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = np.matmul(d, U)
    return dz


def _to_scan(seq, reverses):
    tm = seq.transpose(1, 0, 2)  # (S, B, D)
    return np.stack([tm[::-1] if r else tm for r in reverses])


def _from_scan(arr, reverses):
    return [(a[::-1] if r else a).transpose(1, 0, 2) for a, r in zip(arr, reverses)]


def _check_lstm(seq, W, U, b):
    if seq.ndim != 3:
        raise ShapeError(f"lstm: input must be (batch, steps, features), got {seq.shape}")
    H = U.shape[1]
    if W.shape != (4 * H, seq.shape[2]) or U.shape != (4 * H, H) or b.shape != (4 * H,):
        raise ShapeError(f"lstm: W {W.shape}, U {U.shape}, b {b.shape} for input {seq.shape}")


def _multi_lstm_fwd(seq, weights, reverses):
    for W, U, b in weights:
        _check_lstm(seq, W, U, b)
    xin = _to_scan(seq, reverses)
    Ws = np.stack([w[0] for w in weights])
    bs = np.stack([w[2] for w in weights])
    xg = np.matmul(xin, Ws.transpose(0, 2, 1)[:, None]) + bs[:, None, None, :]
    UT = np.ascontiguousarray(np.stack([w[1] for w in weights]).transpose(0, 2, 1))
    saved = _scan_fwd(xg, UT)
    return _from_scan(saved[3], reverses), (saved, xin)


def _multi_lstm_bwd(gouts, ctx, seq, weights, reverses):
    saved, xin = ctx
    hs = saved[3]
    K, S, B, H = hs.shape
    gh = _to_scan_each(gouts, reverses)
    Us = np.stack([w[1] for w in weights])
    dz = _scan_bwd(gh, saved, Us)
    h_prev = np.zeros_like(hs)
    h_prev[:, 1:] = hs[:, :-1]
    grads = []
    dx = np.zeros_like(seq)
    for k, (W, U, b) in enumerate(weights):
        flat = dz[k].reshape(-1, 4 * H)
        dW = flat.T @ xin[k].reshape(-1, xin.shape[-1])
        dU = flat.T @ h_prev[k].reshape(-1, H)
        dxk = (dz[k] @ W)
        dx += (dxk[::-1] if reverses[k] else dxk).transpose(1, 0, 2)
        grads.append((dW, dU, flat.sum(axis=0)))
    return dx, grads


def _to_scan_each(arrs, reverses):
    return np.stack([(a.transpose(1, 0, 2)[::-1] if r else a.transpose(1, 0, 2)) for a, r in zip(arrs, reverses)])


def _lstm_fwd(x, reverse=False):
    outs, ctx = _multi_lstm_fwd(x[0], [tuple(x[1:4])], [reverse])
    return np.ascontiguousarray(outs[0]), ctx


def _lstm_bwd(g, ctx, x, reverse=False):
    dx, ((dW, dU, db),) = _multi_lstm_bwd([g], ctx, x[0], [tuple(x[1:4])], [reverse])
    return dx, dW, dU, db


def _blstm_fwd(x):
    outs, ctx = _multi_lstm_fwd(x[0], [tuple(x[1:4]), tuple(x[4:7])], [False, True])
    return np.concatenate(outs, axis=-1), ctx


def _blstm_bwd(g, ctx, x):
    H = g.shape[-1] // 2
    dx, (gf, gb) = _multi_lstm_bwd([g[..., :H], g[..., H:]], ctx, x[0], [tuple(x[1:4]), tuple(x[4:7])], [False, True])
    return (dx, *gf, *gb)


register_primitive("lstm", _lstm_fwd, _lstm_bwd)
register_primitive("blstm", _blstm_fwd, _blstm_bwd)


# -- convenience wrappers ---------------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    return apply_primitive("sigmoid", [x])


def tanh(x: Tensor) -> Tensor:
    return apply_primitive("tanh", [x])


def log(x: Tensor) -> Tensor:
    return apply_primitive("log", [x])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", [a, b])


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    return apply_primitive("concat", list(xs), {"axis": axis})


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    return apply_primitive("layer_norm", [x, gamma, beta], {"eps": eps})


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    return apply_primitive("conv2d", [x, w, b], {"stride": stride, "padding": padding})


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    return apply_primitive("conv_transpose2d", [x, w, b], {"stride": stride, "padding": padding})


def lstm(x: Tensor, W: Tensor, U: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """Run an LSTM from zero state over axis 1 of ``x`` (batch, steps, features)."""
    return apply_primitive("lstm", [x, W, U, b], {"reverse": reverse})


def blstm(x: Tensor, fwd: Sequence[Tensor], bwd: Sequence[Tensor]) -> Tensor:
    """Bidirectional LSTM; (batch, steps, D) -> (batch, steps, 2H), forward half first."""
    return apply_primitive("blstm", [x, *fwd, *bwd])
