"""Reverse-mode automatic differentiation over dense numpy arrays.

The engine is deliberately small: a :class:`Tape` records every primitive
application (output id, input ids, a backward closure), and
:func:`backward` replays the records in reverse, accumulating gradients
additively at fan-out points.  Only the primitives the scoring models and
the recurrent encoder need are provided.

Two numeric widths are supported through the tape dtype: float64 for
gradient checks and unit tests, float32 for training runs.  Complex
quantities are carried as (re, im) pairs of real arrays, see
:class:`ComplexPair`.

Nodes without a tape (constants, or leaves of a finished computation) are
cheap value wrappers; running the same graph-building code with constant
inputs gives a plain forward evaluation with no recording overhead beyond
node allocation.
"""

from __future__ import annotations

import math
from collections import namedtuple
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when primitive inputs have incompatible shapes."""


ComplexPair = namedtuple("ComplexPair", ["re", "im"])


class Node:
    """A value in the computation graph.

    ``tape`` is None for constants; ``uid`` is None unless the node was
    created on a tape.
    """

    __slots__ = ("value", "tape", "uid")

    def __init__(self, value, tape=None, uid=None):
        self.value = value
        self.tape = tape
        self.uid = uid

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, on_tape={self.tape is not None})"

    # sugar so model code reads like the equations it implements
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._records = []          # (out_uid, in_uids, backward_fn)
        self._next_uid = 0
        self._leaves = {}           # uid -> leaf Node

    def _new_uid(self):
        uid = self._next_uid
        self._next_uid += 1
        return uid

    def leaf(self, value) -> Node:
        """Register a trainable leaf. The array is cast to the tape dtype."""
        arr = np.asarray(value, dtype=self.dtype)
        node = Node(arr, self, self._new_uid())
        self._leaves[node.uid] = node
        return node

    def _emit(self, value, in_uids, backward_fn) -> Node:
        node = Node(value, self, self._new_uid())
        self._records.append((node.uid, in_uids, backward_fn))
        return node

    @property
    def num_records(self):
        return len(self._records)


def constant(value, dtype=None) -> Node:
    """Wrap an array as an off-tape node (no gradient will flow to it)."""
    return Node(np.asarray(value, dtype=dtype))


def _find_tape(*nodes):
    tape = None
    for n in nodes:
        if isinstance(n, Node) and n.tape is not None:
            if tape is None:
                tape = n.tape
            elif tape is not n.tape:
                raise ValueError("inputs live on different tapes")
    return tape


def _lift(x, tape, ref_dtype=None):
    if isinstance(x, Node):
        return x
    dtype = tape.dtype if tape is not None else ref_dtype
    return Node(np.asarray(x, dtype=dtype))


def _apply(tape, value, inputs, grad_fns):
    """Emit a record for ``inputs`` -> ``value``.

    ``grad_fns`` is a list aligned with ``inputs``; each entry maps the
    output gradient to that input's gradient.  Entries for off-tape
    inputs are skipped at backward time.
    """
    if tape is None:
        return Node(value)
    in_uids = tuple(n.uid if n.tape is not None else None for n in inputs)

    def backward_fn(grad_out):
        return [fn(grad_out) if uid is not None else None
                for uid, fn in zip(in_uids, grad_fns)]

    return tape._emit(value, in_uids, backward_fn)


def backward(tape: Tape, loss: Node) -> dict:
    """Walk the tape in reverse from ``loss``.

    Returns a map uid -> gradient array covering every leaf registered on
    the tape; leaves the loss does not depend on get zero arrays.
    """
    if loss.tape is not tape:
        raise ValueError("loss node does not belong to this tape")
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    grads = {loss.uid: np.ones_like(loss.value)}
    for out_uid, in_uids, backward_fn in reversed(tape._records):
        g = grads.pop(out_uid, None)
        if g is None:
            continue
        for uid, gi in zip(in_uids, backward_fn(g)):
            if uid is None or gi is None:
                continue
            acc = grads.get(uid)
            # never accumulate in place: backward fns may return views
            # into a buffer shared with another pending gradient
            grads[uid] = gi if acc is None else acc + gi
    out = {}
    for uid, leaf in tape._leaves.items():
        g = grads.get(uid)
        out[uid] = g if g is not None else np.zeros_like(leaf.value)
    return out


def _unbroadcast(grad, shape):
    # reduce a broadcasted gradient back to the operand's shape
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives


def _ref_dtype(a, b):
    # scalar constants adopt the sibling's dtype so float32 graphs stay float32
    if isinstance(a, Node):
        return a.value.dtype
    if isinstance(b, Node):
        return b.value.dtype
    return None


def add(a, b) -> Node:
    tape = _find_tape(a, b)
    ref = _ref_dtype(a, b)
    a, b = _lift(a, tape, ref), _lift(b, tape, ref)
    value = a.value + b.value
    return _apply(tape, value, (a, b), [
        lambda g, s=a.value.shape: _unbroadcast(g, s),
        lambda g, s=b.value.shape: _unbroadcast(g, s),
    ])


def mul(a, b) -> Node:
    tape = _find_tape(a, b)
    ref = _ref_dtype(a, b)
    a, b = _lift(a, tape, ref), _lift(b, tape, ref)
    value = a.value * b.value
    av, bv = a.value, b.value
    return _apply(tape, value, (a, b), [
        lambda g: _unbroadcast(g * bv, av.shape),
        lambda g: _unbroadcast(g * av, bv.shape),
    ])


def tanh(x) -> Node:
    tape = _find_tape(x)
    x = _lift(x, tape)
    value = np.tanh(x.value)
    return _apply(tape, value, (x,), [lambda g: g * (1.0 - value * value)])


def sigmoid(x) -> Node:
    tape = _find_tape(x)
    x = _lift(x, tape)
    xv = x.value
    # split by sign so exp never overflows
    value = np.where(xv >= 0, 1.0 / (1.0 + np.exp(-np.abs(xv))),
                     np.exp(-np.abs(xv)) / (1.0 + np.exp(-np.abs(xv))))
    value = value.astype(xv.dtype, copy=False)
    return _apply(tape, value, (x,), [lambda g: g * value * (1.0 - value)])


def relu(x) -> Node:
    tape = _find_tape(x)
    x = _lift(x, tape)
    value = np.maximum(x.value, 0)
    mask = x.value > 0
    return _apply(tape, value, (x,), [lambda g: g * mask])


def powc(x, exponent: float) -> Node:
    """Elementwise x**c for a constant exponent (x >= 0 when c is fractional)."""
    tape = _find_tape(x)
    x = _lift(x, tape)
    value = np.power(x.value, exponent)
    xv = x.value
    return _apply(tape, value, (x,), [
        lambda g: g * exponent * np.power(xv, exponent - 1.0)
    ])


# ---------------------------------------------------------------------------
# structural primitives


def reshape(x, shape) -> Node:
    tape = _find_tape(x)
    x = _lift(x, tape)
    old = x.value.shape
    try:
        value = x.value.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape {old} -> {shape}: {e}") from None
    return _apply(tape, value, (x,), [lambda g: g.reshape(old)])


def concat(xs, axis=0) -> Node:
    tape = _find_tape(*xs)
    xs = [_lift(x, tape) for x in xs]
    value = np.concatenate([x.value for x in xs], axis=axis)
    sizes = [x.value.shape[axis] for x in xs]
    offsets = np.cumsum([0] + sizes)

    def make_slice(i):
        def fn(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]
        return fn

    return _apply(tape, value, tuple(xs), [make_slice(i) for i in range(len(xs))])


def reduce_sum(x, axis=None, keepdims=False) -> Node:
    tape = _find_tape(x)
    x = _lift(x, tape)
    value = x.value.sum(axis=axis, keepdims=keepdims)
    shape = x.value.shape

    def grad_fn(g):
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return np.broadcast_to(g, shape).copy()

    return _apply(tape, value, (x,), [grad_fn])


def gather(table, indices) -> Node:
    """Row lookup ``table[indices]`` with scatter-add backward."""
    tape = _find_tape(table)
    table = _lift(table, tape)
    idx = np.asarray(indices)
    value = table.value[idx]
    shape = table.value.shape

    def grad_fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return out

    return _apply(tape, value, (table,), [grad_fn])


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b, transpose_a=False, transpose_b=False) -> Node:
    """Matrix product of 2-d operands or stacked 3-d operands.

    Transpose flags apply to the last two axes.  3-d operands must share
    their leading (batch) dimension.
    """
    tape = _find_tape(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    av = np.swapaxes(a.value, -1, -2) if transpose_a else a.value
    bv = np.swapaxes(b.value, -1, -2) if transpose_b else b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul needs 2-d or 3-d operands, got {a.shape} @ {b.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}"
                         f" (transpose_a={transpose_a}, transpose_b={transpose_b})")
    if av.ndim == 3 and bv.ndim == 3 and av.shape[0] != bv.shape[0]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    value = av @ bv

    def grad_a(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if transpose_a:
            ga = np.swapaxes(ga, -1, -2)
        if ga.ndim > a.value.ndim:         # 2-d operand against 3-d one
            ga = ga.sum(axis=0)
        return ga

    def grad_b(g):
        gb = np.swapaxes(av, -1, -2) @ g
        if transpose_b:
            gb = np.swapaxes(gb, -1, -2)
        if gb.ndim > b.value.ndim:
            gb = gb.sum(axis=0)
        return gb

    return _apply(tape, value, (a, b), [grad_a, grad_b])


def conv2d(x, kernel) -> Node:
    """2-d cross-correlation, stride 1, no padding.

    x: [B, C, H, W], kernel: [O, C, kh, kw] -> [B, O, H-kh+1, W-kw+1].
    """
    tape = _find_tape(x, kernel)
    x, kernel = _lift(x, tape), _lift(kernel, tape)
    xv, kv = x.value, kernel.value
    if xv.ndim != 4 or kv.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {xv.shape}, {kv.shape}")
    if xv.shape[1] != kv.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {xv.shape}, kernel {kv.shape}")
    kh, kw = kv.shape[2], kv.shape[3]
    if xv.shape[2] < kh or xv.shape[3] < kw:
        raise ShapeError(f"conv2d kernel {kv.shape} larger than input {xv.shape}")
    windows = np.lib.stride_tricks.sliding_window_view(xv, (kh, kw), axis=(2, 3))
    value = np.einsum("bchwij,ocij->bohw", windows, kv, optimize=True)
    value = np.ascontiguousarray(value)

    def grad_x(g):
        pad = ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1))
        gp = np.pad(g, pad)
        gwin = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(2, 3))
        kflip = kv[:, :, ::-1, ::-1]
        return np.einsum("bohwij,ocij->bchw", gwin, kflip, optimize=True)

    def grad_k(g):
        return np.einsum("bohw,bchwij->ocij", g, windows, optimize=True)

    return _apply(tape, value, (x, kernel), [grad_x, grad_k])


# ---------------------------------------------------------------------------
# normalisation and regularisation


@dataclass
class BatchNormState:
    """Running statistics for one batchnorm site (not trainable)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, num_features, dtype=np.float32):
        return cls(np.zeros(num_features, dtype=dtype),
                   np.ones(num_features, dtype=dtype))

    def copy(self):
        return BatchNormState(self.running_mean.copy(), self.running_var.copy(),
                              self.momentum, self.eps)


def batchnorm(x, gamma, beta, state: BatchNormState, training: bool) -> Node:
    """Normalise over all axes except axis 1 (features / channels).

    Training mode uses batch statistics and updates the running ones in
    place; inference mode applies the running statistics as a fixed
    affine map.
    """
    tape = _find_tape(x, gamma, beta)
    x, gamma, beta = _lift(x, tape), _lift(gamma, tape), _lift(beta, tape)
    xv = x.value
    if xv.ndim < 2:
        raise ShapeError(f"batchnorm expects at least 2-d input, got {xv.shape}")
    c = xv.shape[1]
    if gamma.value.shape != (c,) or beta.value.shape != (c,):
        raise ShapeError(f"batchnorm scale/shift must have shape ({c},), got "
                         f"{gamma.value.shape} / {beta.value.shape}")
    axes = tuple(i for i in range(xv.ndim) if i != 1)
    bshape = tuple(c if i == 1 else 1 for i in range(xv.ndim))
    n = xv.size // c

    if training:
        mean = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        m = state.momentum
        state.running_mean *= (1.0 - m)
        state.running_mean += m * mean.astype(state.running_mean.dtype)
        state.running_var *= (1.0 - m)
        state.running_var += m * var.astype(state.running_var.dtype)
    else:
        mean = state.running_mean.astype(xv.dtype)
        var = state.running_var.astype(xv.dtype)

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (xv - mean.reshape(bshape)) * inv_std.reshape(bshape)
    value = gamma.value.reshape(bshape) * xhat + beta.value.reshape(bshape)
    gv = gamma.value

    if training:
        def grad_x(g):
            gxh = g * gv.reshape(bshape)
            mean_g = gxh.mean(axis=axes).reshape(bshape)
            mean_gx = (gxh * xhat).mean(axis=axes).reshape(bshape)
            return inv_std.reshape(bshape) * (gxh - mean_g - xhat * mean_gx)
    else:
        def grad_x(g):
            return g * (gv * inv_std).reshape(bshape)

    return _apply(tape, value, (x, gamma, beta), [
        grad_x,
        lambda g: (g * xhat).sum(axis=axes),
        lambda g: g.sum(axis=axes),
    ])


def dropout(x, rate: float, rng, training: bool) -> Node:
    """Inverted dropout: zero with probability ``rate`` and scale the
    survivors by 1/(1-rate) so the expectation is preserved.  Identity in
    inference mode or at rate 0."""
    if not training or rate == 0.0:
        return x if isinstance(x, Node) else constant(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    tape = _find_tape(x)
    x = _lift(x, tape)
    keep = (rng.random(x.value.shape) >= rate)
    mask = keep.astype(x.value.dtype) / (1.0 - rate)
    value = x.value * mask
    return _apply(tape, value, (x,), [lambda g: g * mask])


def softmax_cross_entropy(logits, gold) -> Node:
    """Per-row cross-entropy between softmax(logits) and one-hot gold.

    logits: [B, N], gold: int array [B] of column indices -> losses [B].
    """
    tape = _find_tape(logits)
    logits = _lift(logits, tape)
    lv = logits.value
    if lv.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [B, N] logits, got {lv.shape}")
    gold = np.asarray(gold)
    if gold.shape != (lv.shape[0],):
        raise ShapeError(f"gold indices must have shape ({lv.shape[0]},), got {gold.shape}")
    shifted = lv - lv.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    sum_exp = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(sum_exp)
    rows = np.arange(lv.shape[0])
    value = -log_probs[rows, gold]
    softmax = exp / sum_exp

    def grad_fn(g):
        out = softmax * g[:, None]
        out[rows, gold] -= g
        return out

    return _apply(tape, value, (logits,), [grad_fn])


# ---------------------------------------------------------------------------
# complex arithmetic on (re, im) pairs


def complex_mul(a: ComplexPair, b: ComplexPair) -> ComplexPair:
    """(ar + i*ai)(br + i*bi), elementwise with broadcasting."""
    re = add(mul(a.re, b.re), mul(mul(a.im, b.im), -1.0))
    im = add(mul(a.re, b.im), mul(a.im, b.re))
    return ComplexPair(re, im)


def complex_div(a: ComplexPair, b: ComplexPair, eps: float = 1e-6) -> ComplexPair:
    """a / b elementwise.  Denominators with modulus below ``eps`` are
    scaled up to modulus ``eps`` (phase preserved; exact zeros become
    eps + 0i) before dividing, so the result stays finite.  Gradients flow
    through the guarded denominator (the rescaling is not differentiated).
    """
    tape = _find_tape(a.re, a.im, b.re, b.im)
    ar, ai = _lift(a.re, tape), _lift(a.im, tape)
    br, bi = _lift(b.re, tape), _lift(b.im, tape)
    arv, aiv, brv, biv = (np.broadcast_arrays(ar.value, ai.value, br.value, bi.value))
    modulus = np.sqrt(brv * brv + biv * biv)
    small = modulus < eps
    if small.any():
        scale = np.ones_like(modulus)
        nonzero = small & (modulus > 0)
        scale[nonzero] = eps / modulus[nonzero]
        brv = brv * scale
        biv = biv * scale
        zero = small & (modulus == 0)
        if zero.any():
            brv = np.where(zero, eps, brv)
            biv = np.where(zero, 0.0, biv)
    d = brv * brv + biv * biv
    re_v = (arv * brv + aiv * biv) / d
    im_v = (aiv * brv - arv * biv) / d

    re = _apply(tape, re_v, (ar, ai, br, bi), [
        lambda g: _unbroadcast(g * brv / d, ar.value.shape),
        lambda g: _unbroadcast(g * biv / d, ai.value.shape),
        lambda g: _unbroadcast(g * (arv / d - 2.0 * brv * re_v / d), br.value.shape),
        lambda g: _unbroadcast(g * (aiv / d - 2.0 * biv * re_v / d), bi.value.shape),
    ])
    im = _apply(tape, im_v, (ar, ai, br, bi), [
        lambda g: _unbroadcast(g * (-biv) / d, ar.value.shape),
        lambda g: _unbroadcast(g * brv / d, ai.value.shape),
        lambda g: _unbroadcast(g * (aiv / d - 2.0 * brv * im_v / d), br.value.shape),
        lambda g: _unbroadcast(g * (-arv / d - 2.0 * biv * im_v / d), bi.value.shape),
    ])
    return ComplexPair(re, im)


# ---------------------------------------------------------------------------
# recurrent cell


@dataclass
class GruParams:
    """One gated recurrent cell.  w_* act on the input, u_* on the state."""

    w_z: Node
    w_r: Node
    w_h: Node
    u_z: Node
    u_r: Node
    u_h: Node
    b_z: Node
    b_r: Node
    b_h: Node


def gru_cell(x, h_prev, p: GruParams) -> Node:
    """One update of the gated recurrent cell.

        z = sigmoid(x W_z + h U_z + b_z)
        r = sigmoid(x W_r + h U_r + b_r)
        hc = tanh(x W_h + (r * h) U_h + b_h)
        h' = (1 - z) * h + z * hc

    x: [B, d_in], h_prev: [B, d] -> [B, d].
    """
    z = sigmoid(add(add(matmul(x, p.w_z), matmul(h_prev, p.u_z)), p.b_z))
    r = sigmoid(add(add(matmul(x, p.w_r), matmul(h_prev, p.u_r)), p.b_r))
    hc = tanh(add(add(matmul(x, p.w_h), matmul(mul(r, h_prev), p.u_h)), p.b_h))
    one_minus_z = add(1.0, mul(z, -1.0))
    return add(mul(one_minus_z, h_prev), mul(z, hc))


# ---------------------------------------------------------------------------
# numeric gradient check


def finite_difference(fn, arrays, index, h=1e-5):
    """Central-difference gradient of scalar ``fn(arrays)`` wrt arrays[index]."""
    base = [a.copy() for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    while not it.finished:
        ix = it.multi_index
        orig = target[ix]
        target[ix] = orig + h
        fp = fn(base)
        target[ix] = orig - h
        fm = fn(base)
        target[ix] = orig
        grad[ix] = (fp - fm) / (2.0 * h)
        it.iternext()
    return grad


def check_gradients(build, arrays, h=1e-5, rtol=1e-4):
    """Compare tape gradients of ``build`` against central differences.

    ``build(nodes) -> scalar Node`` constructs the computation from leaf
    nodes created for ``arrays`` (float64).  Returns the largest relative
    error seen; raises AssertionError beyond ``rtol``.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tape = Tape(dtype=np.float64)
    nodes = [tape.leaf(a) for a in arrays]
    loss = build(nodes)
    grads = backward(tape, loss)

    def value_fn(arrs):
        t = Tape(dtype=np.float64)
        ns = [t.leaf(a) for a in arrs]
        return float(build(ns).value.sum())

    worst = 0.0
    for i, node in enumerate(nodes):
        numeric = finite_difference(value_fn, arrays, i, h=h)
        analytic = grads[node.uid]
        if analytic.size == 0:
            continue
        # relative error at tensor level: elementwise ratios blow up on
        # near-zero components where the finite-difference noise dominates
        scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-3)
        err = float(np.abs(analytic - numeric).max() / scale)
        worst = max(worst, err)
        if err > rtol:
            raise AssertionError(
                f"gradient mismatch on input {i}: relative error {err:.3e} > {rtol:.1e}")
    return worst
