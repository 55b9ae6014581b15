"""Dense float32 tensors with tape-based reverse-mode automatic differentiation.

Values are stored row-major in numpy float32 arrays. Operations record onto
the innermost active :class:`Tape` whenever any input requires a gradient;
:func:`backward` walks the tape in reverse and returns gradients for every
leaf. Reductions and BLAS calls are deterministic for identical inputs, so
forward and backward passes are bit-reproducible across runs.

Masked softmax uses an additive sentinel bias of ``NEG_INF`` (-1e9) rather
than IEEE infinity so that arithmetic before the softmax stays finite.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float32
NEG_INF = DTYPE(-1e9)


class Tensor:
    """A dense n-dimensional float32 array, optionally tracked for gradients."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.all_masked_rows: Optional[np.ndarray] = None  # set by masked softmax

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def copy(self, requires_grad: bool = False) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=requires_grad)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class TapeNode:
    """One recorded operation: inputs, output, and the local gradient rule."""

    __slots__ = ("op", "inputs", "output", "backward_fn", "forward_fn")

    def __init__(self, op, inputs, output, backward_fn, forward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.forward_fn = forward_fn


class Tape:
    """Ordered record of operations; inputs of every node precede it.

    Use as a context manager::

        with Tape() as tape:
            loss = ...
        grads = backward(tape, loss)
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self

    @property
    def leaves(self) -> list[Tensor]:
        """Grad-requiring tensors that entered the tape without a producer."""
        return list(self._leaves.values())

    def replay(self) -> bool:
        """Re-run every node's forward rule; True iff all outputs match bit-exactly."""
        for node in self.nodes:
            fresh = node.forward_fn()
            if fresh.dtype != node.output.data.dtype or fresh.shape != node.output.data.shape:
                return False
            if not np.array_equal(fresh, node.output.data):
                return False
        return True


_TAPES: list[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def _record(op: str, inputs: Sequence[Tensor], out: Tensor,
            backward_fn: Callable, forward_fn: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        for t in inputs:
            if t.requires_grad and id(t) not in tape._produced:
                tape._leaves.setdefault(id(t), t)
        tape.nodes.append(TapeNode(op, tuple(inputs), out, backward_fn, forward_fn))
        tape._produced.add(id(out))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.astype(DTYPE, copy=False)


# ---------------------------------------------------------------------------
# elementwise and shape primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    def bwd(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)
    return _record("add", (a, b), out, bwd, lambda: a.data + b.data)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    def bwd(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)
    return _record("sub", (a, b), out, bwd, lambda: a.data - b.data)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return _record("mul", (a, b), out, bwd, lambda: a.data * b.data)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)
    def bwd(g):
        ga = g / b.data
        return (_unbroadcast(ga, a.shape) if a.requires_grad else None,
                _unbroadcast(-ga * out.data, b.shape) if b.requires_grad else None)
    return _record("div", (a, b), out, bwd, lambda: a.data / b.data)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record("neg", (a,), out, lambda g: (-g,), lambda: -a.data)


def texp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    return _record("exp", (a,), out, lambda g: (g * out.data,), lambda: np.exp(a.data))


def tlog(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return _record("log", (a,), out, lambda g: (g / a.data,), lambda: np.log(a.data))


def tpow(a: Tensor, p: float) -> Tensor:
    """Elementwise power with constant exponent; domain is the caller's problem."""
    out = Tensor(a.data ** DTYPE(p))
    def bwd(g):
        return (g * DTYPE(p) * a.data ** DTYPE(p - 1.0),)
    return _record("pow", (a,), out, bwd, lambda: a.data ** DTYPE(p))


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s)
    def bwd(g):
        return (g * out.data * (1.0 - out.data),)
    return _record("sigmoid", (a,), out, bwd,
                   lambda: (1.0 / (1.0 + np.exp(-a.data))).astype(DTYPE))


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(a.data * s)
    def bwd(g):
        sd = 1.0 / (1.0 + np.exp(-a.data))
        return ((g * (sd + a.data * sd * (1.0 - sd))).astype(DTYPE),)
    return _record("silu", (a,), out, bwd,
                   lambda: (a.data / (1.0 + np.exp(-a.data))).astype(DTYPE))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))
    def bwd(g):
        return (g.reshape(a.shape),)
    return _record("reshape", (a,), out, bwd, lambda: a.data.reshape(shape))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)
    return _record("permute", (a,), out, bwd,
                   lambda: np.ascontiguousarray(a.data.transpose(axes)))


def transpose_last2(a: Tensor) -> Tensor:
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return permute(a, axes)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))
    return _record("concat", tensors, out, bwd,
                   lambda: np.concatenate([t.data for t in tensors], axis=axis))


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(DTYPE),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(DTYPE),)
    return _record("sum", (a,), out, bwd,
                   lambda: a.data.sum(axis=axis, keepdims=keepdims))


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims, dtype=DTYPE))
    if axis is None:
        count = a.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in ax]))
    def bwd(g):
        if axis is None:
            gg = g
        elif not keepdims:
            gg = np.expand_dims(g, axis)
        else:
            gg = g
        return ((np.broadcast_to(gg, a.shape) / DTYPE(count)).astype(DTYPE),)
    return _record("mean", (a,), out, bwd,
                   lambda: a.data.mean(axis=axis, keepdims=keepdims, dtype=DTYPE))


# ---------------------------------------------------------------------------
# matmul, attention softmax, gathers
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; inner dims must agree, batch dims broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    out = Tensor(np.matmul(a.data, b.data))
    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return (ga, gb)
    return _record("matmul", (a, b), out, bwd, lambda: np.matmul(a.data, b.data))


def softmax_lastdim(x: Tensor, mask_bias: Optional[Tensor] = None) -> Tensor:
    """Softmax over the last dimension with an optional additive mask bias.

    ``mask_bias`` entries must be 0 or ``NEG_INF``. Positions biased with
    ``NEG_INF`` get probability exactly 0. A row whose entries are all masked
    comes back as all zeros and is flagged on the result's
    ``all_masked_rows`` attribute (a bool array over rows) for the caller
    to handle.
    """
    if mask_bias is not None:
        bias = mask_bias.data
        if bias.shape != x.shape:
            bias = np.broadcast_to(bias, x.shape)
        if not np.all((bias == 0.0) | (bias == NEG_INF)):
            raise ValueError("mask_bias entries must be 0 or NEG_INF")
        z = x.data + bias
        dead = (bias == NEG_INF).all(axis=-1)
    else:
        z = x.data
        dead = None
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    y = e / s
    if dead is not None and dead.any():
        y = np.where(dead[..., None], DTYPE(0.0), y)
    out = Tensor(y)
    if dead is not None:
        out.all_masked_rows = dead
    def bwd(g):
        dot = (g * out.data).sum(axis=-1, keepdims=True)
        gx = ((g - dot) * out.data).astype(DTYPE)
        return (gx,) if mask_bias is None else (gx, None)
    def fwd():
        zz = x.data if mask_bias is None else x.data + np.broadcast_to(mask_bias.data, x.shape)
        mm = zz.max(axis=-1, keepdims=True)
        ee = np.exp(zz - mm)
        yy = ee / ee.sum(axis=-1, keepdims=True)
        if dead is not None and dead.any():
            yy = np.where(dead[..., None], DTYPE(0.0), yy)
        return yy.astype(DTYPE)
    inputs = (x,) if mask_bias is None else (x, mask_bias)
    return _record("softmax", inputs, out, bwd, fwd)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Select rows of a 2-D table by integer id; gradients scatter-add back."""
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids])
    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)
    return _record("gather", (table,), out, bwd, lambda: table.data[ids])


# ---------------------------------------------------------------------------
# spatial primitives (NHWC layout)
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, pad: int = 1) -> Tensor:
    """2-D convolution, NHWC activations, weight layout (kh, kw, Cin, Cout).

    Computed as one GEMM per kernel offset accumulated in fixed (kh, kw)
    order, which keeps the reduction order reproducible and avoids
    materializing an im2col matrix.
    """
    kh, kw, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv2d channel mismatch: {tuple(x.shape)} vs {tuple(w.shape)}")
    bsz, hin, win_ = x.shape[0], x.shape[1], x.shape[2]
    ho = (hin + 2 * pad - kh) // stride + 1
    wo = (win_ + 2 * pad - kw) // stride + 1

    def run():
        xp = x.data if pad == 0 else np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        acc = np.zeros((bsz * ho * wo, cout), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, i:i + ho * stride:stride, j:j + wo * stride:stride, :]
                acc += xs.reshape(-1, cin) @ w.data[i, j]
        if b is not None:
            acc += b.data
        return acc.reshape(bsz, ho, wo, cout)

    out = Tensor(run())

    def bwd(g):
        gmat = np.ascontiguousarray(g.reshape(-1, cout))
        gw = gb = gx = None
        if w.requires_grad or x.requires_grad:
            xp = x.data if pad == 0 else np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
            if w.requires_grad:
                gw = np.empty_like(w.data)
            if x.requires_grad:
                dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    hs = slice(i, i + ho * stride, stride)
                    ws = slice(j, j + wo * stride, stride)
                    if w.requires_grad:
                        xs = xp[:, hs, ws, :].reshape(-1, cin)
                        gw[i, j] = xs.T @ gmat
                    if x.requires_grad:
                        dxp[:, hs, ws, :] += (gmat @ w.data[i, j].T).reshape(bsz, ho, wo, cin)
            if x.requires_grad:
                gx = np.ascontiguousarray(dxp[:, pad:pad + hin, pad:pad + win_, :])
        if b is not None and b.requires_grad:
            gb = gmat.sum(axis=0)
        grads = [gx, gw]
        if b is not None:
            grads.append(gb)
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv2d", inputs, out, bwd, run)


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = Tensor(x.data.repeat(2, axis=1).repeat(2, axis=2))
    def bwd(g):
        bsz, h2, w2, c = g.shape
        return (g.reshape(bsz, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4)).astype(DTYPE),)
    return _record("upsample2x", (x,), out, bwd,
                   lambda: x.data.repeat(2, axis=1).repeat(2, axis=2))


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean binary cross-entropy over all elements, numerically stable."""
    x, t = logits.data, targets.data
    loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(loss.mean(dtype=DTYPE))
    n = DTYPE(x.size)
    def bwd(g):
        s = 1.0 / (1.0 + np.exp(-x))
        return ((g * (s - t) / n).astype(DTYPE), None)
    def fwd():
        ll = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
        return ll.mean(dtype=DTYPE)
    return _record("bce", (logits, targets), out, bwd, fwd)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> dict[Tensor, Tensor]:
    """Reverse sweep from a scalar loss; returns gradients for all tape leaves.

    Leaves the loss never reached get zero gradients. Accumulation order is
    the fixed reverse execution order, so results are reproducible.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            acc = grads.get(id(t))
            grads[id(t)] = gi if acc is None else acc + gi
    result: dict[Tensor, Tensor] = {}
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        result[leaf] = Tensor(g if g is not None else np.zeros_like(leaf.data))
    return result


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second-moment accumulators plus a step counter, one slot per parameter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], lr: float, **kw) -> "AdamState":
        st = cls(lr=lr, **kw)
        for name, p in params.items():
            st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        return st


def adam_step(params: dict[str, Tensor], grads: dict[str, Tensor],
              state: AdamState) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update, in place; deterministic given inputs."""
    state.step += 1
    b1, b2 = DTYPE(state.beta1), DTYPE(state.beta2)
    c1 = DTYPE(1.0 - state.beta1 ** state.step)
    c2 = DTYPE(1.0 - state.beta2 ** state.step)
    lr, eps = DTYPE(state.lr), DTYPE(state.eps)
    for name, p in params.items():
        g = grads[name].data if isinstance(grads[name], Tensor) else grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape "
                             f"{p.data.shape} for '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# small composites used throughout the models
# ---------------------------------------------------------------------------

def mse(a: Tensor, b: Tensor) -> Tensor:
    d = sub(a, b)
    return reduce_mean(mul(d, d))


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Group normalization over NHWC activations; gamma/beta are (C,)."""
    b, h, w, c = x.shape
    if c % groups:
        raise ValueError(f"channels {c} not divisible by {groups} groups")
    cg = c // groups
    m_count = DTYPE(h * w * cg)

    def stats(data):
        # grouped two-pass mean/variance via single-pass einsum reductions
        xg = data.reshape(b, h * w, groups, cg)
        mu = (np.einsum("bngc->bg", xg) / m_count).reshape(b, 1, groups, 1)
        d = xg - mu
        var = (np.einsum("bngc,bngc->bg", d, d) / m_count).reshape(b, 1, groups, 1)
        inv = 1.0 / np.sqrt(var + DTYPE(eps))
        return (d * inv).astype(DTYPE), inv

    y, inv = stats(x.data)
    out = Tensor(y.reshape(b, h, w, c) * gamma.data + beta.data)

    def bwd(g):
        gx = ggam = gbet = None
        yfull = y.reshape(b, h, w, c)
        if gamma.requires_grad:
            ggam = (g * yfull).sum(axis=(0, 1, 2)).astype(DTYPE)
        if beta.requires_grad:
            gbet = g.sum(axis=(0, 1, 2)).astype(DTYPE)
        if x.requires_grad:
            dy = (g * gamma.data).reshape(b, h * w, groups, cg)
            m1 = (np.einsum("bngc->bg", dy) / m_count).reshape(b, 1, groups, 1)
            m2 = (np.einsum("bngc,bngc->bg", dy, y) / m_count).reshape(b, 1, groups, 1)
            gx = (inv * (dy - m1 - y * m2)).reshape(b, h, w, c).astype(DTYPE)
        return (gx, ggam, gbet)

    return _record("group_norm", (x, gamma, beta), out, bwd,
                   lambda: (stats(x.data)[0].reshape(b, h, w, c) * gamma.data
                            + beta.data).astype(DTYPE))


def warn_once(message: str):
    warnings.warn(message, RuntimeWarning, stacklevel=2)
