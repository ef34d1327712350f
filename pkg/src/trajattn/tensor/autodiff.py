"""Reverse-mode differentiation over the kernels this package uses.

A :class:`Tape` records every operation that touches one of its
:class:`Var` nodes; :meth:`Tape.backward` replays the records once each, in
reverse creation order (creation order is already topological, since an op's
inputs exist before its output). Gradients accumulate on ``Var.grad``.

The op functions below are polymorphic: given plain arrays they fall through
to the raw kernels in :mod:`trajattn.tensor.ops` with no recording overhead;
given a ``Var`` they build the graph. Attention kernels and the model are
written once against these functions and serve both inference and training.

Not a general autodiff system: only the ops this repository needs exist, and
one Tape must stay on one thread.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops

__all__ = [
    "Tape",
    "Var",
    "value_of",
    "fd_gradient",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "reshape",
    "transpose",
    "take",
    "concat",
    "time_diagonal",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "mean_axis",
    "sum_all",
    "cross_entropy_logits",
]


class Var:
    """A tensor value recorded on a tape, with a gradient slot."""

    __slots__ = ("value", "grad", "tape", "_edges")

    def __init__(self, value: np.ndarray, tape: "Tape", edges=()):
        self.value = value
        self.grad = None
        self.tape = tape
        self._edges = edges  # tuple of (parent Var, vjp: dy -> d(parent))
        tape._nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, grad={'set' if self.grad is not None else 'unset'})"


class Tape:
    """Single-threaded operation recorder. One tape per training step/worker."""

    def __init__(self):
        self._nodes: list[Var] = []

    def var(self, value) -> Var:
        """Wrap ``value`` as a differentiable leaf on this tape."""
        return Var(np.asarray(value), self)

    def __len__(self):
        return len(self._nodes)

    def backward(self, output: Var) -> None:
        """Accumulate d(output)/d(node) into ``node.grad`` for every node.

        ``output`` must be scalar-shaped. Each recorded node is visited
        exactly once, in reverse creation (= reverse topological) order;
        nodes that do not influence ``output`` keep ``grad=None``.
        """
        if output.tape is not self:
            raise ValueError("output was not recorded on this tape")
        if output.value.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {output.value.shape}")
        for node in self._nodes:
            node.grad = None
        output.grad = np.ones_like(output.value)
        for node in reversed(self._nodes):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node._edges:
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = contrib
                else:
                    parent.grad = parent.grad + contrib


def value_of(x):
    """Underlying array of a Var, or ``x`` itself."""
    return x.value if isinstance(x, Var) else np.asarray(x)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def _lift(x, tape: Tape) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x), tape)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.asarray(a) + np.asarray(b)
    a, b = _lift(a, tape), _lift(b, tape)
    out = a.value + b.value
    sa, sb = a.value.shape, b.value.shape
    return Var(out, tape, ((a, lambda dy: _unbroadcast(dy, sa)), (b, lambda dy: _unbroadcast(dy, sb))))


def sub(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.asarray(a) - np.asarray(b)
    a, b = _lift(a, tape), _lift(b, tape)
    sa, sb = a.value.shape, b.value.shape
    return Var(
        a.value - b.value,
        tape,
        ((a, lambda dy: _unbroadcast(dy, sa)), (b, lambda dy: _unbroadcast(-dy, sb))),
    )


def mul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.asarray(a) * np.asarray(b)
    a, b = _lift(a, tape), _lift(b, tape)
    av, bv = a.value, b.value
    return Var(
        av * bv,
        tape,
        (
            (a, lambda dy: _unbroadcast(dy * bv, av.shape)),
            (b, lambda dy: _unbroadcast(dy * av, bv.shape)),
        ),
    )


def scale(x, s: float):
    """Multiply by a python scalar constant."""
    if not isinstance(x, Var):
        return np.asarray(x) * s
    return Var(x.value * s, x.tape, ((x, lambda dy: dy * s),))


def matmul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return ops.matmul(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    av, bv = a.value, b.value
    out = ops.matmul(av, bv)

    def vjp_a(dy):
        return _unbroadcast(np.matmul(dy, bv.swapaxes(-1, -2)), av.shape)

    def vjp_b(dy):
        return _unbroadcast(np.matmul(av.swapaxes(-1, -2), dy), bv.shape)

    return Var(out, tape, ((a, vjp_a), (b, vjp_b)))


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x, shape):
    if not isinstance(x, Var):
        return np.reshape(x, shape)
    old = x.value.shape
    return Var(x.value.reshape(shape), x.tape, ((x, lambda dy: dy.reshape(old)),))


def transpose(x, axes):
    if not isinstance(x, Var):
        return np.transpose(x, axes)
    inverse = tuple(np.argsort(axes))
    return Var(np.transpose(x.value, axes), x.tape, ((x, lambda dy: np.transpose(dy, inverse)),))


def take(x, index):
    """Basic (slice/int tuple) indexing, differentiable."""
    if not isinstance(x, Var):
        return np.asarray(x)[index]
    xv = x.value

    def vjp(dy):
        g = np.zeros_like(xv)
        g[index] = dy
        return g

    return Var(xv[index], x.tape, ((x, vjp),))


def concat(parts: Sequence, axis: int = -1):
    tape = _tape_of(*parts)
    if tape is None:
        return np.concatenate([np.asarray(p) for p in parts], axis=axis)
    parts = [_lift(p, tape) for p in parts]
    values = [p.value for p in parts]
    out = np.concatenate(values, axis=axis)
    ax = axis if axis >= 0 else out.ndim + axis
    edges = []
    offset = 0
    for p in parts:
        n = p.value.shape[ax]
        sl = tuple(slice(None) if d != ax else slice(offset, offset + n) for d in range(out.ndim))
        edges.append((p, lambda dy, sl=sl: dy[sl]))
        offset += n
    return Var(out, tape, tuple(edges))


def time_diagonal(y, s_count: int):
    """Rows ``y[..., i, i // s_count, :]`` of a frame-major [..., S*T, T, D] stack.

    Token i = t*S + s lives in frame t = i // S; this picks each token's own
    frame entry, i.e. the diagonal of the two time axes.
    """
    yv = value_of(y)
    if yv.ndim < 3:
        raise ValueError(f"time_diagonal expects rank >= 3 input, got {yv.shape}")
    n, t_count, _ = yv.shape[-3:]
    if n % s_count != 0 or t_count != n // s_count:
        raise ValueError(f"time_diagonal layout mismatch: {yv.shape} with s_count={s_count}")
    rows = np.arange(n)
    frames = rows // s_count
    out = yv[..., rows, frames, :]
    if not isinstance(y, Var):
        return out

    def vjp(dy):
        g = np.zeros_like(yv)
        g[..., rows, frames, :] = dy
        return g

    return Var(out, y.tape, ((y, vjp),))


# ---------------------------------------------------------------------------
# nonlinear kernels


def softmax_rows(x, scale_: float = 1.0):
    if not isinstance(x, Var):
        return ops.softmax_rows(x, scale_)
    y = ops.softmax_rows(x.value, scale_)

    def vjp(dy):
        inner = (dy * y).sum(axis=-1, keepdims=True)
        return scale_ * y * (dy - inner)

    return Var(y, x.tape, ((x, vjp),))


def layer_norm(x, gain, bias, eps: float = 1e-5):
    tape = _tape_of(x, gain, bias)
    if tape is None:
        return ops.layer_norm(x, gain, bias, eps)
    x, gain, bias = _lift(x, tape), _lift(gain, tape), _lift(bias, tape)
    xv, gv = x.value, gain.value
    mu = xv.mean(axis=-1, keepdims=True)
    centered = xv - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gv + bias.value
    width = xv.shape[-1]

    def vjp_x(dy):
        dxhat = dy * gv
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv_std * (dxhat - m1 - xhat * m2)

    def vjp_gain(dy):
        return (dy * xhat).reshape(-1, width).sum(axis=0)

    def vjp_bias(dy):
        return dy.reshape(-1, width).sum(axis=0)

    return Var(out, tape, ((x, vjp_x), (gain, vjp_gain), (bias, vjp_bias)))


def gelu(x):
    if not isinstance(x, Var):
        return ops.gelu(x)
    xv = x.value
    return Var(ops.gelu(xv), x.tape, ((x, lambda dy: dy * ops.gelu_derivative(xv)),))


def mean_axis(x, axis: int):
    if not isinstance(x, Var):
        return np.asarray(x).mean(axis=axis)
    xv = x.value
    n = xv.shape[axis]

    def vjp(dy):
        return np.repeat(np.expand_dims(dy / n, axis), n, axis=axis)

    return Var(xv.mean(axis=axis), x.tape, ((x, vjp),))


def sum_all(x):
    if not isinstance(x, Var):
        return np.asarray(x).sum()
    shp = x.value.shape
    return Var(np.asarray(x.value.sum()), x.tape, ((x, lambda dy: np.broadcast_to(dy, shp).copy()),))


def cross_entropy_logits(logits, labels):
    """Mean softmax cross-entropy of integer ``labels`` given [B, C] logits."""
    labels = np.asarray(labels)
    lv = value_of(logits)
    if lv.ndim != 2 or labels.shape != (lv.shape[0],):
        raise ValueError(f"cross_entropy shapes: logits {lv.shape}, labels {labels.shape}")
    b = lv.shape[0]
    m = lv.max(axis=-1, keepdims=True)
    z = lv - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[:, 0]
    picked = lv[np.arange(b), labels]
    loss = np.asarray((lse - picked).mean())
    if not isinstance(logits, Var):
        return loss
    probs = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)

    def vjp(dy):
        g = probs.copy()
        g[np.arange(b), labels] -= 1.0
        return g * (dy / b)

    return Var(loss, logits.tape, ((logits, vjp),))


# ---------------------------------------------------------------------------
# finite-difference oracle


def fd_gradient(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, coordinate by coordinate.

    Independent of the tape machinery on purpose: this is the oracle the
    tape is validated against.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError(f"non-finite function value near coordinate {i}")
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad
