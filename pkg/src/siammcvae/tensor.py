"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record onto the active :class:`Tape` when one of their inputs
requires a gradient. Without an active tape every op is a plain numpy
evaluation, which doubles as inference mode::

    with Tape() as tape:
        loss = frobenius_sq(x @ w)
    backward(loss)
    w.grad
"""

import math
import threading

import numpy as np

from . import kernels


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return hadamard(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class _Node:
    __slots__ = ("op", "out_id", "inputs", "backward", "tape")

    def __init__(self, op, out_id, inputs, backward, tape):
        self.op = op
        self.out_id = out_id
        self.inputs = inputs
        self.backward = backward
        self.tape = tape


class Tape:
    """Ordered record of ops; append order is a topological order."""

    _local = threading.local()

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        stack = getattr(Tape._local, "stack", None)
        if stack is None:
            stack = Tape._local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    @staticmethod
    def current():
        stack = getattr(Tape._local, "stack", None)
        return stack[-1] if stack else None


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(arr, op):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by op '{op}'")
    return arr


def _emit(op, data, inputs, backward):
    """Wrap op output; record a node if any input needs a gradient."""
    _check(data, op)
    tape = Tape.current()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        if tape.consumed:
            raise TapeError("tape already consumed by backward; open a new Tape")
        node = _Node(op, id(out), inputs, backward, tape)
        tape.nodes.append(node)
        out._node = node
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def hadamard(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _emit("hadamard", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NonFiniteError("log of non-positive value")
    return _emit("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def gelu(a):
    """Exact GELU, x * Phi(x)."""
    a = as_tensor(a)
    return _emit("gelu", kernels.gelu_forward(a.data), (a,),
                 lambda g: (kernels.gelu_backward(a.data, g),))


# ---------------------------------------------------------------- reductions

def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", out, (a,), bw)


def mean(a, axis=None):
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / count)


def frobenius_sq(a):
    """Sum of squared entries."""
    a = as_tensor(a)
    return _emit("frobenius_sq", np.vdot(a.data.ravel(), a.data.ravel()), (a,),
                 lambda g: (2.0 * g * a.data,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(B, -1, -2), a.shape)
        if b.requires_grad:
            if B.ndim == 2 and A.ndim > 2:
                # fold the batch into rows: one large GEMM instead of many
                k, n = A.shape[-1], g.shape[-1]
                gb = A.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, b.shape)
        return ga, gb

    with np.errstate(over="ignore", invalid="ignore"):
        out = A @ B  # overflow surfaces as NonFiniteError
    return _emit("matmul", out, (a, b), bw)


def transpose(a, axes=None):
    """Swap the last two axes, or apply a full permutation ``axes``."""
    a = as_tensor(a)
    if axes is None:
        return _emit("transpose", np.swapaxes(a.data, -1, -2), (a,),
                     lambda g: (np.swapaxes(g, -1, -2),))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def reshape(a, shape):
    a = as_tensor(a)
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


# ---------------------------------------------------------------- structure

def _concat(xs, axis, op):
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _emit(op, np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bw)


def concat_cols(xs):
    return _concat(xs, -1, "concat_cols")


def concat_rows(xs):
    return _concat(xs, -2, "concat_rows")


def slice_rows(a, start, stop):
    a = as_tensor(a)
    n = a.shape[-2]
    if not (0 <= start <= stop <= n):
        raise IndexError(f"row slice [{start}:{stop}] out of range for {n} rows")

    def bw(g):
        out = np.zeros(a.shape)
        out[..., start:stop, :] = g
        return (out,)

    return _emit("slice_rows", a.data[..., start:stop, :], (a,), bw)


def _check_index(idx, n, what):
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"{what} index out of range [0, {n})")


def gather_rows(a, idx):
    """Select rows along axis -2.

    A 2-d ``a`` is a lookup table and ``idx`` may have any shape; a batched
    ``a`` of shape (..., n, d) takes ``idx`` of shape (..., k).
    """
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    n, d = a.shape[-2], a.shape[-1]
    _check_index(idx, n, "gather")
    if a.ndim == 2:
        out = a.data[idx]

        def bw(g):
            ga = np.zeros(a.shape)
            np.add.at(ga, idx.ravel(), g.reshape(-1, d))
            return (ga,)
    else:
        lead = a.shape[:-2]
        if idx.shape[:-1] != lead:
            raise ValueError(f"gather index batch shape {idx.shape[:-1]} != {lead}")
        out = np.take_along_axis(a.data, idx[..., None], axis=-2)

        def bw(g):
            nb = int(np.prod(lead))
            flat = (idx.reshape(nb, -1) + (np.arange(nb) * n)[:, None]).ravel()
            ga = np.zeros((nb * n, d))
            np.add.at(ga, flat, g.reshape(-1, d))
            return (ga.reshape(a.shape),)

    return _emit("gather_rows", out, (a,), bw)


def scatter_rows(a, positions, total):
    """Place row j of ``a`` at row ``positions[j]`` of a zero (..., total, d) result."""
    a = as_tensor(a)
    pos = np.asarray(positions, dtype=np.intp)
    if pos.shape[-1] != a.shape[-2]:
        raise IndexError(f"{pos.shape[-1]} positions for {a.shape[-2]} rows")
    _check_index(pos, total, "scatter")
    if pos.shape[-1] > 1 and (np.diff(pos, axis=-1) <= 0).any():
        raise IndexError("scatter positions must be strictly ascending")
    lead = a.shape[:-2]
    pos_b = np.broadcast_to(pos, lead + pos.shape[-1:])
    out = np.zeros(lead + (total, a.shape[-1]))
    np.put_along_axis(out, pos_b[..., None], a.data, axis=-2)

    def bw(g):
        return (np.take_along_axis(g, pos_b[..., None], axis=-2),)

    return _emit("scatter_rows", out, (a,), bw)


# ---------------------------------------------------------------- nn ops

LAYERNORM_EPS = 1e-5


def layernorm(x, gain, bias, eps=LAYERNORM_EPS):
    """Normalize over the last axis (population variance), then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    x2 = x.data.reshape(-1, d)
    y, xhat, rstd = kernels.layernorm_forward(x2, gain.data, bias.data, eps)

    def bw(g):
        dx, dg, db = kernels.layernorm_backward(g.reshape(-1, d), xhat, rstd, gain.data)
        return dx.reshape(x.shape), dg, db

    return _emit("layernorm", y.reshape(x.shape), (x, gain, bias), bw)


def softmax_lastdim(a):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", p, (a,), bw)


def attention(q, k, v, kernel="standard", chunk_size=64):
    """softmax(q k^T / sqrt(d)) v over the last two axes.

    ``standard`` forms each full score matrix; ``chunked`` streams key/query
    blocks of ``chunk_size`` rows with a running max and denominator.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if not (q.shape == k.shape == v.shape):
        raise ValueError(f"attention operands disagree: {q.shape} {k.shape} {v.shape}")
    lead, n, d = q.shape[:-2], q.shape[-2], q.shape[-1]
    Q, K, V = (t.data.reshape(-1, n, d) for t in (q, k, v))
    scale_ = 1.0 / math.sqrt(d)
    if kernel == "standard":
        s = (Q @ K.transpose(0, 2, 1)) * scale_
        s -= s.max(axis=-1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=-1, keepdims=True)
        out = p @ V

        def bw(g):
            g = g.reshape(-1, n, d)
            dv = p.transpose(0, 2, 1) @ g
            dp = g @ V.transpose(0, 2, 1)
            ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale_
            return ((ds @ K).reshape(q.shape), (ds.transpose(0, 2, 1) @ Q).reshape(k.shape),
                    dv.reshape(v.shape))
    elif kernel == "chunked":
        out, lse = kernels.chunked_attention_forward(Q, K, V, chunk_size)

        def bw(g):
            dq, dk, dv = kernels.chunked_attention_backward(
                Q, K, V, out, lse, g.reshape(-1, n, d), chunk_size)
            return dq.reshape(q.shape), dk.reshape(k.shape), dv.reshape(v.shape)
    else:
        raise ValueError(f"unknown attention kernel {kernel!r}")
    return _emit(f"attention[{kernel}]", out.reshape(lead + (n, d)), (q, k, v), bw)


# ---------------------------------------------------------------- backward

def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None:
        raise TapeError("loss was not produced on an active tape")
    tape = node.tape
    if tape.consumed:
        raise TapeError("backward already ran on this tape; run a new forward")
    if not tape.nodes:
        raise TapeError("empty tape")
    tape.consumed = True

    grads = {id(loss): np.ones(loss.shape)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out_id, None)
        if g is None:
            continue
        parts = node.backward(g)
        for t, gt in zip(node.inputs, parts):
            if gt is None or not t.requires_grad:
                continue
            _check(gt, node.op + " (backward)")
            key = id(t)
            grads[key] = grads[key] + gt if key in grads else gt
            if t._node is None:
                leaves[key] = t
    tape.nodes = []
    for key, t in leaves.items():
        t.grad = np.array(grads[key], dtype=np.float64).reshape(t.shape)
