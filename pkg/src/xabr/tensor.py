"""Reverse-mode automatic differentiation on numpy arrays.

Every forward op records a node on the active tape; ``Tensor.backward``
replays the tape in reverse creation order. Storage is float32 by default
with float64 accumulation inside reductions (matmul, mean/var, sums) so
finite-difference checks stay tight. Switch to full float64 with
``set_default_dtype`` for high-precision gradient checking.

Broadcasting is deliberately restricted to bias-style (a trailing-dim
vector over leading dims); anything else raises.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


def default_dtype() -> np.dtype:
    return _DTYPE


def set_default_dtype(dtype) -> np.dtype:
    """Set the storage dtype for newly created tensors; returns the old one."""
    global _DTYPE
    old = _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}, expected float32 or float64")
    _DTYPE = dt
    return old


@contextmanager
def using_dtype(dtype):
    old = set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation, generation)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class TapeNode:
    __slots__ = ("tag", "inputs", "out", "backward_fn")

    def __init__(self, tag, inputs, out, backward_fn):
        self.tag = tag
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of forward ops; rebuilt every forward pass."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def record(self, tag, inputs, out, backward_fn) -> int:
        self.nodes.append(TapeNode(tag, inputs, out, backward_fn))
        return len(self.nodes) - 1


_TAPE = Tape()


def active_tape() -> Tape:
    return _TAPE


def reset_tape() -> Tape:
    """Drop the recorded graph and start a fresh tape."""
    global _TAPE
    _TAPE = Tape()
    return _TAPE


class Tensor:
    """N-dimensional float array with an optional gradient buffer.

    ``requires_grad=False`` tensors never accumulate a gradient and never
    create tape nodes. Data arrays are treated as immutable by all ops;
    only optimizers write into ``data`` and only ``backward`` writes into
    ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.ndarray) and data.dtype == _DTYPE:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def softmax(self):
        return softmax(self)

    def log_softmax(self):
        return log_softmax(self)

    def gelu(self):
        return gelu(self)

    def sigmoid(self):
        return sigmoid(self)

    def backward(self):
        backward(self)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad = t.grad + g.astype(t.data.dtype, copy=False)


def _record(tag: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    req = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    if req:
        out.tape_id = _TAPE.record(tag, inputs, out, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Seed d(loss)=1 and propagate through the tape in reverse order.

    Leaf gradients accumulate across calls until ``zero_grads``;
    intermediate gradients are cleared at the start of each call.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.tape_id is None:
        raise ValueError("loss is not on the active tape (no recorded graph)")
    nodes = _TAPE.nodes
    if loss.tape_id >= len(nodes) or nodes[loss.tape_id].out is not loss:
        raise ValueError("loss was recorded on a previous tape; rerun the forward pass")
    for node in nodes:
        node.out.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(nodes[: loss.tape_id + 1]):
        g = node.out.grad
        if g is None:
            continue
        node.backward_fn(g)


# -- elementwise and arithmetic ops -------------------------------------


def _as_f64(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float64, copy=False)


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out_data = a.data + np.asarray(b, dtype=a.data.dtype)

        def back_scalar(g):
            _accumulate(a, g)

        return _record("add", out_data, (a,), back_scalar)

    if a.shape == b.shape:
        out_data = a.data + b.data

        def back_same(g):
            _accumulate(a, g)
            _accumulate(b, g)

        return _record("add", out_data, (a, b), back_same)

    if b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]:
        out_data = a.data + b.data

        def back_bias(g):
            _accumulate(a, g)
            _accumulate(b, g.reshape(-1, g.shape[-1]).sum(axis=0, dtype=np.float64))

        return _record("add_bias", out_data, (a, b), back_bias)

    raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape} "
                     "(only equal shapes or trailing-dim bias broadcast)")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out_data = a.data - np.asarray(b, dtype=a.data.dtype)

        def back_scalar(g):
            _accumulate(a, g)

        return _record("sub", out_data, (a,), back_scalar)

    if a.shape != b.shape:
        raise ValueError(f"sub: shapes {a.shape} and {b.shape} differ")
    out_data = a.data - b.data

    def back(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _record("sub", out_data, (a, b), back)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        out_data = a.data * a.data.dtype.type(c)

        def back_scalar(g):
            _accumulate(a, g * c)

        return _record("mul", out_data, (a,), back_scalar)

    if a.shape != b.shape:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} differ "
                         "(elementwise only)")
    out_data = a.data * b.data

    def back(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _record("mul", out_data, (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with float64 accumulation.

    Supports 2D x 2D, ND x 2D (projection over flattened leading dims) and
    ND x ND with identical leading dims (stacked matmul).
    """
    ashape, bshape = a.shape, b.shape
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2D, got {ashape} and {bshape}")
    if ashape[-1] != bshape[-2]:
        raise ValueError(f"matmul: inner dimensions disagree, {ashape} @ {bshape}")
    if b.ndim > 2 and ashape[:-2] != bshape[:-2]:
        raise ValueError(f"matmul: leading dimensions disagree, {ashape} @ {bshape}")

    a64, b64 = _as_f64(a.data), _as_f64(b.data)
    out_data = np.matmul(a64, b64).astype(a.data.dtype)

    if b.ndim == 2:

        def back(g):
            g64 = _as_f64(g)
            _accumulate(a, np.matmul(g64, b64.T))
            _accumulate(b, np.matmul(a64.reshape(-1, ashape[-1]).T,
                                     g64.reshape(-1, bshape[-1])))

    else:

        def back(g):
            g64 = _as_f64(g)
            _accumulate(a, np.matmul(g64, np.swapaxes(b64, -1, -2)))
            _accumulate(b, np.matmul(np.swapaxes(a64, -1, -2), g64))

    return _record("matmul", out_data, (a, b), back)


def reshape(x: Tensor, shape) -> Tensor:
    out_data = x.data.reshape(shape)

    def back(g):
        _accumulate(x, g.reshape(x.shape))

    return _record("reshape", out_data, (x,), back)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_data = np.transpose(x.data, axes)

    def back(g):
        _accumulate(x, np.transpose(g, inverse))

    return _record("transpose", out_data, (x,), back)


def concat_lastdim(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise ValueError(f"concat: leading shapes {a.shape} and {b.shape} differ")
    out_data = np.concatenate([a.data, b.data], axis=-1)
    na = a.shape[-1]

    def back(g):
        _accumulate(a, g[..., :na])
        _accumulate(b, g[..., na:])

    return _record("concat", out_data, (a, b), back)


def tsum(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype)

    def back(g):
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _record("sum", out_data, (x,), back)


def tmean(x: Tensor) -> Tensor:
    n = x.size
    out_data = np.asarray(x.data.mean(dtype=np.float64), dtype=x.data.dtype)

    def back(g):
        _accumulate(x, np.broadcast_to(g / n, x.shape))

    return _record("mean", out_data, (x,), back)


# -- nonlinearities ------------------------------------------------------

_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out_data = (0.5 * xd * (1.0 + t)).astype(xd.dtype)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        _accumulate(x, g * dx)

    return _record("gelu", out_data, (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)

    def back(g):
        _accumulate(x, g * y * (1.0 - y))

    return _record("sigmoid", y, (x,), back)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last dimension, max-subtracted for overflow safety."""
    xd = _as_f64(x.data)
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y64 = e / e.sum(axis=-1, keepdims=True)
    y = y64.astype(x.data.dtype)

    def back(g):
        g64 = _as_f64(g)
        dot = (g64 * y64).sum(axis=-1, keepdims=True)
        _accumulate(x, y64 * (g64 - dot))

    return _record("softmax", y, (x,), back)


def log_softmax(x: Tensor) -> Tensor:
    xd = _as_f64(x.data)
    shifted = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y64 = shifted - lse
    y = y64.astype(x.data.dtype)

    def back(g):
        g64 = _as_f64(g)
        gsum = g64.sum(axis=-1, keepdims=True)
        _accumulate(x, g64 - np.exp(y64) * gsum)

    return _record("log_softmax", y, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dim to zero mean / unit variance (biased), then
    scale by ``gain`` and shift by ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm: gain/bias must be shape ({d},), "
                         f"got {gain.shape} and {bias.shape}")
    xd = _as_f64(x.data)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = (xhat * _as_f64(gain.data) + _as_f64(bias.data)).astype(x.data.dtype)

    def back(g):
        g64 = _as_f64(g)
        lead = tuple(range(g64.ndim - 1))
        _accumulate(gain, (g64 * xhat).sum(axis=lead))
        _accumulate(bias, g64.sum(axis=lead))
        dxhat = g64 * _as_f64(gain.data)
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        _accumulate(x, dx)

    return _record("layer_norm", out_data, (x, gain, bias), back)


# -- indexing ops --------------------------------------------------------


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; backward scatter-adds into ``table.grad``."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = int(ids.reshape(-1)[np.argmax((ids < 0) | (ids >= vocab))])
        raise IndexError(f"embedding id {bad} out of range [0, {vocab})")
    out_data = table.data[ids]

    def back(g):
        dt = np.zeros(table.shape, dtype=np.float64)
        np.add.at(dt, ids.reshape(-1), _as_f64(g).reshape(-1, table.shape[-1]))
        _accumulate(table, dt)

    return _record("embedding", out_data, (table,), back)


def gather_lastdim(x: Tensor, idx) -> Tensor:
    """out[..., i] = x[..., i, idx[..., i]]; backward scatters into x."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ValueError(f"gather: index shape {idx.shape} must match leading "
                         f"dims of {x.shape}")
    out_data = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def back(g):
        dx = np.zeros(x.shape, dtype=g.dtype)
        np.put_along_axis(dx, idx[..., None], g[..., None], axis=-1)
        _accumulate(x, dx)

    return _record("gather", out_data, (x,), back)
