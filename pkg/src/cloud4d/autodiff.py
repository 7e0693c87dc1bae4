"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable stage of the interpolation pipeline is expressed in the
operations of this module. Ops record themselves on a global tape as they
execute; ``backward(loss)`` replays the tape once in reverse and accumulates
gradients into the participating leaves, then clears the tape. Tensors are
immutable values once created; one optimization run owns the tape and must
not share it across threads.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

__all__ = [
    "Tensor",
    "NumericalError",
    "as_tensor",
    "constant",
    "parameter",
    "no_grad",
    "backward",
    "tape_size",
    "matmul",
    "bmm",
    "linear",
    "concat",
    "softmax",
    "leaky_relu",
    "relu",
    "maximum",
    "take_rows",
    "take_cols",
    "amax",
    "softplus",
]


class NumericalError(RuntimeError):
    """A non-finite value (NaN/Inf) appeared at an op boundary."""


_TAPE: list["_Node"] = []
_GRAD_ENABLED = True


class _Node:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out, inputs, bwd):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward evaluation only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def tape_size() -> int:
    return len(_TAPE)


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    All values are validated to be finite on construction, which is the op
    boundary for every operation in this module.
    """

    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, _leaf: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        # single-reduce fast path: NaN/Inf propagate through the sum; the
        # precise check only runs when the sum itself is suspect
        if not math.isfinite(float(arr.sum())):
            if not np.all(np.isfinite(arr)):
                raise NumericalError(
                    "non-finite value in tensor of shape %r" % (arr.shape,))
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.is_leaf = _leaf

    # -- introspection ----------------------------------------------------

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

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return powi(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- convenience methods -------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    @property
    def T(self):
        return transpose(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def constant(x) -> Tensor:
    """Wrap an array as a non-differentiable tensor."""
    return Tensor(np.asarray(x, dtype=np.float64))

def parameter(x) -> Tensor:
    """Wrap an array as a trainable leaf."""
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def _make(data, inputs, bwd) -> Tensor:
    """Create an op output and record it on the tape when grads are on."""
    req = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req, _leaf=False)
    if req:
        _TAPE.append(_Node(out, inputs, bwd))
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum out dims that numpy broadcasting added or stretched."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def powi(a, p: float):
    a = as_tensor(a)
    p = float(p)
    return _make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow surfaces as the finite check
        out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: (g * out_data,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    return _make(out_data, (a,), lambda g: (g * 0.5 / out_data,))


def sin(a):
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a):
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def softplus(a):
    """log(1 + exp(x)), stable across the whole float range."""
    a = as_tensor(a)
    out_data = np.logaddexp(0.0, a.data)

    def bwd(g):
        sig = np.where(a.data >= 0,
                       1.0 / (1.0 + np.exp(-np.clip(a.data, 0, None))),
                       np.exp(np.clip(a.data, None, 0))
                       / (1.0 + np.exp(np.clip(a.data, None, 0))))
        return (g * sig,)

    return _make(out_data, (a,), bwd)


def maximum(a, floor: float):
    """Elementwise max with a scalar; subgradient goes to `a` only where a > floor."""
    a = as_tensor(a)
    mask = (a.data > floor).astype(np.float64)
    return _make(np.maximum(a.data, floor), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.01):
    """x for x > 0, slope*x otherwise; the subgradient at 0 is `slope`."""
    if not 0.0 < slope < 1.0:
        raise ValueError("slope must lie in (0, 1)")
    a = as_tensor(a)
    factor = np.where(a.data > 0.0, 1.0, slope)
    return _make(a.data * factor, (a,), lambda g: (g * factor,))


def relu(a):
    a = as_tensor(a)
    mask = (a.data > 0.0).astype(np.float64)
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    """Matrix product; batched when either operand has >2 dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have >= 2 dims; reshape vectors first")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} x {b.shape}")

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), bwd)


bmm = matmul  # batched matmul is the same op


def linear(x, w, b=None):
    """x @ w + b in one tape node (2-D x and w; b broadcasts over rows)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.shape[-1] != w.data.shape[0]:
        raise ValueError(f"linear dims disagree: {x.shape} x {w.shape}")
    if b is None:
        return matmul(x, w)
    b = as_tensor(b)

    def bwd(g):
        gx = np.matmul(g, w.data.T)
        gw = np.matmul(np.swapaxes(x.data, -1, -2), g)
        if gw.ndim > 2:
            gw = gw.sum(axis=tuple(range(gw.ndim - 2)))
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw, _unbroadcast(gb, b.shape)

    return _make(np.matmul(x.data, w.data) + b.data, (x, w, b), bwd)


def transpose(a):
    """Swap the last two axes (plain transpose for 2-D)."""
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis: int = 0):
    """Concatenate along `axis`; the backward pass splits the gradient."""
    ts = [as_tensor(t) for t in tensors]
    if len(ts) == 1:
        t = ts[0]
        return _make(t.data.copy(), (t,), lambda g: (g,))
    for t in ts[1:]:
        if t.ndim != ts[0].ndim:
            raise ValueError("concat inputs must share rank")
        for ax in range(t.ndim):
            if ax != (axis % t.ndim) and t.shape[ax] != ts[0].shape[ax]:
                raise ValueError(f"concat extents disagree off-axis: {t.shape} vs {ts[0].shape}")
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bwd)


# -- reductions ---------------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False):
    a = as_tensor(a)
    shape = a.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False):
    a = as_tensor(a)
    shape = a.shape
    count = a.size if axis is None else shape[axis]

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / count,)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


def amax(a, axis: int):
    """Max-reduction along `axis`; gradient routes to the first (lowest index) max."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out_data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bwd(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _make(out_data, (a,), bwd)


# -- indexing -----------------------------------------------------------------

def take_rows(a, idx):
    """Fancy-index along axis 0; repeated indices accumulate gradient."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def bwd(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return _make(a.data[idx], (a,), bwd)


def take_cols(a, idx):
    """Fancy-index along axis 1 of a 2-D tensor."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def bwd(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, (slice(None), idx), g)
        return (grad,)

    return _make(a.data[:, idx], (a,), bwd)


# -- composites ---------------------------------------------------------------

def softmax(a, axis: int = -1):
    """Row-stochastic exponential weights, stabilized by max-subtraction.

    The subtracted max is treated as a constant: softmax is shift-invariant,
    so the gradient is exact.
    """
    a = as_tensor(a)
    shift = constant(a.data.max(axis=axis, keepdims=True))
    e = exp(sub(a, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


# -- the backward pass --------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate grads of every participating leaf, then clear the tape.

    `loss` must be scalar. Each tape node is visited exactly once, in reverse
    execution order (which is a valid topological order by construction).
    """
    global _TAPE
    if loss.data.ndim != 0 and loss.data.size != 1:
        _TAPE = []
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not _TAPE:
        raise RuntimeError("backward called with an empty tape")

    loss.grad = np.ones_like(loss.data)
    try:
        for node in reversed(_TAPE):
            gout = node.out.grad
            if gout is None:
                continue
            grads = node.bwd(gout)
            for t, g in zip(node.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = np.array(g, dtype=np.float64)
                else:
                    np.add(t.grad, g, out=t.grad)
            if not node.out.is_leaf:
                node.out.grad = None  # free intermediate buffers as we go
    finally:
        _TAPE = []
