"""A small reverse-mode differentiation engine over float64 numpy arrays.

Operations executed inside an active :class:`Tape` on inputs that require
gradients are recorded; ``Tape.backward`` replays the record in reverse. Outside
a tape the same functions run as plain numpy (inference mode).

>>> x = parameter([1.0, 2.0])
>>> with Tape() as tape:
...     y = sum_(x * x)
>>> tape.backward(y, {"x": x})["x"]
array([2., 4.])
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFinite, NotScalar, ShapeMismatch

MASK_VALUE = -1e30

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations.

    Single-owner; use as a context manager. Nodes are appended in execution
    order, which is a topological order, so ``backward`` walks them reversed.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def backward(self, output: Tensor, params: dict[str, Tensor] | None = None):
        """Accumulate d(output)/d(leaf) for every leaf on the tape.

        Sets ``.grad`` on leaves that require gradients and, if ``params`` is
        given, returns ``{name: gradient array}`` with zeros for parameters the
        output does not depend on.
        """
        if output.data.size != 1:
            raise NotScalar(f"backward needs a scalar output, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if parent._backward is None:
                    leaves[key] = parent
        if output._backward is None and output.requires_grad:
            leaves[id(output)] = output
        for key, leaf in leaves.items():
            leaf.grad = grads[key]
        if params is None:
            return None
        out = {}
        for name, p in params.items():
            g = grads.get(id(p)) if id(p) in leaves else None
            out[name] = np.zeros_like(p.data) if g is None else g
        return out


def _recording(*inputs) -> Tape | None:
    if not _TAPES:
        return None
    for t in inputs:
        if isinstance(t, Tensor) and t.requires_grad:
            return _TAPES[-1]
    return None


def _check(data: np.ndarray, op: str) -> np.ndarray:
    # a single reduction is much cheaper than isfinite(); it only fails on inf/nan
    # inputs or on overflow of the sum, and the exact test below settles both
    if not math.isfinite(np.add.reduce(data, axis=None)) and not np.all(np.isfinite(data)):
        raise NonFinite(f"non-finite value produced by {op}")
    return data


def _make(data, op, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _check(data, op)
    out.grad = None
    tape = _recording(*parents)
    if tape is None:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    else:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + c, "add_scalar", (a,), lambda g: (g,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, "square", (a,), lambda g: (2.0 * g * a.data,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), "relu", (a,), lambda g: (g * pos,))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _make(y, "exp", (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFinite("log of a non-positive value")
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


# -- reductions and normalisation ---------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(y, dtype=float), "sum", (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, "softmax", (a,),
                 lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(y, "log_softmax", (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise to zero mean and unit (biased) variance along ``axis``; no affine part."""
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, "layer_norm", (a,), backward)


# -- linear algebra and shape -------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    try:
        y = a.data @ b.data
    except ValueError:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif b.ndim == 2 and a.ndim > 2:
            # shared weight: fold the batch axes into one GEMM instead of summing afterwards
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _make(y, "matmul", (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), "transpose", (a,),
                 lambda g: (np.transpose(g, inv),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat: incompatible shapes "
                            + ", ".join(str(t.shape) for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(y, "concat", tuple(tensors),
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(a: Tensor, index) -> Tensor:
    y = a.data[index]

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(y, dtype=float), "getitem", (a,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatch("embedding id out of range")

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return _make(table.data[ids], "embedding", (table,), backward)


# -- optimiser -----------------------------------------------------------------


@dataclass
class OptimState:
    """Adam moments keyed by parameter name."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optim_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimState):
    """One bias-corrected Adam update, in place on ``params``; returns ``params``.

    Only names present in ``grads`` are updated.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, param {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        p.data = _check(p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps), "adam")
    return params


# -- gradient verification -------------------------------------------------------


def grad_check(function, params: dict[str, Tensor], probe_count: int = 20, h: float = 1e-5,
               seed: int = 0, grad_floor: float = 1e-8, kink_tol: float = 1e-4):
    """Compare tape gradients with central differences at random coordinates.

    ``function()`` must build a scalar from ``params`` and be deterministic.
    Returns the max over probes of ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, grad_floor)``.

    A probe is dropped when the function is not differentiable inside
    ``[x - h, x + h]`` (e.g. a relu input at or crossing zero): central
    differences at ``h`` and ``h/2`` disagree, or the second difference fails
    to shrink with the step, by more than ``kink_tol`` relative to the slope.
    Coordinates with an exactly zero tape gradient are not probed.
    """
    with Tape() as tape:
        out = function()
    if not np.isfinite(out.data).all():
        raise NonFinite("function value is not finite")
    ad = tape.backward(out, params)
    coords = [(name, i) for name, g in ad.items() for i in np.flatnonzero(g)]
    if not coords:
        return 0.0
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(coords), size=min(probe_count, len(coords)), replace=False)

    def value_at(name, i, delta):
        flat = params[name].data.reshape(-1)
        old = flat[i]
        flat[i] = old + delta
        try:
            return float(function().data)
        finally:
            flat[i] = old

    f0 = float(function().data)
    worst = 0.0
    for k in picks:
        name, i = coords[k]
        fp, fm = value_at(name, i, h), value_at(name, i, -h)
        fp2, fm2 = value_at(name, i, h / 2), value_at(name, i, -h / 2)
        if not np.all(np.isfinite([fp, fm, fp2, fm2])):
            raise NonFinite("finite difference is not finite")
        fd = (fp - fm) / (2 * h)
        fd2 = (fp2 - fm2) / h
        # second differences shrink linearly in h for smooth functions, not at a kink
        curv = (fp - 2 * f0 + fm) / h
        curv2 = (fp2 - 2 * f0 + fm2) / (h / 2)
        scale_ = max(abs(fd), abs(fd2), grad_floor)
        if abs(fd - fd2) > kink_tol * scale_ or abs(curv2 - curv / 2) > kink_tol * scale_:
            continue
        g = float(ad[name].reshape(-1)[i])
        err = abs(g - fd) / max(abs(g), abs(fd), grad_floor)
        worst = max(worst, err)
    return worst
