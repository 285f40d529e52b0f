"""Reverse-mode automatic differentiation over numpy arrays.

Every operation that receives at least one input with ``requires_grad`` is
recorded as a node holding its parents and a gradient rule.  ``backward``
replays the recorded nodes reachable from the loss in reverse creation
order, so unrelated history never affects the result.

Arrays are 32-bit by default; ``precision(np.float64)`` switches the dtype of
newly created tensors, which the finite-difference checks rely on.
"""

from __future__ import annotations

import contextlib
import itertools
import math

import numpy as np

LN_EPS = 1e-5
NORM_FLOOR = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)

_state = {"dtype": np.float32, "strict": False, "deterministic": False}
_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an operation."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        desc = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class NonFiniteError(FloatingPointError):
    pass


def get_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def strict(enabled=True):
    """Reject non-finite operands for the duration of the block."""
    old = _state["strict"]
    _state["strict"] = enabled
    try:
        yield
    finally:
        _state["strict"] = old


def set_deterministic(enabled=True):
    """Force single-threaded BLAS so reductions run in a fixed order."""
    _state["deterministic"] = bool(enabled)
    if enabled:
        from threadpoolctl import threadpool_limits

        threadpool_limits(1)


def is_deterministic():
    return _state["deterministic"]


class Tensor:
    """An n-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_live", "_grad_fn", "_op", "_id")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _state["dtype"])
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._live = ()
        self._grad_fn = None
        self._op = "leaf"
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable tensor."""
        if self.data.size != 1 or self.data.ndim > 1:
            raise ShapeError("backward (scalar loss required)", self.shape)
        if not self.requires_grad:
            return
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            for p, live in zip(node._parents, node._live):
                if live and id(p) not in seen:
                    stack.append(p)
        nodes.sort(key=lambda n: n._id, reverse=True)

        # intermediate buffers are rebuilt on every call; leaves accumulate
        for node in nodes:
            if node._grad_fn is not None:
                node.grad = None
        self.grad = np.ones_like(self.data)
        owned = {id(self.grad)}
        for node in nodes:
            if node._grad_fn is None or node.grad is None:
                continue
            grads = node._grad_fn(node.grad)
            if node is not self:
                owned.discard(id(node.grad))
            for parent, g, live in zip(node._parents, grads, node._live):
                if g is None or not live:
                    continue
                if parent.grad is None:
                    # adopt fresh buffers; copy views and buffers already handed out
                    if (
                        id(g) in owned
                        or not g.flags.owndata
                        or not g.flags.writeable
                        or g.dtype != parent.data.dtype
                        or g.shape != parent.data.shape
                    ):
                        g = np.array(g, dtype=parent.data.dtype, copy=True).reshape(parent.data.shape)
                    owned.add(id(g))
                    parent.grad = g
                else:
                    parent.grad += g
            if node is not self:
                node.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __sub__(self, other):
        return add(self, scalar_mul(_as_tensor(other), -1.0))

    def __truediv__(self, c):
        return scalar_mul(self, 1.0 / c)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op, tensors):
    if _state["strict"]:
        for t in tensors:
            if not np.all(np.isfinite(t.data)):
                raise NonFiniteError(f"{op}: non-finite input")


def _make(data, parents, grad_fn, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._op = op
    out._id = next(_ids)
    if out.requires_grad:
        out._parents = tuple(parents)
        # flags are captured now so a later un-freeze cannot leak gradient
        out._live = tuple(p.requires_grad for p in parents)
        out._grad_fn = grad_fn
    else:
        out._parents = ()
        out._live = ()
        out._grad_fn = None
    return out


def _suffix_broadcast(op, a, b):
    if a.shape == b.shape:
        return False
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return True
    raise ShapeError(op, a.shape, b.shape)


def _reduce_to(g, shape):
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + tuple(shape)).sum(axis=0) if lead else g


# ---------------------------------------------------------------- primitives


def add(a, b):
    """Elementwise sum; ``b`` may have the trailing shape of ``a`` (bias)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("add", (a, b))
    bcast = _suffix_broadcast("add", a, b)

    def grad_fn(g):
        return g, (_reduce_to(g, b.shape) if bcast else g)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("mul", (a, b))
    bcast = _suffix_broadcast("mul", a, b)

    def grad_fn(g):
        ga = g * b.data if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = g * a.data
            if bcast:
                gb = _reduce_to(gb, b.shape)
        return ga, gb

    return _make(a.data * b.data, (a, b), grad_fn, "mul")


def scalar_mul(a, c):
    a = _as_tensor(a)
    _check_finite("scalar_mul", (a,))
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,), "scalar_mul")


def matmul(a, b):
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either 2-D (shared weight) or
    has exactly the same batch axes as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("matmul", (a, b))
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if shared:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), grad_fn, "matmul")


def clamp(a, lo, hi):
    """Clip to [lo, hi]; gradient passes where lo <= a <= hi."""
    a = _as_tensor(a)
    _check_finite("clamp", (a,))
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clamp")


def sign(a):
    """Elementwise sign with sign(0) == 0; carries no gradient."""
    a = _as_tensor(a)
    _check_finite("sign", (a,))
    return _make(np.sign(a.data), (a,), lambda g: (None,), "sign")


def gelu(a):
    """GELU, tanh approximation."""
    a = _as_tensor(a)
    _check_finite("gelu", (a,))
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _make(out, (a,), grad_fn, "gelu")


def softmax(a):
    a = _as_tensor(a)
    _check_finite("softmax", (a,))
    e = np.exp(a.data - a.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (a,), grad_fn, "softmax")


def log_softmax(a):
    a = _as_tensor(a)
    _check_finite("log_softmax", (a,))
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), grad_fn, "log_softmax")


def layer_norm(x, gamma, beta, eps=LN_EPS):
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    _check_finite("layer_norm", (x, gamma, beta))
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        gg = _reduce_to(g * xhat, (d,)) if gamma.requires_grad else None
        gb = _reduce_to(g, (d,)) if beta.requires_grad else None
        return gx, gg, gb

    return _make(out, (x, gamma, beta), grad_fn, "layer_norm")


def l2_normalize(a, floor=NORM_FLOOR):
    """Divide each last-axis vector by max(norm, floor)."""
    a = _as_tensor(a)
    _check_finite("l2_normalize", (a,))
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    live = norm > floor
    denom = np.where(live, norm, floor).astype(a.dtype)
    y = a.data / denom

    def grad_fn(g):
        radial = np.where(live, (g * y).sum(axis=-1, keepdims=True), 0.0)
        return ((g - y * radial) / denom,)

    return _make(y, (a,), grad_fn, "l2_normalize")


def cosine_similarity_matrix(a, b):
    """Pairwise cosine similarity between rows of ``a`` (N×d) and ``b`` (M×d)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("cosine_similarity_matrix", a.shape, b.shape)
    return matmul(l2_normalize(a), transpose(l2_normalize(b), (1, 0)))


def gather_rows(a, idx):
    """Select rows ``a[idx]`` along axis 0 (repeats allowed)."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise ShapeError("gather_rows", a.shape, idx.shape)

    def grad_fn(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), grad_fn, "gather_rows")


def tsum(a, axis=None):
    a = _as_tensor(a)

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), grad_fn, "sum")


def mean(a, axis=None):
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    out = tsum(a, axis)
    return scalar_mul(out, 1.0 / n) if n else out


def log(a):
    a = _as_tensor(a)
    _check_finite("log", (a,))
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


# ---------------------------------------------------------------- structural


def reshape(a, shape):
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = _as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def index(a, idx):
    """Basic (slice/integer) indexing."""
    a = _as_tensor(a)

    def grad_fn(g):
        out = np.zeros_like(a.data)
        out[idx] = g
        return (out,)

    return _make(a.data[idx], (a,), grad_fn, "index")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or other[:axis] + other[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise ShapeError("concat", *(t.shape for t in tensors))
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn, "concat")


def broadcast_rows(a, n):
    """Repeat ``a`` along a new leading axis of length ``n``."""
    a = _as_tensor(a)
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return _make(out, (a,), lambda g: (g.sum(axis=0),), "broadcast_rows")


# ---------------------------------------------------------------- oracle & optimiser


def finite_diff_gradient(f, theta, h=1e-4, indices=None):
    """Central-difference gradient of scalar ``f`` at ``theta`` in float64.

    ``indices`` restricts evaluation to a subset of coordinates; the others
    are left at zero.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    theta = np.array(theta, dtype=np.float64).ravel()
    coords = range(theta.size) if indices is None else np.asarray(indices).ravel()
    grad = np.zeros_like(theta)
    for i in coords:
        old = theta[i]
        theta[i] = old + h
        fp = float(f(theta.copy()))
        theta[i] = old - h
        fm = float(f(theta.copy()))
        theta[i] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"finite_diff_gradient: non-finite value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def sgd_momentum_step(params, velocities, lr, momentum):
    """v <- momentum*v + grad; p <- p - lr*v; then clear grads.  In place."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must be in [0, 1)")
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {i} has no gradient")
    for p, v in zip(params, velocities):
        v *= v.dtype.type(momentum)
        v += p.grad
        p.data -= v.dtype.type(lr) * v
        p.grad = np.zeros_like(p.data)


@contextlib.contextmanager
def frozen(tensors):
    """Temporarily disable ``requires_grad`` on the given tensors."""
    tensors = list(tensors)
    flags = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, f in zip(tensors, flags):
            t.requires_grad = f
