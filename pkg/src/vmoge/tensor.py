"""A small reverse-mode differentiation tape over dense float64 arrays.

Every learned component of the model is written against :class:`Tensor`.
Operations record their inputs and a closure mapping the output adjoint to
input adjoints; :func:`backward` walks the tape in reverse topological
order and accumulates adjoints into the leaves.
"""
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from . import kernels

LEAKY_SLOPE = 0.01
LN_EPS = 1e-5

_grad_enabled = True


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


@contextmanager
def no_grad():
    """Evaluate without recording a tape."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "terms")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents = ()
        self._backward = None
        self.op = None
        self.terms = None  # optional addends of a scalar, used by grad_check

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
    def is_leaf(self):
        return not self._parents

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag})"

    __array_ufunc__ = None

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


DiffValue = Tensor


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, back, op):
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = back
    return out


def backward(root):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    adj = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        grads = node._backward(g)
        for p, gp in zip(node._parents, grads):
            if gp is None or not p.requires_grad:
                continue
            k = id(p)
            prev = adj.get(k)
            adj[k] = gp if prev is None else prev + gp


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _bshape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, (a, b), back, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _bshape("div", a, b)
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), back, "div")


def neg(a):
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a):
    a = as_tensor(a)
    out = expit(a.data)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(a):
    """log(sigmoid(a)) = -softplus(-a), stable for large |a|."""
    a = as_tensor(a)
    out = -np.logaddexp(0.0, -a.data)
    return _record(out, (a,), lambda g: (g * expit(-a.data),), "log_sigmoid")


def softplus(a):
    a = as_tensor(a)
    return _record(np.logaddexp(0.0, a.data), (a,), lambda g: (g * expit(a.data),), "softplus")


def leaky_relu(a, slope=LEAKY_SLOPE):
    a = as_tensor(a)
    pos = a.data > 0
    mult = np.where(pos, 1.0, slope)
    return _record(a.data * mult, (a,), lambda g: (g * mult,), "leaky_relu")


def clamp(a, lo, hi):
    """Clip to [lo, hi]; zero adjoint outside the interval."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


# -- reductions / softmax ------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return mul(tsum(a, axes, keepdims), 1.0 / n)


def amax(a, axis, keepdims=False):
    """Max over one axis; the adjoint goes to the first maximizer."""
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, g, axis=axis)
        return (ga,)

    return _record(out, (a,), back, "max")


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), back, "softmax")


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _record(
        out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax"
    )


def logsumexp(a, axis=-1, keepdims=False):
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m)
    tot = s.sum(axis=axis, keepdims=True)
    out = m + np.log(tot)
    p = s / tot
    if not keepdims:
        out = np.squeeze(out, axis)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * p,)

    return _record(out, (a,), back, "logsumexp")


def trace(a):
    """Trace over the last two axes."""
    a = as_tensor(a)
    n = a.shape[-1]
    if a.ndim < 2 or a.shape[-2] != n:
        raise ShapeError(f"trace: needs square trailing axes, got {a.shape}")
    eye = np.eye(n)

    def back(g):
        return (np.asarray(g)[..., None, None] * eye,)

    return _record(np.trace(a.data, axis1=-2, axis2=-1), (a,), back, "trace")


# -- shape ---------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return _record(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, i, j):
    a = as_tensor(a)
    return _record(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1 :] != ts[0].shape[:ax] + ts[0].shape[ax + 1 :]:
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _record(
        np.concatenate([t.data for t in ts], axis=ax),
        tuple(ts),
        lambda g: tuple(np.split(g, cuts, axis=ax)),
        "concat",
    )


# -- linear algebra ------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, m = b.shape
                ad = a.data
                if ad.ndim < g.ndim:
                    ad = np.broadcast_to(ad, g.shape[:-2] + ad.shape[-2:])
                gb = ad.reshape(-1, k).T @ g.reshape(-1, m)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(a.data @ b.data, (a, b), back, "matmul")


# -- network primitives --------------------------------------------------


def layer_norm(x, gain, bias, eps=LN_EPS):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} vs gain {gain.shape} / bias {bias.shape}")
    out, xhat, rstd = kernels.layernorm_forward(x.data, gain.data, bias.data, eps)

    def back(g):
        return kernels.layernorm_backward(np.ascontiguousarray(g), xhat, rstd, gain.data)

    return _record(out, (x, gain, bias), back, "layer_norm")


def conv1d(x, w, b, stride):
    """(M, T) signals, (D, k) filters, (D,) bias -> (M, L, D) feature maps."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or b.shape != (w.shape[0],):
        raise ShapeError(f"conv1d: input {x.shape}, kernel {w.shape}, bias {b.shape}")
    if x.shape[1] < w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} shorter than kernel {w.shape}")
    xd = np.ascontiguousarray(x.data)
    out = kernels.conv1d_forward(xd, w.data, b.data, stride)

    def back(g):
        return kernels.conv1d_backward(np.ascontiguousarray(g), xd, w.data, stride, x.requires_grad)

    return _record(out, (x, w, b), back, "conv1d")


def attention(q, k, v, heads, return_weights=False):
    """Multi-head scaled dot-product self-attention on (M, L, D) projections."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 3 or q.shape != k.shape or q.shape != v.shape or q.shape[2] % heads:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}, heads {heads}")
    qd, kd, vd = (np.ascontiguousarray(t.data) for t in (q, k, v))
    ctx, p = kernels.mha_forward(qd, kd, vd, heads)

    def back(g):
        return kernels.mha_backward(np.ascontiguousarray(g), qd, kd, vd, p, heads)

    out = _record(ctx, (q, k, v), back, "attention")
    return (out, p) if return_weights else out


def maxpool2(x):
    """Non-overlapping max pool of factor 2 along axis 1 of an (M, L, D) input."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"maxpool2: expected (M, L, D), got {x.shape}")
    L = x.shape[1]
    out, idx = kernels.maxpool2_forward(np.ascontiguousarray(x.data))
    return _record(
        out, (x,), lambda g: (kernels.maxpool2_backward(np.ascontiguousarray(g), idx, L),), "maxpool2"
    )


# -- parameters ----------------------------------------------------------


def glorot_uniform(rng, shape, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


class ParameterStore:
    """Named parameters in insertion order, plus optimizer moment buffers."""

    def __init__(self):
        self._params = {}
        self.m = {}
        self.v = {}
        self.t = 0
        self.skipped = 0

    def add(self, name, value):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = p
        return p

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def n_values(self):
        return sum(p.size for p in self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.grad = np.zeros_like(p.data)

    def state_dict(self):
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_state_dict(self, state):
        missing = set(self._params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, p in self._params.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"{k}: stored {state[k].shape} vs model {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def save(self, path):
        np.savez(path, **self.state_dict())

    def load(self, path):
        with np.load(path) as f:
            self.load_state_dict({k: f[k] for k in f.files})


def _addends(root):
    if root.terms is None:
        return np.array([float(root.data)])
    return np.array([float(t) for t in root.terms])


def grad_check(f, params, eps=1e-5):
    """Largest relative gap between analytic and central-difference gradients.

    ``f`` is a zero-argument callable returning a scalar Tensor built from
    ``params`` (a ParameterStore or an iterable of (name, Tensor) pairs).
    The error per entry is |a - c| / (|a| + |c| + 1e-12). If the root
    carries ``terms`` (scalar addends summing to it), the difference is
    taken term by term, which avoids rounding small changes into the
    ulp of a large total.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    pairs = list(params.items()) if hasattr(params, "items") else list(params)
    for _, p in pairs:
        p.grad = np.zeros_like(p.data)
    root = f()
    if not np.all(np.isfinite(root.data)):
        raise NonFiniteError("grad_check: objective is not finite")
    backward(root)
    worst = 0.0
    with no_grad():
        for name, p in pairs:
            analytic = p.grad
            if not np.all(np.isfinite(analytic)):
                raise NonFiniteError(f"grad_check: non-finite analytic gradient in {name}")
            flat = p.data.reshape(-1)
            an = analytic.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = _addends(f())
                flat[i] = orig - eps
                fm = _addends(f())
                flat[i] = orig
                if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
                    raise NonFiniteError(f"grad_check: non-finite objective perturbing {name}[{i}]")
                num = float(np.sum(fp - fm)) / (2 * eps)
                err = abs(an[i] - num) / (abs(an[i]) + abs(num) + 1e-12)
                worst = max(worst, err)
    return worst
