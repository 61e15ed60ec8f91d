"""Dense N-D tensors with reverse-mode automatic differentiation.

The graph is define-by-run: every operation that touches a tensor requiring
gradients records a node, and ``backward`` on a scalar loss replays the tape
in reverse topological order. There is no graph reuse and no fusion; the tape
is rebuilt on every forward pass.

Two pieces of global state are exposed as context managers:

* ``precision("f64")`` switches newly created tensors to 64-bit (used by the
  gradient-check suite); the default is 32-bit.
* ``mac_tally()`` enables the multiply-accumulate counter. Only matrix
  products and depthwise convolutions are tallied; activations, additions and
  normalization divides are not, matching the analytic cost model's
  accounting.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_ACTIVE_TALLY = None


# ---------------------------------------------------------------------------
# global modes


@contextmanager
def precision(mode):
    """Temporarily set the dtype of newly created tensors ("f32" or "f64")."""
    global _DEFAULT_DTYPE
    if mode not in ("f32", "f64"):
        raise ConfigurationError(f"precision must be 'f32' or 'f64', got {mode!r}")
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.float32 if mode == "f32" else np.float64
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def no_grad():
    """Disable tape recording; results of ops inside never require gradients."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class MacTally:
    """Running count of multiply-accumulate operations, by kind."""

    def __init__(self):
        self.by_kind = {}

    def add(self, kind, n):
        self.by_kind[kind] = self.by_kind.get(kind, 0) + int(n)

    def total(self):
        return sum(self.by_kind.values())


@contextmanager
def mac_tally():
    """Enable MAC instrumentation and yield the tally object."""
    global _ACTIVE_TALLY
    prev = _ACTIVE_TALLY
    _ACTIVE_TALLY = MacTally()
    try:
        yield _ACTIVE_TALLY
    finally:
        _ACTIVE_TALLY = prev


def macs_executed():
    """Total MACs recorded by the active tally; error when instrumentation is off."""
    if _ACTIVE_TALLY is None:
        raise ContractError("MAC instrumentation is not enabled; wrap the call in mac_tally()")
    return _ACTIVE_TALLY.total()


# ---------------------------------------------------------------------------
# tensor and tape


class Tensor:
    """N-D array of floats plus an optional tape node.

    ``data`` is always a numpy float32/float64 array. ``grad`` is populated by
    ``backward`` and accumulates across calls until reset to None.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- introspection ------------------------------------------------------

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

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        """A view of the same data with no tape attachment."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(data, parents, backward_fn):
    """Create an op result, attaching a tape node only when gradients flow."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


def backward(loss):
    """Reverse sweep from a scalar loss, accumulating into ``grad`` fields."""
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # iterative post-order DFS: deep graphs would blow the recursion limit
    topo, visited, stack = [], set(), [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accumulate(node, g)  # leaf
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] += pg
            else:
                grads[id(parent)] = np.array(pg, copy=True)


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
#
# Python-number operands take a scalar fast path instead of being wrapped as
# tensors: numpy then keeps the array's dtype while the scalar retains full
# precision, so 64-bit gradient-check graphs see exact constants.


def _is_scalar(x):
    return isinstance(x, (int, float))


def add(a, b):
    if _is_scalar(a):
        a, b = b, a
    if _is_scalar(b):
        a = as_tensor(a)
        return _make(a.data + b, (a,), lambda g: (g,))
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    if _is_scalar(b):
        a = as_tensor(a)
        return _make(a.data - b, (a,), lambda g: (g,))
    if _is_scalar(a):
        b = as_tensor(b)
        return _make(a - b.data, (b,), lambda g: (-g,))
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    if _is_scalar(a):
        a, b = b, a
    if _is_scalar(b):
        a = as_tensor(a)
        return _make(a.data * b, (a,), lambda g: (g * b,))
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    if _is_scalar(b):
        return mul(a, 1.0 / b)
    if _is_scalar(a):
        b = as_tensor(b)
        return _make(a / b.data, (b,), lambda g: (-g * a / (b.data * b.data),))
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise DimensionError(f"div: shapes {a.shape} and {b.shape} do not broadcast")
    return _make(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def power(x, p):
    x = as_tensor(x)
    if not isinstance(p, int) or p < 1:
        raise ConfigurationError(f"power expects a positive integer exponent, got {p!r}")
    data = x.data**p
    return _make(data, (x,), lambda g: (g * p * x.data ** (p - 1),))


def exp(x):
    x = as_tensor(x)
    data = np.exp(x.data)
    return _make(data, (x,), lambda g: (g * data,))


def log(x):
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    x = as_tensor(x)
    data = np.sqrt(x.data)
    return _make(data, (x,), lambda g: (g * 0.5 / data,))


def relu(x):
    x = as_tensor(x)
    return _make(np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),))


def tanh(x):
    x = as_tensor(x)
    data = np.tanh(x.data)
    return _make(data, (x,), lambda g: (g * (1.0 - data * data),))


def sigmoid(x):
    x = as_tensor(x)
    z = np.exp(-np.abs(x.data))
    data = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _make(data, (x,), lambda g: (g * data * (1.0 - data),))


def silu(x):
    x = as_tensor(x)
    return mul(x, sigmoid(x))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh-approximation GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    x = as_tensor(x)
    inner = tanh(mul(add(x, mul(power(x, 3), 0.044715)), _GELU_C))
    return mul(mul(x, add(inner, 1.0)), 0.5)


def clip(x, lo, hi):
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    x = as_tensor(x)
    data = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)
    return _make(data, (x,), lambda g: (g * mask,))


def clamp_magnitude(x, floor):
    """Push values with |x| < floor out to +-floor (zero counts as positive).

    Gradient is zero on clamped entries, mirroring ``clip``.
    """
    x = as_tensor(x)
    keep = np.abs(x.data) >= floor
    signs = np.where(x.data >= 0, 1.0, -1.0)
    data = np.where(keep, x.data, signs * floor).astype(x.dtype)
    return _make(data, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(data, (x,), back)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swap_last(x):
    """Transpose the trailing two axes (batch dims untouched)."""
    x = as_tensor(x)
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return transpose(x, axes)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), back)


def getitem(x, idx):
    x = as_tensor(x)
    data = x.data[idx]

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(data, (x,), back)


def repeat(x, repeats, axis):
    """np.repeat along one axis; the gradient sums the repeated copies."""
    x = as_tensor(x)
    data = np.repeat(x.data, repeats, axis=axis)
    ax = axis % x.ndim

    def back(g):
        shape = x.shape[:ax] + (x.shape[ax], repeats) + x.shape[ax + 1 :]
        return (g.reshape(shape).sum(axis=ax + 1),)

    return _make(data, (x,), back)


def take_rows(table, indices):
    """Row lookup into an embedding table; gradient scatter-adds."""
    table = as_tensor(table)
    indices = np.asarray(indices, dtype=np.int64)
    data = table.data[indices]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, indices, g)
        return (gt,)

    return _make(data, (table,), back)


# ---------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dimensions do not broadcast, {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)
    if _ACTIVE_TALLY is not None:
        m, k = a.shape[-2], a.shape[-1]
        n = b.shape[-1]
        _ACTIVE_TALLY.add("matmul", int(np.prod(batch, dtype=np.int64)) * m * k * n)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(data, (a, b), back)


def conv2d_depthwise(x, weight, bias=None):
    """Per-channel 2-D cross-correlation with same-size zero padding.

    x: [b, c, h, w]; weight: [c, 1, k, k]; bias: [c] or None. No channel
    mixing: channel c of the output sees only channel c of the input.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d_depthwise: need 4-D x and weight, got {x.shape}, {weight.shape}")
    b, c, h, w = x.shape
    cw, one, k, k2 = weight.shape
    if cw != c or one != 1 or k != k2:
        raise DimensionError(f"conv2d_depthwise: weight {weight.shape} incompatible with input {x.shape}")
    if k % 2 == 0:
        raise ConfigurationError(f"depthwise kernel size must be odd, got {k}")
    pad = k // 2
    xpad = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros_like(x.data)
    wd = weight.data
    for u in range(k):
        for v in range(k):
            out += wd[:, 0, u, v][None, :, None, None] * xpad[:, :, u : u + h, v : v + w]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c,):
            raise DimensionError(f"conv2d_depthwise: bias shape {bias.shape} != ({c},)")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    if _ACTIVE_TALLY is not None:
        _ACTIVE_TALLY.add("conv", b * c * h * w * k * k)

    def back(g):
        gxpad = np.zeros_like(xpad)
        gw = np.zeros_like(wd)
        for u in range(k):
            for v in range(k):
                gxpad[:, :, u : u + h, v : v + w] += wd[:, 0, u, v][None, :, None, None] * g
                gw[:, 0, u, v] = (xpad[:, :, u : u + h, v : v + w] * g).sum(axis=(0, 2, 3))
        gx = gxpad[:, :, pad : pad + h, pad : pad + w]
        if bias is not None:
            return (gx, gw, g.sum(axis=(0, 2, 3)))
        return (gx, gw)

    return _make(out, tuple(parents), back)


def softmax(x, axis=-1):
    """Numerically stable softmax; rows along ``axis`` sum to one."""
    x = as_tensor(x)
    shift = Tensor(x.data.max(axis=axis, keepdims=True))  # constant: gradient is invariant
    e = exp(sub(x, shift))
    return div(e, sum_(e, axis, keepdims=True))


def layernorm(x, axis=-1, eps=1e-6):
    """Normalize to zero mean / unit variance along ``axis``; no affine part."""
    if eps <= 0:
        raise ConfigurationError(f"layernorm eps must be positive, got {eps}")
    x = as_tensor(x)
    mu = mean(x, axis, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis, keepdims=True)
    return div(xc, sqrt(add(var, eps)))


# ---------------------------------------------------------------------------
# optimizer


def adamw_update(data, grad, m, v, step, lr, beta1, beta2, eps, weight_decay):
    """One decoupled-weight-decay Adam update, in place on data/m/v."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    data -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * data)


class AdamW:
    """AdamW over a parameter store; deterministic given identical inputs."""

    def __init__(self, store, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        self.store = store
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {path: np.zeros_like(p.data) for path, p in store.items()}
        self.v = {path: np.zeros_like(p.data) for path, p in store.items()}

    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        for path, p in self.store.items():
            if p.grad is None:
                continue
            adamw_update(
                p.data, p.grad, self.m[path], self.v[path], self.step_count,
                self.lr, b1, b2, self.eps, self.weight_decay,
            )

    def zero_grad(self):
        for _, p in self.store.items():
            p.grad = None

    def state_dict(self):
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def load_state_dict(self, state):
        self.step_count = int(state["step"])
        for path in self.m:
            self.m[path] = np.array(state["m"][path], dtype=self.m[path].dtype)
            self.v[path] = np.array(state["v"][path], dtype=self.v[path].dtype)


# ---------------------------------------------------------------------------
# initialization


def trunc_normal(shape, std, rng):
    """Normal(0, std) resampled until every draw lies within 2 std."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2.0 * std
    return out.astype(_DEFAULT_DTYPE)
