"""Dense tensors with tape-based reverse-mode differentiation.

The op set is closed: matmul, elementwise add/sub/mul/neg, broadcasting,
softmax, log, exp, sum/mean, concat, slicing, ReLU, tanh, sigmoid,
L2-normalize and layer-norm, plus the layout ops reshape and transpose.
Everything else in the package is composed from these.

The tape lives on the output tensors themselves: each op records its
parents and a closure that maps the output gradient to parent gradients.
``backward`` walks the graph once in reverse topological order, accumulates
into leaf ``.grad`` buffers and then drops the closures.
"""

import contextlib

import numpy as np

from . import kernels


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """A non-finite value reached an op that requires finite input."""


_grad_enabled = True

# op name -> gradient multiplier; used by the gradient-check harness to
# plant a known fault in one backward rule
_fault_scale = {}


def set_fault(op_name, scale=2.0):
    _fault_scale[op_name] = scale


def clear_faults():
    _fault_scale.clear()


def _scaled(op_name, g):
    s = _fault_scale.get(op_name)
    return g if s is None else g * s


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = None

    # -- basic properties -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operator sugar ---------------------------------------------------

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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not part of the op set")
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def backward(self, retain_graph=False):
        backward(self, retain_graph=retain_graph)


class Parameter(Tensor):
    """A trainable leaf tensor. ``name`` is filled in by the owning module."""

    __slots__ = ("name",)

    def __init__(self, data, name=""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _coerce_pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def _make(data, parents, backward_fn, op):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _coerce_pair(a, b)

    def bw(g):
        g = _scaled("add", g)
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _coerce_pair(a, b)

    def bw(g):
        g = _scaled("sub", g)
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-_scaled("neg", g),), "neg")


def mul(a, b):
    a, b = _coerce_pair(a, b)

    def bw(g):
        g = _scaled("mul", g)
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def matmul(a, b):
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise DimensionError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}") from exc

    def bw(g):
        g = _scaled("matmul", g)
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False):
    def bw(g):
        return (_expand_reduced(_scaled("sum", g), a.shape, axis, keepdims).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(np.size(out), 1)

    def bw(g):
        g = _scaled("mean", g) / count
        return (_expand_reduced(g, a.shape, axis, keepdims).copy(),)

    return _make(out, (a,), bw, "mean")


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (_scaled("exp", g) * out,), "exp")


def log(a, floor=None):
    """Natural log. With ``floor`` the input is clamped from below first and
    the gradient is zero wherever the clamp is active."""
    x = a.data
    if floor is not None:
        active = x < floor
        x = np.maximum(x, floor)
    else:
        active = None

    def bw(g):
        gx = _scaled("log", g) / x
        if active is not None:
            gx = np.where(active, 0.0, gx)
        return (gx,)

    return _make(np.log(x), (a,), bw, "log")


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (_scaled("relu", g) * mask,), "relu")


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (_scaled("tanh", g) * (1.0 - out * out),), "tanh")


def sigmoid(a):
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _make(out, (a,), lambda g: (_scaled("sigmoid", g) * out * (1.0 - out),), "sigmoid")


def _rows(x):
    return x.reshape(-1, x.shape[-1])


def softmax(a, axis=-1):
    """Softmax along ``axis`` with per-row max subtraction."""
    if not np.isfinite(a.data).all():
        raise NumericError("softmax received non-finite input")
    moved = axis not in (-1, a.ndim - 1)
    x = np.moveaxis(a.data, axis, -1) if moved else a.data
    y = kernels.softmax_fwd(_rows(x)).reshape(x.shape)

    def bw(g):
        g = _scaled("softmax", g)
        gm = np.moveaxis(g, axis, -1) if moved else g
        gx = kernels.softmax_bwd(_rows(y), _rows(gm)).reshape(y.shape)
        return (np.moveaxis(gx, -1, axis) if moved else gx,)

    out = np.moveaxis(y, -1, axis) if moved else y
    return _make(out, (a,), bw, "softmax")


def softmax_rows(x):
    """Row-wise softmax of a matrix (each row sums to 1)."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=-1)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x = _rows(a.data)
    y, xhat, rstd = kernels.layernorm_fwd(x, gamma.data, beta.data, eps)

    def bw(g):
        g = _scaled("layer_norm", g)
        dx, dgamma, dbeta = kernels.layernorm_bwd(_rows(g), xhat, rstd, gamma.data)
        return dx.reshape(a.shape), dgamma, dbeta

    return _make(y.reshape(a.shape), (a, gamma, beta), bw, "layer_norm")


def l2_normalize(a, axis=-1, eps=1e-12):
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x / denom

    def bw(g):
        g = _scaled("l2_normalize", g)
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - y * dot) / denom,)

    return _make(y, (a,), bw, "l2_normalize")


# ---------------------------------------------------------------------------
# layout
# ---------------------------------------------------------------------------


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    edges = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        g = _scaled("concat", g)
        index = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(edges[:-1], edges[1:]):
            index[ax] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return tuple(grads)

    return _make(out, tuple(tensors), bw, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % (tensors[0].ndim + 1)
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors]
    return concat(expanded, axis=ax)


def getitem(a, index):
    out = a.data[index]
    fancy = isinstance(index, (np.ndarray, list)) or (
        isinstance(index, tuple) and any(isinstance(i, (np.ndarray, list)) for i in index)
    )

    def bw(g):
        g = _scaled("slice", g)
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.array(out, copy=True) if fancy else out, (a,), bw, "slice")


def reshape(a, shape):
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, ax1, ax2):
    return _make(
        np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "transpose"
    )


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo_order(root):
    order = []
    seen = set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root, retain_graph=False):
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf that requires it.

    ``root`` must be a scalar. Leaf gradients accumulate across calls; the
    tape of intermediate nodes is released unless ``retain_graph`` is set.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    if root._op == "freed":
        raise RuntimeError("graph already released; pass retain_graph=True to backward twice")
    order = _topo_order(root)
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node._op == "freed":
                raise RuntimeError("graph reuses a tensor whose tape was already released")
            if node.grad is None:
                node.grad = np.array(g, dtype=node.data.dtype, copy=True)
            else:
                node.grad += g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not retain_graph:
            node._backward = None
            node._parents = ()
            node._op = "freed"

