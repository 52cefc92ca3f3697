"""Dense tensors with reverse-mode automatic differentiation.

Data lives in flat row-major numpy buffers (float32 by default; float64 is
used for finite-difference gradient checking).  Every differentiable
operation records an OpNode carrying its parents and a backward closure;
backward() traces the nodes reachable from a scalar loss and replays them
in exact reverse execution order (see Tape).

Only what the model needs is implemented: no control-flow capture, no
higher-order derivatives, no views with shared gradients.
"""

import itertools
from contextlib import contextmanager

import numpy as np

from .errors import GraphError, ShapeError, TapeConsumedError

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_seq = itertools.count()

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class OpNode:
    """One executed operation: output, parents, and the backward closure."""

    __slots__ = ("seq", "op", "out", "parents", "backward_fn", "consumed")

    def __init__(self, op, out, parents, backward_fn):
        self.seq = next(_seq)
        self.op = op
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """N-dimensional array of reals with optional gradient accumulation."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

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

    def numpy(self):
        return self.data

    def detach(self):
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t.node = None
        return t

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; everything routes through the module-level primitives
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


class Parameter:
    """Named learnable tensor; trainable=False freezes it during optimization."""

    __slots__ = ("tensor", "name", "trainable")

    def __init__(self, data, name, trainable=True, dtype=None):
        self.tensor = Tensor(data, requires_grad=True, dtype=dtype)
        self.tensor.grad = np.zeros_like(self.tensor.data)
        self.name = name
        self.trainable = trainable

    @property
    def data(self):
        return self.tensor.data

    @property
    def shape(self):
        return self.tensor.shape

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.zero_grad()

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape}, trainable={self.trainable})"


def _wrap(data):
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = False
    t.grad = None
    t.node = None
    return t


def apply_op(op, out_data, parents, backward_fn):
    """Wrap a computed result as a Tensor, recording the op when needed.

    backward_fn(grad_out) must return one gradient array (or None) per
    parent, already shaped like that parent's data.
    """
    out = _wrap(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = OpNode(op, out, tuple(parents), backward_fn)
    return out


class Tape:
    """Operations reachable from a loss, ordered for reverse traversal."""

    def __init__(self, nodes):
        self.nodes = nodes  # descending execution order

    @classmethod
    def trace(cls, root):
        seen = set()
        nodes = []
        stack = [root.node]
        while stack:
            node = stack.pop()
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            for p in node.parents:
                if p.node is not None:
                    stack.append(p.node)
        nodes.sort(key=lambda n: n.seq, reverse=True)
        return cls(nodes)

    def run(self, seed_grad):
        self.nodes[0].out.grad = seed_grad
        adopted = set()  # buffer ids already owned by some tensor's grad
        for node in self.nodes:
            if node.consumed:
                raise TapeConsumedError(
                    f"operation {node.op!r} was already traversed; re-run the forward pass"
                )
            grad_out = node.out.grad
            if grad_out is None:
                node.consumed = True
                node.backward_fn = None
                node.parents = ()
                node.out = None
                continue
            grads = node.backward_fn(grad_out)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.data.shape:
                    raise GraphError(
                        f"{node.op}: gradient shape {g.shape} does not match parent shape {parent.data.shape}"
                    )
                if parent.grad is None:
                    # adopt the returned buffer when it is exclusively ours;
                    # views of grad_out are fine since that array dies below
                    owner = _buffer_owner(g)
                    if (
                        g.dtype == parent.data.dtype
                        and id(owner) not in adopted
                        and (g.flags.owndata or owner is grad_out)
                    ):
                        parent.grad = g
                        adopted.add(id(owner))
                    else:
                        parent.grad = np.array(g, dtype=parent.data.dtype)
                else:
                    parent.grad += g
            node.consumed = True
            node.out.grad = None  # free intermediate grads early
            # break the tensor<->node reference cycle so step garbage dies
            # by refcount instead of waiting on the cycle collector
            node.backward_fn = None
            node.parents = ()
            node.out = None


def backward(loss):
    """Populate gradients of everything reachable from a scalar loss."""
    if loss.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            g = np.ones_like(loss.data)
            loss.grad = g if loss.grad is None else loss.grad + g
        return
    if loss.node.consumed:
        raise TapeConsumedError("backward was already called on this forward pass")
    Tape.trace(loss).run(np.ones_like(loss.data))


# ---------------------------------------------------------------------------
# primitives


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return _wrap(np.asarray(x, dtype=like.dtype))


def _buffer_owner(a):
    while isinstance(a.base, np.ndarray):
        a = a.base
    return a


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b):
    b = _as_tensor(b, a)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return apply_op("add", out, (a, b), bw)


def sub(a, b):
    b = _as_tensor(b, a)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return apply_op("sub", out, (a, b), bw)


def mul(a, b):
    if not isinstance(b, Tensor):
        return scale(a, b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return apply_op("mul", out, (a, b), bw)


def div(a, b):
    b = _as_tensor(b, a)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return apply_op("div", out, (a, b), bw)


def scale(a, c):
    """Multiply by a python scalar."""
    c = float(c)
    out = a.data * c

    def bw(g):
        return (g * c,)

    return apply_op("scale", out, (a,), bw)


def shift(a, c):
    """Add a python scalar."""
    out = a.data + float(c)

    def bw(g):
        return (g,)

    return apply_op("shift", out, (a,), bw)


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return apply_op("matmul", out, (a, b), bw)


def relu(a):
    out = np.maximum(a.data, 0.0)

    def bw(g):
        return (g * (a.data > 0),)

    return apply_op("relu", out, (a,), bw)


def sqrt(a):
    out = np.sqrt(a.data)

    def bw(g):
        return (g * 0.5 / out,)

    return apply_op("sqrt", out, (a,), bw)


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(ax % ndim for ax in axes)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate reduction axes {axes}")
    return axes


def reduce_sum(a, axes=None, keepdims=False):
    axes = _norm_axes(axes, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            shape = list(a.data.shape)
            for ax in axes:
                shape[ax] = 1
            g = g.reshape(shape)
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False),)

    return apply_op("sum", np.asarray(out, dtype=a.dtype), (a,), bw)


def reduce_mean(a, axes=None, keepdims=False):
    axes = _norm_axes(axes, a.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims, dtype=a.dtype)

    def bw(g):
        if not keepdims:
            shape = list(a.data.shape)
            for ax in axes:
                shape[ax] = 1
            g = g.reshape(shape)
        return ((np.broadcast_to(g, a.data.shape) / count).astype(a.data.dtype, copy=False),)

    return apply_op("mean", np.asarray(out, dtype=a.dtype), (a,), bw)


def reshape(a, shape):
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.data.shape),)

    return apply_op("reshape", out, (a,), bw)


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return apply_op("transpose", out, (a,), bw)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty tensor list")
    axis = axis % tensors[0].ndim
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            i != axis and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(
                f"concat: shape {t.shape} incompatible with {tensors[0].shape} along axis {axis}"
            )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return apply_op("concat", out, tuple(tensors), bw)


def gather(a, index, axis=0):
    """Select rows along an axis by integer index array."""
    index = np.asarray(index)
    if not np.issubdtype(index.dtype, np.integer):
        raise ShapeError("gather index must be an integer array")
    if index.size and (index.min() < 0 or index.max() >= a.shape[axis]):
        raise IndexError(
            f"gather index out of range [0, {a.shape[axis]}) along axis {axis}"
        )
    out = np.take(a.data, index, axis=axis)

    def bw(g):
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, axis, 0)
        gm = np.moveaxis(g, tuple(range(axis, axis + index.ndim)), tuple(range(index.ndim)))
        np.add.at(moved, index, gm)
        return (ga,)

    return apply_op("gather", out, (a,), bw)


def softmax(a, axis=-1):
    """Numerically stable softmax; slices along `axis` sum to one."""
    axis = axis % a.ndim
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return apply_op("softmax", out, (a,), bw)


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer class targets.

    Computed in log space (log-sum-exp), so saturated logits stay finite.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch, classes] logits, got {logits.shape}")
    targets = np.asarray(targets)
    n, c = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} logit rows but targets shape {targets.shape}")
    if not np.issubdtype(targets.dtype, np.integer):
        raise ShapeError("cross_entropy targets must be integers")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        bad = int(targets[(targets < 0) | (targets >= c)][0])
        raise IndexError(f"target class {bad} out of range for {c} classes")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    picked = x[np.arange(n), targets]
    out = np.asarray((lse - picked).mean(dtype=x.dtype), dtype=x.dtype)

    def bw(g):
        p = np.exp(x - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), targets] -= 1.0
        return (g * p / n,)

    return apply_op("cross_entropy", out, (logits,), bw)


def batch_norm(x, gamma, beta, running_mean, running_var, train, eps=1e-5, momentum=0.1):
    """Per-channel batch normalization over an [N, C, H, W] tensor.

    Train mode normalizes with biased batch statistics and updates the
    running buffers in place (unbiased variance, momentum-weighted).  Eval
    mode uses the running buffers; before any train-mode update those are
    the documented defaults mean 0 / var 1.  Fused forward/backward: the
    standard normalization gradient, validated by finite differences.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    axes = (0, 2, 3)
    gm = gamma.data.reshape(1, c, 1, 1)
    bt = beta.data.reshape(1, c, 1, 1)
    if train:
        count = n * h * w
        if count < 2:
            raise ShapeError(f"batch_norm train mode needs >= 2 values per channel, got {count}")
        mu = x.data.mean(axis=axes, keepdims=True, dtype=x.dtype)
        diff = x.data - mu
        var = np.mean(diff * diff, axis=axes, keepdims=True, dtype=x.dtype)
        invstd = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
        xhat = diff * invstd
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * (var.reshape(c) * (count / max(count - 1, 1)))

        def bw(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gm
            m1 = dxhat.mean(axis=axes, keepdims=True, dtype=x.dtype)
            m2 = (dxhat * xhat).mean(axis=axes, keepdims=True, dtype=x.dtype)
            dx = invstd * (dxhat - m1 - xhat * m2)
            return (
                dx.astype(x.dtype, copy=False),
                dgamma.astype(gamma.dtype, copy=False),
                dbeta.astype(beta.dtype, copy=False),
            )

    else:
        invstd = 1.0 / np.sqrt(
            running_var.reshape(1, c, 1, 1) + np.asarray(eps, dtype=x.dtype)
        )
        xhat = (x.data - running_mean.reshape(1, c, 1, 1)) * invstd
        scale_ = gm * invstd

        def bw(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            return (
                (g * scale_).astype(x.dtype, copy=False),
                dgamma.astype(gamma.dtype, copy=False),
                dbeta.astype(beta.dtype, copy=False),
            )

    out = xhat * gm + bt
    return apply_op("batch_norm", out, (x, gamma, beta), bw)
