"""A small float64 tensor with reverse-mode differentiation.

Only the operations needed by the MLP and small conv models are provided.
A graph is recorded as operations run (only when some input requires a
gradient); :func:`backward` orders it topologically and writes ``grad`` on
every leaf that requires one. Gradients are overwritten, never accumulated, so
calling :func:`backward` twice on the same loss yields identical gradients.
"""
import numpy as np

from . import kernels
from .errors import DimensionError, LabelError, NumericError, RankError


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self):
        return self._backward is None

    def item(self):
        if self.data.size != 1:
            raise RankError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    """Create an op output; record the graph edge only if it is needed."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    """Topologically ordered record of the nodes reachable from an output."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out):
        order, seen = [], set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def leaves(self):
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]


def backward(loss, leaves=()):
    """Populate ``grad`` for every leaf that requires it and feeds ``loss``.

    Leaves listed in ``leaves`` that are not connected to ``loss`` get a zero
    gradient.
    """
    if loss.data.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = np.array(g, dtype=np.float64, copy=True)
                grads[id(node)] = node.grad
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for leaf in leaves:
        if id(leaf) not in grads:
            leaf.grad = np.zeros_like(leaf.data)
    return tape


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape

    def _bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), _bw)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape

    def _bw(g):
        return _unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)

    return _make(a.data * b.data, (a, b), _bw)


def power(a, exponent):
    exponent = float(exponent)

    def _bw(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(a.data ** exponent, (a,), _bw)


def relu(x):
    mask = x.data > 0  # subgradient 0 at 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sum(x):  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x):
    shape, n = x.shape, x.data.size
    return _make(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flatten(x):
    return reshape(x, (x.shape[0], -1))


# ------------------------------------------------------------------- linear

def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def _bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), _bw)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear expects {weight.shape[1]} features, got {x.shape[1]}")

    def _bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    out = x.data @ weight.data.T
    if bias is None:
        return _make(out, (x, weight), _bw)
    return _make(out + bias.data, (x, weight, bias), _bw)


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """2-D cross-correlation of (N, C, H, W) input with (F, C, kh, kw) kernels."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d needs 4-D input and kernel, got {x.shape}, {kernel.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride {stride} / padding {padding}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"kernel has {kc} channels, input has {c}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})")
    ho = kernels.conv_output_size(h, kh, stride, padding)
    wo = kernels.conv_output_size(w, kw, stride, padding)
    cols = kernels.im2col(x.data, kh, kw, stride, padding)
    w2 = kernel.data.reshape(f, -1)
    out = (cols @ w2.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, f, 1, 1)
    out = np.ascontiguousarray(out)

    def _bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gx = kernels.col2im(g2 @ w2, x.shape, kh, kw, stride, padding) if x.requires_grad else None
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, _bw)


def maxpool2d(x, size=2, stride=None):
    stride = size if stride is None else stride
    if x.data.ndim != 4 or x.shape[2] < size or x.shape[3] < size:
        raise DimensionError(f"cannot max-pool {x.shape} with window {size}")
    out, arg = kernels.maxpool2d_forward(x.data, size, stride)
    shape = x.shape
    return _make(out, (x,), lambda g: (kernels.maxpool2d_backward(g, arg, shape, size, stride),))


# --------------------------------------------------------------------- loss

def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of (N, K) logits.

    ``labels`` is either an int array of N class indices or an (N, K) array of
    target distributions (soft labels).
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    logp = log_softmax(logits.data)
    if labels.ndim == 1:
        if labels.shape[0] != n:
            raise DimensionError(f"{labels.shape[0]} labels for {n} logit rows")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.floor(labels)):
                raise LabelError("hard labels must be integers")
            labels = labels.astype(np.int64)
        if n and (labels.min() < 0 or labels.max() >= k):
            raise LabelError(f"labels must lie in [0, {k})")
        target = np.zeros((n, k))
        target[np.arange(n), labels] = 1.0
        loss = -logp[np.arange(n), labels].mean()
    else:
        if labels.shape != (n, k):
            raise DimensionError(f"soft labels shape {labels.shape} != logits {logits.shape}")
        target = labels.astype(np.float64)
        loss = -(target * logp).sum(axis=1).mean()
    if not np.isfinite(loss):
        raise NumericError("non-finite cross-entropy")

    def _bw(g):
        return (float(g) * (np.exp(logp) - target) / n,)

    return _make(np.array(loss), (logits,), _bw)


# ------------------------------------------------------------------- oracle

def finite_diff_check(f, x, h=1e-5, coords=None):
    """Largest relative error between analytic and central-difference gradients.

    ``f`` maps a :class:`Tensor` to a scalar :class:`Tensor`. ``coords`` picks
    flat indices of ``x`` to probe (default: all of them). The error of one
    coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    backward(f(probe), [probe])
    analytic = probe.grad.reshape(-1)
    idx = range(base.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        plus = base.copy().reshape(-1)
        minus = plus.copy()
        plus[i] += h
        minus[i] -= h
        fp = f(Tensor(plus.reshape(base.shape))).item()
        fm = f(Tensor(minus.reshape(base.shape))).item()
        numeric = (fp - fm) / (2.0 * h)
        a = analytic[i]
        worst = max(worst, abs(a - numeric) / max(1e-8, abs(a) + abs(numeric)))
    return worst
