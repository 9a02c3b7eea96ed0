"""Dense float64 tensors with a dynamic reverse-mode tape.

Every differentiable op builds its output with ``_make``, recording the
parent tensors and a closure mapping the output gradient to one gradient
per parent. ``backward`` walks the graph in reverse topological order.
The graph is rebuilt on every forward pass, so two dropout-distinct passes
over the same parameters produce two independent tapes.
"""
import contextlib
import threading

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError

DTYPE = np.float64
KL_CLAMP = 1e-12

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run the body without recording anything on the tape."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """An n-dimensional float64 array that may sit on the autodiff tape.

    ``grad`` is ``None`` until a backward pass reaches the tensor, after
    which it holds an array of the same shape. Calling ``backward`` again
    without ``zero_grad`` adds to it.
    """

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------
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
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    # -- operator sugar ------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

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


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# tape traversal


def _topo_order(root):
    order, seen = [], set()
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a):
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def masked_fill(x, mask, value):
    """Replace entries where ``mask`` is true by ``value``; those entries get no gradient."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    return _make(np.where(mask, value, x.data), (x,), lambda g: (np.where(mask, 0.0, g),))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw)


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x, shape):
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x, a1, a2):
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def index_select(x, index):
    """Rows of ``x`` picked by an integer array along axis 0."""
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(x.data[index], (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), bw)


def embedding_lookup(table, ids):
    """Gather rows of ``table`` (V x d); gradients scatter-add back into it."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding ids out of range [0, {table.shape[0]})")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), bw)


# ---------------------------------------------------------------------------
# normalisation and probability


def _check_finite(x, op):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite input")


def softmax(x, axis=-1):
    """Max-subtracted softmax along ``axis``."""
    _check_finite(x.data, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis=-1):
    _check_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), bw)


def logsumexp(x, axis=-1):
    """log(sum(exp(x))) along ``axis``; ``-inf`` entries are allowed and ignored."""
    m = x.data.max(axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise NumericError("logsumexp: a slice has no finite entry")
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    w = e / s
    return _make(out, (x,), lambda g: (np.expand_dims(g, axis) * w,))


def kl_divergence(p, q, eps=KL_CLAMP):
    """Sum of p * log(p / q) over every element, q clamped below by ``eps``.

    Both arguments must be probability vectors along their last axis.
    Zero entries of ``p`` contribute nothing.
    """
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence: shapes {p.shape} and {q.shape} differ")
    for name, t in (("p", p), ("q", q)):
        if np.any(t.data < 0) or not np.allclose(t.data.sum(axis=-1), 1.0, rtol=0, atol=1e-9):
            raise ContractError(f"kl_divergence: {name} is not a probability vector")
    qc = np.maximum(q.data, eps)
    support = p.data > 0
    logp = np.log(np.where(support, p.data, 1.0))
    out = np.where(support, p.data * (logp - np.log(qc)), 0.0).sum()

    def bw(g):
        gp = np.where(support, logp - np.log(qc) + 1.0, 0.0)
        gq = np.where(q.data >= eps, -p.data / qc, 0.0)
        return g * gp, g * gq

    return _make(out, (p, q), bw)


def kl_divergence_logits(a, b, axis=-1):
    """KL(softmax(a) || softmax(b)) per slice, computed in log space (no clamp)."""
    la, lb = log_softmax(a, axis), log_softmax(b, axis)
    return sum_(exp(la) * (la - lb), axis=axis)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gxhat = g * gamma.data
        gx = inv / n * (n * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), bw)


def cross_entropy_with_logits(logits, targets, mask=None, label_smoothing=0.0):
    """Token cross entropy averaged over positions where ``mask`` is true.

    With smoothing ``eps`` each position's loss is
    ``(1 - eps) * nll + eps * mean_j(-log p_j)``.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if not 0.0 <= label_smoothing < 1.0:
        raise ConfigError(f"label_smoothing must be in [0, 1), got {label_smoothing}")
    mask = np.ones(targets.shape, bool) if mask is None else np.asarray(mask, dtype=bool)
    count = mask.sum()
    if count == 0:
        raise ContractError("cross_entropy: every position is masked")
    _check_finite(logits.data, "cross_entropy")
    vsize = logits.shape[-1]
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    per_pos = (1.0 - label_smoothing) * nll - label_smoothing * logp.mean(axis=-1)
    out = (per_pos * mask).sum() / count

    def bw(g):
        gl = np.exp(logp) - label_smoothing / vsize
        np.put_along_axis(gl, targets[..., None],
                          np.take_along_axis(gl, targets[..., None], axis=-1) - (1.0 - label_smoothing),
                          axis=-1)
        return (gl * (mask[..., None] * (g / count)),)

    return _make(out, (logits,), bw)


# ---------------------------------------------------------------------------
# randomness


class RngState:
    """Seeded Philox stream; ``substream`` derives independent child streams.

    The stream is fully determined by ``seed`` and the ``stream`` key path,
    so e.g. ``RngState(7).substream(12, 1)`` always yields the same numbers
    regardless of what other streams have drawn.
    """

    algorithm = "philox4x64"

    def __init__(self, seed, stream=()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = tuple(int(k) for k in stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def substream(self, *key):
        return RngState(self.seed, self.stream + tuple(key))

    def random(self, shape=None):
        return self.generator.random(shape)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def choice(self, pool, size, replace=True):
        return self.generator.choice(pool, size=size, replace=replace)

    def permutation(self, n):
        return self.generator.permutation(n)

    def normal(self, scale=1.0, size=None):
        return self.generator.normal(0.0, scale, size)

    def __repr__(self):
        return f"RngState(seed={self.seed}, stream={self.stream})"


def dropout(x, rate, rng, training):
    """Inverted dropout: zero each entry with probability ``rate``, scale survivors by 1/(1-rate).

    Outside training, or with rate 0, ``x`` is returned unchanged.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    scale = keep / (1.0 - rate)
    out = _make(x.data * scale, (x,), lambda g: (g * scale,))
    out.dropout_mask = keep
    return out
