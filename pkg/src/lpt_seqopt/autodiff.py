"""A small reverse-mode autodiff tape over numpy arrays.

Only the operations the model needs are provided. Values are computed
eagerly; a node keeps its parents and a backward closure only when some
input requires a gradient, so inference-only passes build no graph.
"""

import numpy as np

from . import kernels


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def param(value):
    return Var(np.asarray(value, dtype=np.float64), requires_grad=True)


def const(value):
    if isinstance(value, Var):
        return value
    return Var(np.asarray(value, dtype=np.float64))


def _node(value, parents, backward_fn):
    if any(p.requires_grad for p in parents):
        return Var(value, True, parents, backward_fn)
    return Var(value)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(root, seed=None):
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf requiring grad.

    ``seed`` defaults to ones, so a non-scalar root is treated as its sum.
    """
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(root): np.ones_like(root.value) if seed is None else np.asarray(seed, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


# elementwise -----------------------------------------------------------------

def add(a, b):
    a, b = const(a), const(b)
    sa, sb = a.value.shape, b.value.shape
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a):
    a = const(a)
    return _node(-a.value, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def square(a):
    av = a.value
    return _node(av * av, (a,), lambda g: (2.0 * g * av,))


def silu(a):
    av = a.value
    sig = 1.0 / (1.0 + np.exp(-av))
    return _node(av * sig, (a,), lambda g: (g * sig * (1.0 + av * (1.0 - sig)),))


def sigmoid(a):
    s = 1.0 / (1.0 + np.exp(-a.value))
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


def log_sigmoid(a):
    av = a.value
    out = -np.logaddexp(0.0, -av)
    sig_neg = 1.0 / (1.0 + np.exp(av))
    return _node(out, (a,), lambda g: (g * sig_neg,))


# shape ----------------------------------------------------------------------

def reshape(a, shape):
    old = a.value.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return _node(np.ascontiguousarray(a.value.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def concat(vs, axis=-1):
    vs = [const(v) for v in vs]
    sizes = [v.value.shape[axis] for v in vs]
    splits = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([v.value for v in vs], axis=axis), tuple(vs),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def take(a, index, axis):
    """Select positions ``index`` (int or array of distinct ints) along ``axis``."""
    shape = a.value.shape

    def bw(g):
        out = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        out[tuple(sl)] = g
        return (out,)

    return _node(np.take(a.value, index, axis=axis), (a,), bw)


def sum(a, axis=None):  # noqa: A001 - mirrors numpy
    shape = a.value.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(a.value.sum(axis=axis), (a,), bw)


# linear algebra ---------------------------------------------------------------

def matmul(a, b):
    a, b = const(a), const(b)
    av, bv = a.value, b.value

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return ga, gb

    return _node(np.matmul(av, bv), (a, b), bw)


def linear(x, w, b=None):
    """x @ w + b with x of shape (..., I), w (I, O), b (O,)."""
    xv, wv = x.value, w.value
    out = xv @ wv
    if b is not None:
        out = out + b.value

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wv.T if x.requires_grad else None
        gw = xv.reshape(-1, xv.shape[-1]).T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    parents = (x, w, b) if b is not None else (x, w)
    return _node(out, parents, bw)


def embedding(table, index):
    tv = table.value

    def bw(g):
        flat = index.reshape(-1)
        onehot = np.zeros((flat.size, tv.shape[0]))
        onehot[np.arange(flat.size), flat] = 1.0
        return (onehot.T @ g.reshape(-1, tv.shape[1]),)

    return _node(tv[index], (table,), bw)


def unfold3(x):
    """Neighbourhood stack for a width-3 'same' convolution along axis 1.

    (B, K, C) -> (B, K, 3C) holding [x[k-1], x[k], x[k+1]] with zero padding.
    """
    xv = x.value
    pad = np.zeros_like(xv[:, :1])
    left = np.concatenate([pad, xv[:, :-1]], axis=1)
    right = np.concatenate([xv[:, 1:], pad], axis=1)
    c = xv.shape[2]

    def bw(g):
        gl, gm, gr = g[..., :c], g[..., c:2 * c], g[..., 2 * c:]
        out = gm.copy()
        out[:, :-1] += gl[:, 1:]
        out[:, 1:] += gr[:, :-1]
        return (out,)

    return _node(np.concatenate([left, xv, right], axis=2), (x,), bw)


# fused kernels ------------------------------------------------------------------

def layer_norm(x, gain, bias, eps=1e-5):
    y, xhat, rstd = kernels.layernorm_forward(
        np.ascontiguousarray(x.value), gain.value, bias.value, eps)

    def bw(g):
        return kernels.layernorm_backward(np.ascontiguousarray(g), xhat, rstd, gain.value)

    return _node(y, (x, gain, bias), bw)


def attention(q, k, v, causal):
    qv = np.ascontiguousarray(q.value)
    kv = np.ascontiguousarray(k.value)
    vv = np.ascontiguousarray(v.value)
    out, probs = kernels.attention_forward(qv, kv, vv, causal)

    def bw(g):
        return kernels.attention_backward(np.ascontiguousarray(g), qv, kv, vv, probs)

    return _node(out, (q, k, v), bw)


def token_logprob(logits, targets):
    """Per-row log softmax(logits)[target]; logits (N, V), targets (N,) int."""
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    logp, probs = kernels.token_logprob_forward(np.ascontiguousarray(logits.value), targets)

    def bw(g):
        return (kernels.token_logprob_backward(np.ascontiguousarray(g), probs, targets),)

    return _node(logp, (logits,), bw)
