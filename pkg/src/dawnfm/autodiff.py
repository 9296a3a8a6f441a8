"""A small reverse-mode differentiation engine over numpy arrays.

Only the operations the velocity networks need are provided.  Each op
returns a :class:`Var` holding its value, its parents and a closure that
maps the output gradient to parent gradients.  :func:`backward` walks the
recorded graph in reverse topological order.
"""
from __future__ import annotations

import numpy as np

from . import _kernels


class Var:
    __slots__ = ("value", "parents", "grad_fn", "requires_grad", "grad")

    def __init__(self, value, parents=(), grad_fn=None, requires_grad=False):
        self.value = value
        self.parents = parents
        self.grad_fn = grad_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def leaf(value, requires_grad=True) -> Var:
    return Var(np.asarray(value), requires_grad=requires_grad)


def const(value) -> Var:
    return Var(np.asarray(value))


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order


def backward(root: Var, upstream) -> None:
    """Accumulate ``d<upstream, root>/d leaf`` into ``leaf.grad``."""
    order = _topo(root)
    grads = {id(root): np.asarray(upstream, dtype=root.value.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ------------------------------------------------------------------ ops

def add(a: Var, b: Var) -> Var:
    sa, sb = a.value.shape, b.value.shape
    return Var(a.value + b.value, (a, b),
               lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def reshape(a: Var, shape) -> Var:
    old = a.value.shape
    return Var(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def silu(a: Var) -> Var:
    x = a.value
    sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig

    def grad_fn(g):
        return (g * (sig * (1.0 + x * (1.0 - sig))),)
    return Var(out, (a,), grad_fn)


def linear(x: Var, w: Var, b: Var) -> Var:
    """``x @ w.T + b`` with ``w`` of shape ``(out, in)``."""
    xv, wv = x.value, w.value

    def grad_fn(g):
        return g @ wv, g.T @ xv, g.sum(axis=0)
    return Var(xv @ wv.T + b.value, (x, w, b), grad_fn)


def concat(parts, axis=1) -> Var:
    sizes = [p.value.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, cuts, axis=axis))
    return Var(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), grad_fn)


def conv2d(x: Var, w: Var, b: Var) -> Var:
    """Stride-1 'same' convolution of channels-last maps.

    ``x`` is ``(N, H, W, C_in)``; ``w`` is ``(C_out, C_in, k, k)`` with odd
    ``k`` and zero padding ``k // 2``.
    """
    xv, wv = x.value, w.value
    n, h, wd, c = xv.shape
    co, ci, k, _ = wv.shape
    wm = wv.transpose(0, 2, 3, 1).reshape(co, k * k * ci)
    cols = _kernels.im2col(xv, k)
    out = (cols @ wm.T + b.value).reshape(n, h, wd, co)

    def grad_fn(g):
        gm = g.reshape(n * h * wd, co)
        gw = (gm.T @ cols).reshape(co, k, k, ci).transpose(0, 3, 1, 2)
        gb = gm.sum(axis=0)
        if k == 1:
            gx = (gm @ wm).reshape(n, h, wd, ci)
        else:
            # input gradient = convolution with the flipped, channel-swapped kernel
            wf = wv[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(ci, k * k * co)
            gx = (_kernels.im2col(g, k) @ wf.T).reshape(n, h, wd, ci)
        return gx, gw, gb
    return Var(out, (x, w, b), grad_fn)


def avg_pool2(x: Var) -> Var:
    v = x.value
    n, h, w, c = v.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial extents, got {h}x{w}")
    out = v.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def grad_fn(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)
    return Var(out, (x,), grad_fn)


def upsample2(x: Var) -> Var:
    v = x.value
    n, h, w, c = v.shape
    out = np.repeat(np.repeat(v, 2, axis=1), 2, axis=2)

    def grad_fn(g):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)
    return Var(out, (x,), grad_fn)
