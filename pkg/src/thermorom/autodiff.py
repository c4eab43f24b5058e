"""Reverse-mode automatic differentiation on numpy arrays.

A small tape: every operation that touches at least one ``Node`` returns a
``Node`` carrying the result plus a closure that scatters an incoming
cotangent to its parents.  Operations applied to plain ndarrays fall through
to numpy, so constant subgraphs cost nothing and the same builder code serves
both plain evaluation and gradient computation.

All arithmetic is float64.  Gradients are accumulated out-of-place in a fixed
(reverse topological) order, so results are bit-reproducible for a given
graph.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Node",
    "value_of",
    "backward",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "einsum2",
    "affine",
    "tanh",
    "relu",
    "square",
    "ssum",
    "concat",
    "segment",
    "reshape",
    "transpose",
    "getcols",
]


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "grad", "parents", "_bw")

    def __init__(self, value, parents=(), bw=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self._bw = bw

    def accumulate(self, g):
        if self.grad is None:
            self.grad = g
            return
        cur = self.grad
        # in-place only into buffers we own; views (broadcasts, slices of other
        # grads) must not be mutated, so those fall back to out-of-place adds
        if (isinstance(cur, np.ndarray) and cur.flags.writeable and cur.flags.owndata
                and cur.shape == np.shape(g)):
            cur += g
        else:
            self.grad = cur + g

    def __repr__(self):
        return f"Node(shape={np.shape(self.value)})"


def value_of(x):
    """Underlying ndarray/scalar of a Node or plain value."""
    return x.value if isinstance(x, Node) else x


def _is_node(*xs):
    return any(isinstance(x, Node) for x in xs)


def _unbroadcast(g, shape):
    """Sum a gradient down to the shape the operand actually had."""
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def backward(out, seed=1.0):
    """Run reverse-mode from ``out``, accumulating ``.grad`` on every Node.

    ``seed`` is the cotangent of ``out`` (default 1.0 for scalar losses).
    """
    if not isinstance(out, Node):
        raise TypeError("backward() needs a Node output; got a constant")
    topo = []
    seen = set()
    stack = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if isinstance(p, Node) and id(p) not in seen:
                stack.append((p, False))
    out.grad = np.asarray(seed, dtype=float)
    for node in reversed(topo):
        if node._bw is not None and node.grad is not None:
            node._bw(node.grad)


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if not _is_node(a, b):
        return out

    def bw(g):
        if isinstance(a, Node):
            a.accumulate(_unbroadcast(g, np.shape(av)))
        if isinstance(b, Node):
            b.accumulate(_unbroadcast(g, np.shape(bv)))

    return Node(out, (a, b), bw)


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    if not _is_node(a, b):
        return out

    def bw(g):
        if isinstance(a, Node):
            a.accumulate(_unbroadcast(g, np.shape(av)))
        if isinstance(b, Node):
            b.accumulate(_unbroadcast(-g, np.shape(bv)))

    return Node(out, (a, b), bw)


def neg(a):
    av = value_of(a)
    if not isinstance(a, Node):
        return -av
    return Node(-av, (a,), lambda g: a.accumulate(-g))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if not _is_node(a, b):
        return out

    def bw(g):
        if isinstance(a, Node):
            a.accumulate(_unbroadcast(g * bv, np.shape(av)))
        if isinstance(b, Node):
            b.accumulate(_unbroadcast(g * av, np.shape(bv)))

    return Node(out, (a, b), bw)


def square(a):
    av = value_of(a)
    if not isinstance(a, Node):
        return av * av
    return Node(av * av, (a,), lambda g: a.accumulate(g * (2.0 * av)))


def tanh(a):
    av = value_of(a)
    out = np.tanh(av)
    if not isinstance(a, Node):
        return out
    return Node(out, (a,), lambda g: a.accumulate(g * (1.0 - out * out)))


def relu(a):
    av = value_of(a)
    out = np.maximum(av, 0.0)
    if not isinstance(a, Node):
        return out
    # subgradient 0 at the kink
    return Node(out, (a,), lambda g: a.accumulate(g * (av > 0.0)))


def ssum(a, axis=None):
    av = value_of(a)
    out = np.sum(av, axis=axis)
    if not isinstance(a, Node):
        return out
    shape = np.shape(av)

    def bw(g):
        if axis is None:
            a.accumulate(np.broadcast_to(g, shape))
        else:
            a.accumulate(np.broadcast_to(np.expand_dims(g, axis), shape))

    return Node(out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """np.matmul with broadcasting over leading batch axes; operands >= 2-D."""
    av, bv = value_of(a), value_of(b)
    out = np.matmul(av, bv)
    if not _is_node(a, b):
        return out

    def bw(g):
        if isinstance(a, Node):
            a.accumulate(_unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), np.shape(av)))
        if isinstance(b, Node):
            b.accumulate(_unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), np.shape(bv)))

    return Node(out, (a, b), bw)


def _einsum_grad_spec(spec):
    ins, outp = spec.split("->")
    a_spec, b_spec = ins.split(",")
    for s in (a_spec, b_spec):
        if len(set(s)) != len(s):
            raise ValueError(f"einsum2 does not support repeated indices within an operand: {spec}")
    # each operand index must be recoverable from the output and the other operand
    for s, other in ((a_spec, b_spec), (b_spec, a_spec)):
        missing = set(s) - set(outp) - set(other)
        if missing:
            raise ValueError(f"einsum2 cannot differentiate {spec}: index {missing} is summed within one operand")
    ga = f"{outp},{b_spec}->{a_spec}"
    gb = f"{outp},{a_spec}->{b_spec}"
    return ga, gb


def einsum2(spec, a, b):
    """Two-operand einsum (explicit indices, no ellipsis, pure contractions)."""
    av, bv = value_of(a), value_of(b)
    out = np.einsum(spec, av, bv)
    if not _is_node(a, b):
        return out
    ga_spec, gb_spec = _einsum_grad_spec(spec)

    def bw(g):
        if isinstance(a, Node):
            a.accumulate(np.einsum(ga_spec, g, bv))
        if isinstance(b, Node):
            b.accumulate(np.einsum(gb_spec, g, av))

    return Node(out, (a, b), bw)


def affine(x, W, b):
    """x @ W^T + b for W of shape (n_out, n_in); x has shape (..., n_in)."""
    xv, Wv, bv = value_of(x), value_of(W), value_of(b)
    out = np.matmul(xv, Wv.T) + bv
    if not _is_node(x, W, b):
        return out
    n_in = Wv.shape[1]
    n_out = Wv.shape[0]

    def bw(g):
        gm = g.reshape(-1, n_out)
        if isinstance(x, Node):
            x.accumulate(np.matmul(g, Wv))
        if isinstance(W, Node):
            W.accumulate(np.matmul(gm.T, xv.reshape(-1, n_in)))
        if isinstance(b, Node):
            b.accumulate(gm.sum(axis=0))

    return Node(out, (x, W, b), bw)


# ---------------------------------------------------------------------------
# shape plumbing


def concat(parts, axis=-1):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if not _is_node(*parts):
        return out
    widths = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + widths)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(p, Node):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p.accumulate(g[tuple(idx)])

    return Node(out, tuple(parts), bw)


def segment(a, start, length):
    """Contiguous slice of a flat (1-D) vector."""
    av = value_of(a)
    out = av[start:start + length]
    if not isinstance(a, Node):
        return out

    def bw(g):
        cur = a.grad
        if (isinstance(cur, np.ndarray) and cur.flags.writeable and cur.flags.owndata
                and cur.shape == av.shape):
            cur[start:start + length] += g
        else:
            full = np.zeros_like(av)
            full[start:start + length] = g
            a.accumulate(full)

    return Node(out, (a,), bw)


def reshape(a, shape):
    av = value_of(a)
    if not isinstance(a, Node):
        return av.reshape(shape)
    old = np.shape(av)
    return Node(av.reshape(shape), (a,), lambda g: a.accumulate(g.reshape(old)))


def transpose(a, axes):
    av = value_of(a)
    if not isinstance(a, Node):
        return np.transpose(av, axes)
    inv = np.argsort(axes)
    return Node(np.transpose(av, axes), (a,), lambda g: a.accumulate(np.transpose(g, inv)))


def getcols(a, lo, hi):
    """Columns [lo, hi) along the last axis."""
    av = value_of(a)
    out = av[..., lo:hi]
    if not isinstance(a, Node):
        return out

    def bw(g):
        cur = a.grad
        if (isinstance(cur, np.ndarray) and cur.flags.writeable and cur.flags.owndata
                and cur.shape == av.shape):
            cur[..., lo:hi] += g
        else:
            full = np.zeros_like(av)
            full[..., lo:hi] = g
            a.accumulate(full)

    return Node(out, (a,), bw)
