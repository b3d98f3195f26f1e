"""Minimal reverse-mode automatic differentiation on small dense arrays.

Everything is float64 and rank <= 3 (population batch x particles x
features). Graphs are built define-by-run: each operation returns a fresh
`Node` that remembers its parents and how to push gradients back to them.
There is no broadcasting magic beyond the explicit `broadcast_row` /
`broadcast_to` operations.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np
from scipy.special import expit, gammaln, psi

MAX_RANK = 3


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class EmptyReductionError(ValueError):
    """Reduction requested over an axis of extent zero."""


class NonScalarRootError(ValueError):
    """backward() called on a node that is not a scalar."""


class InvalidDistributionError(ValueError):
    """Distribution parameters out of range (std < 0 or lo > hi)."""


class Node:
    """A value in the computation graph.

    Holds the forward values, an optional accumulated gradient of the same
    shape, and provenance (operation tag plus parent references) used by
    the backward pass. Provenance forms a DAG by construction.
    """

    __slots__ = ("values", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, values, requires_grad=False, op=None, parents=()):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeMismatchError(
                f"rank {arr.ndim} exceeds the supported rank {MAX_RANK}"
            )
        self.values = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self):
        if self.size != 1:
            raise NonScalarRootError(f"item() on node of shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def __repr__(self):
        tag = self.op or ("param" if self.requires_grad else "const")
        return f"<Node {tag} {self.shape}>"


def constant(values) -> Node:
    return Node(values)


def parameter(values) -> Node:
    return Node(values, requires_grad=True)


def _make(values, op, parents, backward):
    out = Node(values, requires_grad=any(p.requires_grad for p in parents),
               op=op, parents=tuple(parents))
    if out.requires_grad:
        out._backward = backward
    return out


def _check_same_shape(kind, a, b):
    if a.shape != b.shape:
        raise ShapeMismatchError(
            f"{kind}: operand shapes {a.shape} and {b.shape} differ"
        )


def _norm_axis(kind, axis, ndim):
    ax = axis + ndim if axis < 0 else axis
    if not 0 <= ax < ndim:
        raise ShapeMismatchError(f"{kind}: axis {axis} invalid for rank {ndim}")
    return ax


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    _check_same_shape("add", a, b)
    return _make(a.values + b.values, "add", (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _check_same_shape("sub", a, b)
    return _make(a.values - b.values, "sub", (a, b), lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    _check_same_shape("mul", a, b)
    av, bv = a.values, b.values
    return _make(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


def scale(a: Node, c: float) -> Node:
    """Multiply by a plain scalar constant (no gradient into c)."""
    c = float(c)
    return _make(a.values * c, "scale", (a,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# matrix products and shape plumbing
# ---------------------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    """Matrix/vector product following numpy semantics.

    Supported operand ranks: a in {1, 2, 3}, b in {1, 2}; the stacked
    (rank-3) case treats leading axes of `a` as a batch against a shared
    rank-2 `b`.
    """
    av, bv = a.values, b.values
    if b.ndim not in (1, 2) or a.ndim not in (1, 2, 3):
        raise ShapeMismatchError(
            f"matmul: unsupported ranks {a.shape} @ {b.shape}"
        )
    if av.shape[-1] != bv.shape[0]:
        raise ShapeMismatchError(
            f"matmul: inner dimensions of {a.shape} and {b.shape} differ"
        )
    out = np.matmul(av, bv)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 2:
                ga = np.matmul(g, bv.T)
            elif a.ndim == 1:  # dot product, g scalar
                ga = g * bv
            else:  # [.., n, k] @ [k] -> [.., n]
                ga = g[..., None] * bv
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.outer(av, g) if b.ndim == 2 else g * av
            elif b.ndim == 2:
                axes = tuple(range(av.ndim - 1))
                gb = np.tensordot(av, g, axes=(axes, axes))
            else:  # b rank 1: sum g * a over all leading axes
                axes = tuple(range(g.ndim))
                gb = np.tensordot(g, av, axes=(axes, axes))
        return ga, gb

    return _make(out, "matmul", (a, b), backward)


def broadcast_row(v: Node, n: int) -> Node:
    """Replicate a per-population description across the particle axis.

    [k] -> [n, k] and [B, k] -> [B, n, k]; gradient sums over that axis.
    """
    if n < 0:
        raise ShapeMismatchError(f"broadcast_row: negative extent {n}")
    expanded = np.expand_dims(v.values, -2)
    target = expanded.shape[:-2] + (n,) + expanded.shape[-1:]
    if len(target) > MAX_RANK:
        raise ShapeMismatchError(
            f"broadcast_row: result rank {len(target)} exceeds {MAX_RANK}"
        )
    out = np.broadcast_to(expanded, target)
    return _make(out, "broadcast_row", (v,), lambda g: (g.sum(axis=-2),))


def broadcast_to(v: Node, shape) -> Node:
    """Numpy-style broadcast (left-padded); gradient sums the added axes."""
    shape = tuple(int(s) for s in shape)
    if len(shape) > MAX_RANK:
        raise ShapeMismatchError(f"broadcast_to: rank {len(shape)} exceeds {MAX_RANK}")
    try:
        out = np.broadcast_to(v.values, shape)
    except ValueError as exc:
        raise ShapeMismatchError(
            f"broadcast_to: cannot broadcast {v.shape} to {shape}"
        ) from exc
    src = v.shape

    def backward(g):
        extra = len(shape) - len(src)
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, s in enumerate(src) if s == 1 and shape[extra + i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(out, "broadcast_to", (v,), backward)


def reshape(x: Node, shape) -> Node:
    shape = tuple(int(s) for s in shape)
    if len(shape) > MAX_RANK:
        raise ShapeMismatchError(f"reshape: rank {len(shape)} exceeds {MAX_RANK}")
    if math.prod(shape) != x.size:
        raise ShapeMismatchError(f"reshape: {x.shape} incompatible with {shape}")
    src = x.shape
    return _make(x.values.reshape(shape), "reshape", (x,),
                 lambda g: (g.reshape(src),))


def concat(nodes, axis: int) -> Node:
    """Concatenate along an axis; all other extents must match."""
    nodes = tuple(nodes)
    if not nodes:
        raise ShapeMismatchError("concat: no inputs")
    ax = _norm_axis("concat", axis, nodes[0].ndim)
    base = list(nodes[0].shape)
    for nd in nodes[1:]:
        other = list(nd.shape)
        if len(other) != len(base) or other[:ax] + other[ax + 1:] != base[:ax] + base[ax + 1:]:
            raise ShapeMismatchError(
                f"concat: shapes {nodes[0].shape} and {nd.shape} incompatible on axis {axis}"
            )
    sizes = [nd.shape[ax] for nd in nodes]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=ax)
            for i in range(len(nodes))
        )

    out = np.concatenate([nd.values for nd in nodes], axis=ax)
    return _make(out, "concat", nodes, backward)


def slice_axis(x: Node, axis: int, start: int, stop: int) -> Node:
    """Contiguous slice [start:stop) along one axis."""
    ax = _norm_axis("slice", axis, x.ndim)
    n = x.shape[ax]
    if not (0 <= start <= stop <= n):
        raise ShapeMismatchError(
            f"slice: [{start}:{stop}) out of range for extent {n}"
        )
    index = (slice(None),) * ax + (slice(start, stop),)
    src_shape = x.shape

    def backward(g):
        gx = np.zeros(src_shape)
        gx[index] = g
        return (gx,)

    return _make(x.values[index], "slice", (x,), backward)


def scale_rows(x: Node, w: Node) -> Node:
    """Scale particle rows of x [.., n, k] by per-particle weights w [.., n]."""
    if x.ndim < 2 or w.shape != x.shape[:-1]:
        raise ShapeMismatchError(
            f"scale_rows: weights {w.shape} do not match rows of {x.shape}"
        )
    xv, wv = x.values, w.values
    out = xv * wv[..., None]

    def backward(g):
        gx = g * wv[..., None] if x.requires_grad else None
        gw = (g * xv).sum(axis=-1) if w.requires_grad else None
        return gx, gw

    return _make(out, "scale_rows", (x, w), backward)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def relu(x: Node) -> Node:
    mask = x.values > 0
    return _make(np.where(mask, x.values, 0.0), "relu", (x,),
                 lambda g: (g * mask,))


def tanh(x: Node) -> Node:
    t = np.tanh(x.values)
    return _make(t, "tanh", (x,), lambda g: (g * (1.0 - t * t),))


def sigmoid(x: Node) -> Node:
    s = expit(x.values)
    return _make(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))


def exp(x: Node) -> Node:
    e = np.exp(x.values)
    return _make(e, "exp", (x,), lambda g: (g * e,))


def log(x: Node) -> Node:
    xv = x.values
    return _make(np.log(xv), "log", (x,), lambda g: (g / xv,))


def softplus(x: Node) -> Node:
    """ln(1 + e^x), computed without overflow; maps reals to positives."""
    xv = x.values
    return _make(np.logaddexp(0.0, xv), "softplus", (x,),
                 lambda g: (g * expit(xv),))


def lgamma(x: Node) -> Node:
    """Log-gamma, elementwise; gradient is the digamma function."""
    xv = x.values
    return _make(gammaln(xv), "lgamma", (x,), lambda g: (g * psi(xv),))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _reduction_axis(kind, x, axis):
    ax = _norm_axis(kind, axis, x.ndim)
    if x.shape[ax] == 0:
        raise EmptyReductionError(f"{kind}: axis {axis} of {x.shape} is empty")
    return ax


def reduce_sum(x: Node, axis: int) -> Node:
    ax = _reduction_axis("reduce_sum", x, axis)
    src = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, ax), src),)

    return _make(x.values.sum(axis=ax), "reduce_sum", (x,), backward)


def reduce_mean(x: Node, axis: int) -> Node:
    ax = _reduction_axis("reduce_mean", x, axis)
    src = x.shape
    inv = 1.0 / src[ax]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g * inv, ax), src),)

    return _make(x.values.mean(axis=ax), "reduce_mean", (x,), backward)


def reduce_max(x: Node, axis: int) -> Node:
    """Max along an axis; the gradient is routed to the first argmax."""
    ax = _reduction_axis("reduce_max", x, axis)
    xv = x.values
    idx = np.expand_dims(np.argmax(xv, axis=ax), ax)

    def backward(g):
        gx = np.zeros_like(xv)
        np.put_along_axis(gx, idx, np.expand_dims(g, ax), axis=ax)
        return (gx,)

    return _make(xv.max(axis=ax), "reduce_max", (x,), backward)


def logsumexp(x: Node, axis: int) -> Node:
    """ln sum exp along an axis, max-shifted for stability."""
    ax = _reduction_axis("logsumexp", x, axis)
    xv = x.values
    m = xv.max(axis=ax, keepdims=True)
    out = np.squeeze(m, ax) + np.log(np.exp(xv - m).sum(axis=ax))

    def backward(g):
        soft = np.exp(xv - np.expand_dims(out, ax))
        return (np.expand_dims(g, ax) * soft,)

    return _make(out, "logsumexp", (x,), backward)


def softmax(x: Node, axis: int) -> Node:
    """Softmax along an axis, max-shifted for stability."""
    ax = _reduction_axis("softmax", x, axis)
    xv = x.values
    e = np.exp(xv - xv.max(axis=ax, keepdims=True))
    s = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        inner = (g * s).sum(axis=ax, keepdims=True)
        return (s * (g - inner),)

    return _make(s, "softmax", (x,), backward)


def sort_select(x: Node, axis: int, percentile: float) -> Node:
    """Select the lower-nearest-rank percentile along an axis.

    The percentile is a selection, not an interpolation: the element at
    sorted position floor(p * (n - 1)) is returned and receives the whole
    gradient. percentile 0.0 is the minimum, 1.0 the maximum.
    """
    if not 0.0 <= percentile <= 1.0:
        raise ShapeMismatchError(f"sort_select: percentile {percentile} not in [0, 1]")
    ax = _reduction_axis("sort_select", x, axis)
    xv = x.values
    n = xv.shape[ax]
    rank = min(int(math.floor(percentile * (n - 1))), n - 1)
    order = np.argsort(xv, axis=ax, kind="stable")
    sel = np.take(order, [rank], axis=ax)
    out = np.take_along_axis(xv, sel, axis=ax)

    def backward(g):
        gx = np.zeros_like(xv)
        np.put_along_axis(gx, sel, np.expand_dims(g, ax), axis=ax)
        return (gx,)

    return _make(np.squeeze(out, ax), "sort_select", (x,), backward)


#: Operation tag -> builder, for dispatch-style callers and the test suite.
OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "broadcast_row": broadcast_row,
    "broadcast_to": broadcast_to,
    "reshape": reshape,
    "concat": concat,
    "slice": slice_axis,
    "scale_rows": scale_rows,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "lgamma": lgamma,
    "reduce_sum": reduce_sum,
    "reduce_mean": reduce_mean,
    "reduce_max": reduce_max,
    "logsumexp": logsumexp,
    "softmax": softmax,
    "sort_select": sort_select,
}


def apply_op(kind: str, *args, **kwargs) -> Node:
    """Build a graph node by operation tag (see OPS for the vocabulary)."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise KeyError(f"unknown operation kind {kind!r}") from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Node):
    """Post-order over the requires_grad subgraph, iteratively (recurrent
    graphs can be deeper than the Python stack)."""
    order = []
    state = {}
    stack = [root]
    while stack:
        node = stack[-1]
        st = state.get(id(node), 0)
        if st == 0:
            state[id(node)] = 1
            for p in node.parents:
                if p.requires_grad and state.get(id(p), 0) == 0:
                    stack.append(p)
        elif st == 1:
            state[id(node)] = 2
            order.append(node)
            stack.pop()
        else:
            stack.pop()
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into .grad for every reachable node that
    requires a gradient.

    The pass computes fresh gradients in a scratch table and then adds them
    into .grad, so running backward twice without a reset doubles the
    stored gradients. Fan-out accumulates additively within a pass.
    """
    if root.size != 1:
        raise NonScalarRootError(f"backward root has shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    table = {id(root): np.ones(root.shape)}
    for node in reversed(order):
        g = table.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, gp in zip(node.parents, node._backward(g)):
            if gp is None or not parent.requires_grad:
                continue
            acc = table.get(id(parent))
            table[id(parent)] = gp if acc is None else acc + gp


def zero_grad(nodes) -> None:
    for node in nodes:
        node.grad = None


def grad_check(f, x: Node, h: float = 1e-5) -> float:
    """Compare reverse-mode gradients of the scalar function f against
    central differences at x.

    Returns max over coordinates of |analytic - numeric| divided by
    max(1, |analytic|, |numeric|). The caller is responsible for keeping x
    away from the kinks of max / sort selections.
    """
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.size != 1:
        raise NonScalarRootError(f"grad_check function returned shape {out.shape}")
    backward(out)
    analytic = np.zeros(x.shape) if x.grad is None else np.asarray(x.grad)
    flat = x.values.reshape(-1)
    numeric = np.zeros(x.size)
    for i in range(x.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)
    a = analytic.reshape(-1)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
    return float(np.max(np.abs(a - numeric) / denom))


# ---------------------------------------------------------------------------
# seeded randomness
# ---------------------------------------------------------------------------

def _label_hash(label: str) -> int:
    return int.from_bytes(hashlib.blake2b(label.encode(), digest_size=8).digest(), "big")


class Rng:
    """Deterministic random stream on the counter-based Philox generator.

    A stream is identified by (seed, label path): `child(label)` derives an
    independent stream by hashing the label into the seed material, so child
    streams never depend on how many draws happened elsewhere. Identical
    seeds give bitwise-identical draw sequences.
    """

    def __init__(self, seed: int, _path=()):
        self.seed = int(seed)
        self._path = tuple(_path)
        entropy = [self.seed & (2**64 - 1)] + [_label_hash(p) for p in self._path]
        self.gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, label: str) -> "Rng":
        return Rng(self.seed, self._path + (str(label),))

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> Node:
        if std < 0:
            raise InvalidDistributionError(f"normal: std {std} < 0")
        return constant(mean + std * self.gen.standard_normal(shape))

    def uniform(self, shape, lo: float = 0.0, hi: float = 1.0) -> Node:
        if lo > hi:
            raise InvalidDistributionError(f"uniform: lo {lo} > hi {hi}")
        return constant(self.gen.uniform(lo, hi, shape))

    def integers(self, lo: int, hi: int, size=None):
        """Plain integer draws in [lo, hi), for data generation."""
        return self.gen.integers(lo, hi, size=size)

    def permutation(self, n: int):
        return self.gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={'/'.join(self._path) or '-'})"
