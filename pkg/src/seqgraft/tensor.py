"""Dense float64 tensors with reverse-mode automatic differentiation.

Storage is contiguous row-major numpy float64; shapes are plain tuples.
Every op returns a new Tensor and, when gradients are enabled and any
input requires them, records a backward closure. Tensor.backward() on a
scalar walks the recorded graph in reverse topological order. Gradients
accumulate across backward() calls until zero_grad().

Intended for desk-scale experiments: no views with strides, no reduced
precision, no parallel kernels.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import ShapeError, VocabError

_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Additive score for blocked attention positions. exp(-1e9) underflows to
# exactly 0.0 in float64, so masked positions carry zero weight.
MASK_FILL = -1e9


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A dense float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self):
        """Populate .grad on every requires_grad tensor reachable from this scalar."""
        if self.data.ndim != 0:
            raise ShapeError("backward root must be a scalar, got shape %r" % (self.shape,))
        topo = _topo_order(self)
        gmap = {id(self): np.ones((), dtype=np.float64)}
        for node in reversed(topo):
            g = gmap.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.array(g, copy=True)
                else:
                    node.grad = node.grad + g
            if node._backward is not None:
                node._backward(g, gmap)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return add(self, scale(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def __repr__(self):
        return "Tensor(shape=%r, requires_grad=%r)" % (self.shape, self.requires_grad)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _topo_order(root: Tensor):
    # Iterative post-order DFS; prunes subgraphs that need no gradient.
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return topo


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(gmap, node, g):
    if not node.requires_grad:
        return
    key = id(node)
    if key in gmap:
        gmap[key] = gmap[key] + g
    else:
        gmap[key] = g


def _sum_to_shape(g, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise and structural ops -----------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data

    def backward(g, gmap):
        _accum(gmap, a, _sum_to_shape(g, a.data.shape))
        _accum(gmap, b, _sum_to_shape(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data * b.data

    def backward(g, gmap):
        _accum(gmap, a, _sum_to_shape(g * b.data, a.data.shape))
        _accum(gmap, b, _sum_to_shape(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g, gmap):
        _accum(gmap, x, g * c)

    return _make(x.data * c, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have ndim >= 2, got %d and %d" % (a.ndim, b.ndim))
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul inner dimensions disagree: %r vs %r" % (a.shape, b.shape))
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError("matmul batch dimensions incompatible: %r vs %r" % (a.shape, b.shape)) from exc

    def backward(g, gmap):
        _accum(gmap, a, _sum_to_shape(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
        _accum(gmap, b, _sum_to_shape(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    return _make(out_data, (a, b), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        if x.ndim < 2:
            raise ShapeError("transpose default requires ndim >= 2")
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g, gmap):
        _accum(gmap, x, np.ascontiguousarray(np.transpose(g, inverse)))

    return _make(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    original = x.data.shape

    def backward(g, gmap):
        _accum(gmap, x, np.ascontiguousarray(g.reshape(original)))

    return _make(x.data.reshape(shape), (x,), backward)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of a [n, d] table indexed by an integer array."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("gather_rows ids must be integers")
    n = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise VocabError("id out of range [0, %d)" % n)
    out_data = table.data[ids]

    def backward(g, gmap):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        _accum(gmap, table, acc)

    return _make(out_data, (table,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out_data = x.data * cdf

    def backward(g, gmap):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        _accum(gmap, x, g * (cdf + x.data * pdf))

    return _make(out_data, (x,), backward)


def softmax(x: Tensor) -> Tensor:
    """Numerically stabilized softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g, gmap):
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accum(gmap, x, (g - inner) * y)

    return _make(y, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g, gmap):
        _accum(gmap, x, np.full(x.data.shape, float(g)))

    return _make(np.asarray(x.data.sum()), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g, gmap):
        _accum(gmap, x, np.full(x.data.shape, float(g) / n))

    return _make(np.asarray(x.data.mean()), (x,), backward)


# -- normalization and loss --------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm over an empty last axis")
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError("layer_norm gain/bias must be shape (%d,)" % d)
    if eps <= 0:
        raise ShapeError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = xhat * gain.data + bias.data

    def backward(g, gmap):
        lead = tuple(range(g.ndim - 1))
        _accum(gmap, gain, (g * xhat).sum(axis=lead))
        _accum(gmap, bias, g.sum(axis=lead))
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        _accum(gmap, x, dx)

    return _make(out_data, (x, gain, bias), backward)


def softmax_cross_entropy(logits: Tensor, targets, ignore_id: int = -1,
                          reduction: str = "mean") -> Tensor:
    """Negative log-softmax of the target class, averaged over non-ignored rows.

    logits: [n, v]; targets: integer array [n]. Rows whose target equals
    ignore_id contribute nothing. reduction "sum" skips the division by the
    number of kept rows (used for exact gradient accumulation).
    """
    if logits.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects 2-d logits, got %r" % (logits.shape,))
    targets = np.asarray(targets)
    if targets.shape != (logits.data.shape[0],):
        raise ShapeError("targets must be shape (%d,)" % logits.data.shape[0])
    v = logits.data.shape[1]
    kept = targets != ignore_id
    n_kept = int(kept.sum())
    if n_kept == 0:
        raise ValueError("empty loss")
    if targets[kept].min() < 0 or targets[kept].max() >= v:
        raise VocabError("target id out of range [0, %d)" % v)
    if reduction not in ("mean", "sum"):
        raise ValueError("unknown reduction %r" % reduction)

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    sumexp = np.exp(z).sum(axis=-1, keepdims=True)
    log_probs = z - np.log(sumexp)
    safe_targets = np.where(kept, targets, 0)
    picked = log_probs[np.arange(targets.shape[0]), safe_targets]
    total = -picked[kept].sum()
    value = total / n_kept if reduction == "mean" else total

    def backward(g, gmap):
        probs = np.exp(log_probs)
        d = probs
        d[np.arange(targets.shape[0]), safe_targets] -= 1.0
        d[~kept] = 0.0
        factor = float(g) / n_kept if reduction == "mean" else float(g)
        _accum(gmap, logits, d * factor)

    return _make(np.asarray(value), (logits,), backward)


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    from .errors import NumericsError

    if not np.isfinite(x.data).all():
        raise NumericsError("non-finite values in %s" % what)
    return x
