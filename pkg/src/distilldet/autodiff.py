"""Reverse-mode automatic differentiation on dense float64 tensors.

Every differentiable operation stores its parent tensors and a gradient rule
on the output; ``backward`` replays the rules in reverse topological order.
The recorded graph is single-use: differentiating through an already-consumed
operation raises ``TapeError``, so each optimization step must rebuild its
forward graph.

Finite-value policy: constructing a leaf tensor from non-finite data raises
immediately. Outputs of recorded operations are not re-scanned (the fused
softmax/BCE ops guard their own exponentials); training code checks its loss
values and aborts on divergence.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class TapeError(RuntimeError):
    """Backward invoked on a graph that was already differentiated."""


class GradError(RuntimeError):
    """A parameter update was requested without a populated gradient."""


class Tensor:
    """Dense float64 array plus the bookkeeping needed for backprop.

    ``grad`` is ``None`` until a backward pass reaches this tensor. Tensors
    created by operations carry ``_parents`` and a ``_backward`` closure; leaf
    tensors carry neither and survive across optimization steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if arr.size == 0:
            raise ShapeError("tensors must have positive dimension sizes")
        if not np.isfinite(arr).all():
            raise ValueError("tensor initialized with non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._consumed = False

    @classmethod
    def _from_op(cls, data, parents, backward_fn):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._consumed = False
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, no gradient tracking, no graph edges."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._consumed = False
        return out

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # ---- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor/tensor division is not supported; divide by a scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def flatten(self):
        return reshape(self, (self.data.size,))

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _toposort(root: Tensor) -> list:
    """Operations reaching ``root``, parents strictly before consumers."""
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        if node._consumed:
            raise TapeError("graph already differentiated; rebuild the forward pass")
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return topo


class Tape:
    """Ordered view of the operation record reaching one root tensor.

    The record lives on the tensors themselves (parent links plus a gradient
    rule per operation); this class materializes it in execution-compatible
    topological order, mostly for inspection and tests.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = _toposort(root)

    @property
    def operations(self) -> list:
        return [n for n in self.nodes if n._backward is not None]

    def __len__(self) -> int:
        return len(self.operations)


def backward(loss: Tensor):
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``.

    ``loss`` must be a scalar produced by a not-yet-consumed graph; each
    operation node is marked consumed afterwards, so a graph differentiates
    exactly once.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise ValueError("backward on a non-finite loss")
    if loss._backward is None and not loss.requires_grad:
        raise TapeError("loss is not attached to a differentiable graph")

    topo = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
            node._consumed = True


def sgd_step(params, lr: float):
    """Vanilla SGD update: p <- p - lr * grad, then clear grads."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise GradError("sgd_step on a parameter with no gradient")
    for p in params:
        p.data -= lr * p.grad
        p.grad = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _coerce_pair(a, b):
    """Promote a scalar operand to a same-shape constant array."""
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
            raise ShapeError(f"elementwise op on shapes {a.shape} vs {b.shape}")
        return a, b
    return a, None


# ---- elementwise ops ------------------------------------------------------


def add(a: Tensor, b):
    if isinstance(b, Tensor):
        a, b = _coerce_pair(a, b)
        out = Tensor._from_op(a.data + b.data, (a, b), None)

        def bk(g):
            _accumulate(a, g if a.data.shape == g.shape else g.sum())
            _accumulate(b, g if b.data.shape == g.shape else g.sum())

        out._backward = bk if out.requires_grad else None
        return out
    c = float(b)
    out = Tensor._from_op(a.data + c, (a,), None)
    out._backward = (lambda g: _accumulate(a, g)) if out.requires_grad else None
    return out


def sub(a: Tensor, b):
    if isinstance(b, Tensor):
        a, b = _coerce_pair(a, b)
        out = Tensor._from_op(a.data - b.data, (a, b), None)

        def bk(g):
            _accumulate(a, g if a.data.shape == g.shape else g.sum())
            _accumulate(b, -g if b.data.shape == g.shape else -g.sum())

        out._backward = bk if out.requires_grad else None
        return out
    return add(a, -float(b))


def mul(a: Tensor, b):
    if isinstance(b, Tensor):
        a, b = _coerce_pair(a, b)
        out = Tensor._from_op(a.data * b.data, (a, b), None)

        def bk(g):
            ga = g * b.data
            gb = g * a.data
            _accumulate(a, ga if a.data.shape == ga.shape else ga.sum())
            _accumulate(b, gb if b.data.shape == gb.shape else gb.sum())

        out._backward = bk if out.requires_grad else None
        return out
    c = float(b)
    out = Tensor._from_op(a.data * c, (a,), None)
    out._backward = (lambda g: _accumulate(a, g * c)) if out.requires_grad else None
    return out


def neg(a: Tensor):
    out = Tensor._from_op(-a.data, (a,), None)
    out._backward = (lambda g: _accumulate(a, -g)) if out.requires_grad else None
    return out


def relu(a: Tensor):
    mask = a.data > 0.0
    out = Tensor._from_op(np.where(mask, a.data, 0.0), (a,), None)
    out._backward = (lambda g: _accumulate(a, g * mask)) if out.requires_grad else None
    return out


# ---- reductions and reshapes ---------------------------------------------


def tsum(a: Tensor):
    out = Tensor._from_op(np.asarray(a.data.sum()), (a,), None)
    out._backward = (lambda g: _accumulate(a, np.full_like(a.data, float(g)))) if out.requires_grad else None
    return out


def tmean(a: Tensor):
    n = a.data.size
    out = Tensor._from_op(np.asarray(a.data.mean()), (a,), None)
    out._backward = (lambda g: _accumulate(a, np.full_like(a.data, float(g) / n))) if out.requires_grad else None
    return out


def reshape(a: Tensor, shape):
    shape = tuple(int(s) for s in shape)
    data = a.data.reshape(shape)
    out = Tensor._from_op(data, (a,), None)
    out._backward = (lambda g: _accumulate(a, g.reshape(a.data.shape))) if out.requires_grad else None
    return out


def transpose(a: Tensor, axes):
    axes = tuple(int(x) for x in axes)
    inv = tuple(np.argsort(axes))
    out = Tensor._from_op(a.data.transpose(axes), (a,), None)
    out._backward = (lambda g: _accumulate(a, g.transpose(inv))) if out.requires_grad else None
    return out


def concat(tensors, axis: int = 0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    out = Tensor._from_op(data, tuple(tensors), None)

    def bk(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    out._backward = bk if out.requires_grad else None
    return out


def take_rows(a: Tensor, indices):
    """Select rows of a 2-D tensor; gradient scatter-adds back."""
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError("take_rows expects a 2-D tensor")
    out = Tensor._from_op(a.data[idx], (a,), None)

    def bk(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, idx, g)

    out._backward = bk if out.requires_grad else None
    return out


def gather(a: Tensor, flat_indices):
    """Pick elements of the row-major flattened tensor."""
    idx = np.asarray(flat_indices, dtype=np.intp)
    out = Tensor._from_op(a.data.reshape(-1)[idx], (a,), None)

    def bk(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad.reshape(-1), idx, g)

    out._backward = bk if out.requires_grad else None
    return out


# ---- linear algebra -------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor):
    """Affine map [N,D] @ [D,M] + [M]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError("linear expects x[N,D], w[D,M], b[M]")
    if x.data.shape[1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"linear shape mismatch: x{x.shape} w{w.shape} b{b.shape}"
        )
    out = Tensor._from_op(x.data @ w.data + b.data, (x, w, b), None)

    def bk(g):
        _accumulate(x, g @ w.data.T)
        _accumulate(w, x.data.T @ g)
        _accumulate(b, g.sum(axis=0))

    out._backward = bk if out.requires_grad else None
    return out


# ---- losses and probability ops ------------------------------------------


def softmax(a: Tensor, axis: int = -1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._from_op(s, (a,), None)

    def bk(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accumulate(a, s * (g - dot))

    out._backward = bk if out.requires_grad else None
    return out


def softmax_cross_entropy(logits: Tensor, labels):
    """Mean cross-entropy over rows of [N,K] logits; fused for stability."""
    lab = np.asarray(labels, dtype=np.intp)
    if logits.data.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects [N,K] logits")
    n, k = logits.data.shape
    if lab.shape != (n,):
        raise ShapeError("labels must be a length-N integer vector")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    losses = lse - z[np.arange(n), lab]
    out = Tensor._from_op(np.asarray(losses.mean()), (logits,), None)

    def bk(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), lab] -= 1.0
        _accumulate(logits, float(g) * p / n)

    out._backward = bk if out.requires_grad else None
    return out


def bce_with_logits(logits: Tensor, targets):
    """Mean binary cross-entropy on raw logits; fused for stability."""
    t = np.asarray(targets, dtype=np.float64)
    z = logits.data
    if z.shape != t.shape:
        raise ShapeError(f"bce shapes {z.shape} vs {t.shape}")
    losses = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = Tensor._from_op(np.asarray(losses.mean()), (logits,), None)
    n = z.size

    def bk(g):
        # stable sigmoid: exp of a non-positive argument only
        e = np.exp(-np.abs(z))
        sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        _accumulate(logits, float(g) * (sig - t) / n)

    out._backward = bk if out.requires_grad else None
    return out


def mse(a: Tensor, b: Tensor):
    """Mean of elementwise squared differences."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse shapes {a.shape} vs {b.shape}")
    d = a.data - b.data
    out = Tensor._from_op(np.asarray((d * d).mean()), (a, b), None)
    n = d.size

    def bk(g):
        scaled = (2.0 * float(g) / n) * d
        _accumulate(a, scaled)
        _accumulate(b, -scaled)

    out._backward = bk if out.requires_grad else None
    return out


def smooth_l1(pred: Tensor, target: Tensor):
    """Elementwise smooth-L1: 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise."""
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"smooth_l1 shapes {pred.shape} vs {target.shape}")
    d = pred.data - target.data
    a = np.abs(d)
    inside = a < 1.0
    vals = np.where(inside, 0.5 * d * d, a - 0.5)
    out = Tensor._from_op(vals, (pred, target), None)

    def bk(g):
        dd = np.where(inside, d, np.sign(d)) * g
        _accumulate(pred, dd)
        _accumulate(target, -dd)

    out._backward = bk if out.requires_grad else None
    return out
