"""Dense tensors with reverse-mode automatic differentiation.

Define-by-run tape on top of numpy buffers: every op records its parents and
a closure mapping the output gradient to parent gradients.  Graphs are single
use; ``backward`` frees the tape as it walks it.  float32 is the working
precision, float64 is available for verification runs (ops inherit the dtype
of their inputs).

Thread-safety contract: tensors are immutable after creation except for
gradient accumulation and in-place optimizer updates, so concurrent read-only
forward passes over shared tensors are safe; anything that writes ``grad`` or
``data`` needs exclusive access.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "add",
    "mul",
    "scale",
    "matmul",
    "affine",
    "relu",
    "sigmoid",
    "reshape",
    "swapaxes",
    "concat",
    "stack",
    "tsum",
    "tmean",
    "embedding",
    "masked_softmax_lastdim",
    "layer_norm",
    "bce_with_logits",
]

_FLOAT_DTYPES = (np.float32, np.float64)

# Module-level switch; flipping it is not thread-safe, callers serialize.
_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (inference fast path)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._grad_fn: Optional[Callable] = None
        self._consumed = False

    # -- introspection -------------------------------------------------

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

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{grad})"

    # -- graph management ----------------------------------------------

    def detach(self) -> "Tensor":
        """Leaf view of the same buffer, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        """Leaf copy in another precision (keeps requires_grad)."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate gradients into every requires_grad leaf below self.

        The loss must be a scalar produced by a recorded graph.  The tape is
        freed during the walk, so a second call without a fresh forward pass
        raises.
        """
        if self._consumed:
            raise RuntimeError("backward() already ran on this graph; re-run the forward pass")
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.data.shape}")
        if self._grad_fn is None and not self.requires_grad:
            raise RuntimeError("backward() on a tensor with no recorded graph")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._grad_fn is not None:
                for parent, pg in zip(node._parents, node._grad_fn(g)):
                    if pg is None:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            elif node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            # Tensors that neither record an op nor require grad absorb
            # nothing; their incoming gradient is dropped.

        for node in topo:
            node._grad_fn = None
            node._parents = ()
            node._consumed = True

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        out = self.data[idx]

        def grad_fn(g, idx=idx, shape=self.data.shape, dtype=self.data.dtype):
            full = np.zeros(shape, dtype=dtype)
            full[idx] = g  # basic indexing selects disjoint elements
            return (full,)

        return _make(out, (self,), grad_fn)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple, grad_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._grad_fn is not None for p in parents):
        out.requires_grad = False
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _unbroadcast_batch(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Like _unbroadcast but leaves the trailing two (matrix) axes alone."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i in range(len(shape) - 2) if shape[i] == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise and structural ops -------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(data, (a, b), grad_fn)


def scale(a: Tensor, s: float) -> Tensor:
    data = a.data * a.data.dtype.type(s)

    def grad_fn(g):
        return (g * a.data.dtype.type(s),)

    return _make(data, (a,), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; operands must have ndim >= 2, batch dims broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(
            f"matmul needs matrices, got shapes {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data

    def grad_fn(g):
        ga = _unbroadcast_batch(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast_batch(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _make(data, (a, b), grad_fn)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def grad_fn(g):
        return (g * (a.data > 0),)

    return _make(data, (a,), grad_fn)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)

    def grad_fn(g):
        return (g * s * (1.0 - s),)

    return _make(s, (a,), grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(a.data.shape),)

    return _make(data, (a,), grad_fn)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    data = np.swapaxes(a.data, ax1, ax2)

    def grad_fn(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _make(data, (a,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(data, tuple(tensors), grad_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)

    def grad_fn(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(data, tuple(tensors), grad_fn)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True),)

    return _make(data, (a,), grad_fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[i] for i in ax]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b fused into one node (w: [in, out], b: [out])."""
    if x.data.ndim < 2:
        raise ValueError(f"affine needs a matrix input, got shape {x.data.shape}")
    if x.data.shape[-1] != w.data.shape[0]:
        raise ValueError(f"affine dimensions disagree: {x.data.shape} @ {w.data.shape}")
    data = x.data @ w.data + b.data

    def grad_fn(g):
        # contiguous copy of the (small) transposed weight dodges numpy's
        # slow strided-matmul path; ditto the batched-then-reduced gw form
        gx = g @ np.ascontiguousarray(w.data.T)
        if g.ndim > 2:
            gw = (np.swapaxes(x.data, -1, -2) @ g).reshape(-1, w.data.shape[0], g.shape[-1]).sum(axis=0)
        else:
            gw = np.dot(x.data.T, g)
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw, gb

    return _make(data, (x, w, b), grad_fn)


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup into a learnable table; gradients scatter-add."""
    idx = np.asarray(indices, dtype=np.intp)
    data = table.data[idx]

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(data, (table,), grad_fn)


# -- normalization, attention softmax, loss ------------------------------


def masked_softmax_lastdim(x: Tensor, mask) -> Tensor:
    """Softmax over the last axis restricted to mask==True positions.

    Masked positions get exactly zero weight; valid positions sum to one per
    row.  A row with no valid position yields all zeros (padded rows must be
    inert, not NaN).  Stabilized by subtracting the max over valid entries.
    """
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.data.shape)
    z = np.where(m, x.data, -np.inf)
    rowmax = z.max(axis=-1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    np.subtract(z, rowmax, out=z)
    np.exp(z, out=z)  # masked slots: exp(-inf) = 0 exactly
    denom = z.sum(axis=-1, keepdims=True)
    np.divide(z, np.where(denom == 0.0, 1.0, denom), out=z)
    p = z.astype(x.data.dtype, copy=False)

    def grad_fn(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner),)

    return _make(p, (x,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis vector to zero mean / unit (biased) variance,
    then apply a learnable gain and bias."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xhat = x.data - mu
    var = np.einsum("...i,...i->...", xhat, xhat)[..., None] / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv  # owned temporary, safe to reuse in place
    data = xhat * gain.data + bias.data

    def grad_fn(g):
        h = g * gain.data
        hm = h.mean(axis=-1, keepdims=True)
        hx = (h * xhat).mean(axis=-1, keepdims=True)
        gx = (inv * (h - hm - xhat * hx)).astype(x.data.dtype, copy=False)
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead).reshape(gain.data.shape)
        gbias = g.sum(axis=lead).reshape(bias.data.shape)
        return gx, ggain, gbias

    return _make(data.astype(x.data.dtype, copy=False), (x, gain, bias), grad_fn)


def bce_with_logits(logit: Tensor, target) -> Tensor:
    """Binary cross entropy on a logit, in the stable log-sum-exp form.

    Elementwise; reduce with .mean() for batches.  target entries must be
    0 or 1.
    """
    t = np.asarray(target, dtype=logit.data.dtype)
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("bce_with_logits targets must be 0 or 1")
    z = logit.data
    data = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def grad_fn(g):
        return (_unbroadcast(g * (_sigmoid(z) - t), logit.data.shape),)

    return _make(data, (logit,), grad_fn)
