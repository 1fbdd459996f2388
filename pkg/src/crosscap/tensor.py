"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation builds a node in an implicit computation graph: the output
tensor keeps references to its differentiable inputs plus a closure that
pushes gradients back to them.  ``backward`` walks the graph once in reverse
topological order and accumulates (``+=``) into ``.grad`` of every tensor
that requires gradients, so calling it twice without ``zero_grads`` doubles
the gradients.

Storage is row-major float64 throughout; gradient checking relies on the
extra precision.  The graph is single-threaded: never share one graph
between threads.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / generation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float64 array with an optional gradient buffer.

    ``data`` is the value, ``grad`` (same shape) is populated by
    ``backward`` on every tensor that requires gradients.  Tensors produced
    by operations carry the graph links; user-created tensors are leaves.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
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

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Small amount of operator sugar; the functional forms below are the API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _make(data, parents, backward_fn):
    """Wrap an op result, recording graph links only when needed."""
    out = Tensor(data)
    if _grad_enabled:
        grad_parents = tuple(p for p in parents if p.requires_grad)
        if grad_parents:
            out.requires_grad = True
            out._parents = grad_parents
            out._backward = backward_fn
    return out


def _add_grad(grads, t, g):
    k = id(t)
    if k in grads:
        grads[k] = grads[k] + g
    else:
        grads[k] = g


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _topo_order(root):
    """All graph nodes reachable from ``root``, inputs before outputs."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/dt into ``t.grad`` for every reachable tensor.

    ``loss`` must be a scalar.  Gradients add onto whatever is already in
    ``.grad``; use ``zero_grads`` between optimization steps.
    """
    if loss.data.size != 1:
        raise ValueError(
            f"backward expects a scalar loss, got shape {loss.shape}"
        )
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward is not None:
            node._backward(g, grads)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def assert_finite(t, name="tensor"):
    """Raise if the tensor (or its gradient) holds NaN/Inf entries."""
    if not np.isfinite(t.data).all():
        bad = int(np.size(t.data) - np.isfinite(t.data).sum())
        raise ValueError(f"{name} contains {bad} non-finite data entries")
    if t.grad is not None and not np.isfinite(t.grad).all():
        bad = int(np.size(t.grad) - np.isfinite(t.grad).sum())
        raise ValueError(f"{name} contains {bad} non-finite grad entries")


# ---------------------------------------------------------------------------
# Elementwise and broadcasting operations
# ---------------------------------------------------------------------------


def add(a, b):
    def _bwd(g, grads):
        if a.requires_grad:
            _add_grad(grads, a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _add_grad(grads, b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), _bwd)


def sub(a, b):
    def _bwd(g, grads):
        if a.requires_grad:
            _add_grad(grads, a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _add_grad(grads, b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), _bwd)


def mul(a, b):
    def _bwd(g, grads):
        if a.requires_grad:
            _add_grad(grads, a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _add_grad(grads, b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), _bwd)


def scale(x, c):
    c = float(c)

    def _bwd(g, grads):
        _add_grad(grads, x, g * c)

    return _make(x.data * c, (x,), _bwd)


def exp(x):
    out_data = np.exp(x.data)

    def _bwd(g, grads):
        _add_grad(grads, x, g * out_data)

    return _make(out_data, (x,), _bwd)


def log(x):
    def _bwd(g, grads):
        _add_grad(grads, x, g / x.data)

    return _make(np.log(x.data), (x,), _bwd)


def tanh(x):
    out_data = np.tanh(x.data)

    def _bwd(g, grads):
        _add_grad(grads, x, g * (1.0 - out_data * out_data))

    return _make(out_data, (x,), _bwd)


def power(x, p):
    """Elementwise x**p for a constant float p (x > 0 for fractional p)."""
    p = float(p)
    out_data = x.data ** p

    def _bwd(g, grads):
        _add_grad(grads, x, g * p * x.data ** (p - 1.0))

    return _make(out_data, (x,), _bwd)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul expects 2-d operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: {a.shape} x {b.shape}"
        )

    def _bwd(g, grads):
        if a.requires_grad:
            _add_grad(grads, a, g @ b.data.T)
        if b.requires_grad:
            _add_grad(grads, b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), _bwd)


def bmm(a, b):
    """Batched matmul over a shared leading axis: [h,m,k] @ [h,k,n]."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ValueError(
            f"bmm expects 3-d operands, got {a.shape} and {b.shape}"
        )
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"bmm dimension mismatch: {a.shape} x {b.shape}")

    def _bwd(g, grads):
        if a.requires_grad:
            _add_grad(grads, a, g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            _add_grad(grads, b, a.data.swapaxes(-1, -2) @ g)

    return _make(np.matmul(a.data, b.data), (a, b), _bwd)


def transpose(x):
    if x.data.ndim != 2:
        raise ValueError(f"transpose expects a 2-d tensor, got {x.shape}")

    def _bwd(g, grads):
        _add_grad(grads, x, g.T)

    return _make(x.data.T.copy(), (x,), _bwd)


def permute(x, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def _bwd(g, grads):
        _add_grad(grads, x, g.transpose(inverse))

    return _make(x.data.transpose(axes).copy(), (x,), _bwd)


def reshape(x, shape):
    shape = tuple(shape)

    def _bwd(g, grads):
        _add_grad(grads, x, g.reshape(x.data.shape))

    return _make(x.data.reshape(shape).copy(), (x,), _bwd)


# ---------------------------------------------------------------------------
# Indexing and joining
# ---------------------------------------------------------------------------


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty tensor list")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _bwd(g, grads):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(start, stop)
                _add_grad(grads, t, g[tuple(index)])

    return _make(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, _bwd
    )


def narrow(x, start, stop, axis=0):
    """Contiguous slice [start:stop) along one axis."""
    n = x.data.shape[axis]
    if not (0 <= start < stop <= n):
        raise ValueError(
            f"narrow range [{start}:{stop}) out of bounds for axis {axis} "
            f"of shape {x.shape}"
        )
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def _bwd(g, grads):
        gx = np.zeros_like(x.data)
        gx[index] = g
        _add_grad(grads, x, gx)

    return _make(x.data[index].copy(), (x,), _bwd)


def gather_rows(x, indices):
    """Select rows of a 2-d tensor; duplicate indices accumulate on backward.

    This is the embedding lookup: ``gather_rows(table, token_ids)``.
    """
    if x.data.ndim != 2:
        raise ValueError(f"gather_rows expects a 2-d tensor, got {x.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError(f"gather_rows expects 1-d indices, got {idx.shape}")
    n = x.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)][0]
        raise IndexError(f"gather_rows index {bad} out of range [0, {n})")

    def _bwd(g, grads):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _add_grad(grads, x, gx)

    return _make(x.data[idx], (x,), _bwd)


# ---------------------------------------------------------------------------
# Reductions and normalizations
# ---------------------------------------------------------------------------


def sum_all(x):
    def _bwd(g, grads):
        _add_grad(grads, x, np.broadcast_to(g, x.data.shape).copy())

    return _make(x.data.sum(), (x,), _bwd)


def sum_axis(x, axis, keepdims=False):
    def _bwd(g, grads):
        gk = g if keepdims else np.expand_dims(g, axis)
        _add_grad(grads, x, np.broadcast_to(gk, x.data.shape).copy())

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), _bwd)


def mean_axis(x, axis, keepdims=False):
    n = x.data.shape[axis]

    def _bwd(g, grads):
        gk = g if keepdims else np.expand_dims(g, axis)
        _add_grad(grads, x, np.broadcast_to(gk / n, x.data.shape).copy())

    return _make(x.data.mean(axis=axis, keepdims=keepdims), (x,), _bwd)


def mean_pool(x):
    """Mean over the sequence axis of a [length, dim] tensor."""
    if x.data.ndim != 2:
        raise ValueError(f"mean_pool expects a 2-d tensor, got {x.shape}")
    if x.data.shape[0] == 0:
        raise ValueError("mean_pool of an empty sequence")
    return mean_axis(x, axis=0)


def moments(x):
    """Mean and (biased) variance along the last axis, keepdims.

    Both outputs are graph tensors, so layer statistics are differentiable.
    """
    m = mean_axis(x, axis=-1, keepdims=True)
    centered = sub(x, m)
    var = mean_axis(mul(centered, centered), axis=-1, keepdims=True)
    return m, var


def layer_norm(x, gain, offset, eps=1e-5):
    """Normalize along the last axis to zero mean / unit variance (biased),
    then scale by ``gain`` and shift by ``offset`` (both shape [d]).

    Fused into one graph node; the backward follows the standard
    normalized-activation gradient identity.
    """
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    out_data = x_hat * gain.data + offset.data

    def _bwd(g, grads):
        if gain.requires_grad:
            _add_grad(grads, gain, _unbroadcast(g * x_hat, gain.data.shape))
        if offset.requires_grad:
            _add_grad(grads, offset, _unbroadcast(g, offset.data.shape))
        if x.requires_grad:
            d_hat = g * gain.data
            mean_d = d_hat.mean(axis=-1, keepdims=True)
            mean_dx = (d_hat * x_hat).mean(axis=-1, keepdims=True)
            _add_grad(grads, x,
                      inv_std * (d_hat - mean_d - x_hat * mean_dx))

    return _make(out_data, (x, gain, offset), _bwd)


def softmax(x, axis=-1):
    """Numerically stable softmax along ``axis`` (max subtraction)."""
    if axis >= x.data.ndim or axis < -x.data.ndim:
        raise ValueError(f"softmax axis {axis} out of range for {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def _bwd(g, grads):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _add_grad(grads, x, out_data * (g - dot))

    return _make(out_data, (x,), _bwd)


def cross_entropy_with_logits(logits, targets, ignore_index=None):
    """Mean negative log-softmax probability of the target ids.

    ``logits`` is [positions, vocab]; positions whose target equals
    ``ignore_index`` contribute nothing to the loss or the gradient.
    """
    if logits.data.ndim != 2:
        raise ValueError(
            f"cross_entropy expects 2-d logits, got {logits.shape}"
        )
    tgt = np.asarray(targets, dtype=np.intp)
    if tgt.ndim != 1 or tgt.shape[0] != logits.data.shape[0]:
        raise ValueError(
            f"targets shape {tgt.shape} does not match logits {logits.shape}"
        )
    vocab = logits.data.shape[1]
    keep = np.ones(tgt.shape[0], dtype=bool) if ignore_index is None \
        else tgt != ignore_index
    kept = tgt[keep]
    if kept.size == 0:
        raise ValueError("cross_entropy: every position is ignored")
    if kept.min() < 0 or kept.max() >= vocab:
        bad = kept[(kept < 0) | (kept >= vocab)][0]
        raise IndexError(
            f"cross_entropy target {bad} out of vocabulary range [0, {vocab})"
        )

    rows = logits.data[keep]
    m = rows.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(rows - m).sum(axis=1))
    nll = lse - rows[np.arange(rows.shape[0]), kept]
    loss = nll.mean()

    def _bwd(g, grads):
        p = np.exp(rows - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(rows.shape[0]), kept] -= 1.0
        gx = np.zeros_like(logits.data)
        gx[keep] = (float(g) / rows.shape[0]) * p
        _add_grad(grads, logits, gx)

    return _make(loss, (logits,), _bwd)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


@dataclass
class FiniteDiffReport:
    """Result of comparing backward gradients against central differences."""

    max_rel_error: float
    tol: float
    h: float
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.max_rel_error < self.tol


def finite_diff_check(f, params, h=1e-5, tol=1e-4, names=None):
    """Compare backward gradients of ``f()`` against central differences.

    ``f`` rebuilds its graph on every call and returns a scalar tensor.
    Relative error per entry is |a - b| / (|a| + |b| + 1e-12); the report
    carries the maximum over all entries of all ``params``.
    """
    if h <= 0:
        raise ValueError(f"finite_diff_check step h must be positive, got {h}")
    params = list(params)
    if names is None:
        names = [f"param{i}" for i in range(len(params))]

    zero_grads(params)
    backward(f())
    analytic = []
    for t in params:
        if t.grad is None:
            analytic.append(np.zeros_like(t.data))
        else:
            analytic.append(t.grad.copy())

    max_err = 0.0
    per_param = {}
    for name, t, a in zip(names, params, analytic):
        flat = t.data.reshape(-1)
        grad_flat = a.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            hi = float(f().data)
            flat[i] = saved - h
            lo = float(f().data)
            flat[i] = saved
            numeric = (hi - lo) / (2.0 * h)
            err = abs(grad_flat[i] - numeric) / (
                abs(grad_flat[i]) + abs(numeric) + 1e-12
            )
            worst = max(worst, err)
        per_param[name] = worst
        max_err = max(max_err, worst)

    zero_grads(params)
    return FiniteDiffReport(max_rel_error=max_err, tol=tol, h=h,
                            per_param=per_param)
