"""A small reverse-mode autodiff library over numpy arrays.

Each primitive computes its forward value eagerly and, when any input
requires gradients, records a closure that accumulates into the inputs'
``grad`` fields.  ``Tensor.backward`` replays the closures in reverse
topological order.

Only what the model needs is here: 2-D matmul, bias broadcasting over the
leading axis, a handful of elementwise ops, row gathers/segment reductions,
layer norm, masked softmax and a fused sparse attention kernel.
"""

import threading
from contextlib import contextmanager

import numpy as np
import scipy.sparse as sp

from .errors import EmptyReduction, NotScalar, ShapeMismatch

DEFAULT_DTYPE = np.float64

_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording the graph (inference); per thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_owns_grad")

    def __init__(self, data, requires_grad=False, _parents=(), op="leaf", dtype=None):
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._owns_grad = False
        self._parents = _parents
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def _accum(self, g, owned=False):
        # ``owned``: g is a fresh array nobody else references.  Borrowed
        # arrays are only copied when a second contribution arrives.
        if self.grad is None:
            if g.shape != self.data.shape:
                g, owned = np.broadcast_to(g, self.data.shape), False
            self.grad = g
            self._owns_grad = owned
        elif self._owns_grad:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._owns_grad = True

    def backward(self):
        if self.data.size != 1:
            raise NotScalar(f"backward needs a scalar, got shape {self.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        # leaves accumulate across calls; intermediate results start fresh
        for node in order:
            if node._parents:
                node.grad = None
        self._accum(np.ones_like(self.data), owned=True)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # parents may now alias this buffer; never update it in place again
                node._owns_grad = False


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, op, backward):
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), op=op)
    if needs:
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"(m, {a.shape[-1]}) @ ({a.shape[-1]}, n)", f"{a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T, owned=True)
        if b.requires_grad:
            b._accum(_outer_product(a.data, g), owned=True)

    return _result(a.data @ b.data, (a, b), "matmul", backward)


def _outer_product(a, g):
    # a.T @ g; BLAS is markedly faster when the wide operand is on the right
    if a.shape[1] > g.shape[1]:
        return np.ascontiguousarray((g.T @ a).T)
    return a.T @ g


def linear(x, w, b, relu=False):
    """``x @ w + b`` with the bias broadcast over rows, optionally followed by relu.

    Fusing the bias and activation saves two full passes over the output.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != w.shape[1:]:
        raise ShapeMismatch(f"(m, {w.shape[0]}) @ {w.shape} + {w.shape[1:]}", (x.shape, b.shape))
    out = x.data @ w.data
    out += b.data
    if relu:
        np.maximum(out, 0.0, out=out)

    def backward(g):
        if relu:
            g = g * (out > 0)
        if x.requires_grad:
            x._accum(g @ w.data.T, owned=True)
        if w.requires_grad:
            w._accum(_outer_product(x.data, g), owned=True)
        if b.requires_grad:
            b._accum(g.sum(axis=0), owned=True)

    return _result(out, (x, w, b), "linear", backward)


def feed_forward(x, w1, b1, w2, b2):
    """``relu(x @ w1 + b1) @ w2 + b2`` as one node.

    The hidden activation is never exposed, so its gradient buffer can be
    masked in place instead of allocating another hidden-sized array.
    """
    x, w1, b1, w2, b2 = (_as_tensor(t) for t in (x, w1, b1, w2, b2))
    if (x.data.ndim != 2 or x.shape[1] != w1.shape[0] or b1.shape != w1.shape[1:]
            or w2.shape[0] != w1.shape[1] or b2.shape != w2.shape[1:]):
        raise ShapeMismatch("x:(m,a) w1:(a,h) b1:(h,) w2:(h,o) b2:(o,)",
                            (x.shape, w1.shape, b1.shape, w2.shape, b2.shape))
    hidden = x.data @ w1.data
    hidden += b1.data
    np.maximum(hidden, 0.0, out=hidden)
    out = hidden @ w2.data
    out += b2.data

    def backward(g):
        if w2.requires_grad:
            w2._accum(_outer_product(hidden, g), owned=True)
        if b2.requires_grad:
            b2._accum(g.sum(axis=0), owned=True)
        if not (x.requires_grad or w1.requires_grad or b1.requires_grad):
            return
        dh = g @ w2.data.T
        dh *= hidden > 0
        if x.requires_grad:
            x._accum(dh @ w1.data.T, owned=True)
        if w1.requires_grad:
            w1._accum(_outer_product(x.data, dh), owned=True)
        if b1.requires_grad:
            b1._accum(dh.sum(axis=0), owned=True)

    return _result(out, (x, w1, b1, w2, b2), "feed_forward", backward)


def transpose(a):
    a = _as_tensor(a)

    def backward(g):
        a._accum(g.T)

    return _result(a.data.T, (a,), "transpose", backward)


def sparse_matmul(s, a):
    """``s @ a`` for a constant scipy sparse matrix ``s``."""
    a = _as_tensor(a)
    if s.shape[1] != a.shape[0]:
        raise ShapeMismatch(f"({s.shape[1]}, ...)", a.shape)
    st = None

    def backward(g):
        nonlocal st
        if st is None:
            st = s.T.tocsr()
        a._accum(np.asarray(st @ g), owned=True)

    return _result(np.asarray(s @ a.data), (a,), "sparse_matmul", backward)


# ---------------------------------------------------------------------------
# elementwise

def add(a, b):
    """``a + b`` where ``b`` matches ``a`` or broadcasts over a's leading axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.shape == a.shape:
        bias = False
    elif b.shape == a.shape[1:]:
        bias = True
    else:
        raise ShapeMismatch(a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            if bias:
                b._accum(g.sum(axis=0), owned=True)
            else:
                b._accum(g)

    return _result(a.data + b.data, (a, b), "add", backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a._accum(g * b.data, owned=True)
        if b.requires_grad:
            b._accum(g * a.data, owned=True)

    return _result(a.data * b.data, (a, b), "mul", backward)


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)

    def backward(g):
        a._accum(g * c, owned=True)

    return _result(a.data * c, (a,), "scale", backward)


def tanh(a):
    a = _as_tensor(a)
    y = np.tanh(a.data)

    def backward(g):
        a._accum(g * (1.0 - y * y), owned=True)

    return _result(y, (a,), "tanh", backward)


def relu(a):
    a = _as_tensor(a)
    y = np.maximum(a.data, 0.0)

    def backward(g):
        a._accum(g * (y > 0), owned=True)

    return _result(y, (a,), "relu", backward)


def sum_all(a):
    a = _as_tensor(a)

    def backward(g):
        a._accum(np.full(a.shape, g, dtype=a.data.dtype), owned=True)

    return _result(np.asarray(a.data.sum()), (a,), "sum", backward)


# ---------------------------------------------------------------------------
# shape and indexing

def concat_columns(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    rows = {t.shape[0] for t in tensors}
    if len(rows) != 1:
        raise ShapeMismatch("equal row counts", [t.shape for t in tensors])
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accum(g[:, lo:hi])

    return _result(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), "concat_columns", backward)


def concat_rows(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    cols = {t.shape[1:] for t in tensors}
    if len(cols) != 1:
        raise ShapeMismatch("equal column counts", [t.shape for t in tensors])
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accum(g[lo:hi])

    return _result(np.concatenate([t.data for t in tensors], axis=0), tuple(tensors), "concat_rows", backward)


def gather_rows(table, indices):
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeMismatch(f"indices in [0, {table.shape[0]})", (int(idx.min()), int(idx.max())))

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, idx, g)
        table._accum(grad, owned=True)

    return _result(table.data[idx], (table,), "gather_rows", backward)


def segment_max(a, starts):
    """Column-wise max over contiguous row segments.

    ``starts`` holds the first row of each segment (strictly increasing,
    beginning at 0).  Returns ``(values, argmax)`` where ``argmax`` holds
    absolute row indices; ties resolve to the first row.
    """
    a = _as_tensor(a)
    starts = np.asarray(starts, dtype=np.intp)
    if a.shape[0] == 0 or starts.size == 0:
        raise EmptyReduction("max over zero rows")
    if starts[0] != 0 or np.any(np.diff(starts) <= 0) or starts[-1] >= a.shape[0]:
        raise ShapeMismatch("non-empty increasing segments", starts.tolist())
    vals = np.maximum.reduceat(a.data, starts, axis=0)
    seg_of_row = np.repeat(np.arange(starts.size), np.diff(np.append(starts, a.shape[0])))
    hit = a.data == vals[seg_of_row]
    row_ids = np.where(hit, np.arange(a.shape[0])[:, None], a.shape[0])
    argmax = np.minimum.reduceat(row_ids, starts, axis=0)
    cols = np.broadcast_to(np.arange(a.shape[1]), argmax.shape)

    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, (argmax, cols), g)
        a._accum(grad, owned=True)

    return _result(vals, (a,), "segment_max", backward), argmax


def maxpool_rows(a):
    """Column-wise max over all rows: ``(values, argmax)`` with 1-D outputs."""
    a = _as_tensor(a)
    if a.data.ndim != 2 or a.shape[0] == 0:
        raise EmptyReduction("max over zero rows")
    argmax = np.argmax(a.data, axis=0)
    cols = np.arange(a.shape[1])

    def backward(g):
        grad = np.zeros_like(a.data)
        grad[argmax, cols] = g
        a._accum(grad, owned=True)

    return _result(a.data[argmax, cols], (a,), "maxpool_rows", backward), argmax


def reshape(a, shape):
    a = _as_tensor(a)

    def backward(g):
        a._accum(g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), "reshape", backward)


# ---------------------------------------------------------------------------
# normalization and softmax

def layer_norm(a, gain, bias, eps=1e-5):
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    if a.data.ndim != 2 or gain.shape != a.shape[1:] or bias.shape != a.shape[1:]:
        raise ShapeMismatch(a.shape[1:], (gain.shape, bias.shape))
    mu = a.data.mean(axis=1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        if gain.requires_grad:
            gain._accum((g * xhat).sum(axis=0), owned=True)
        if bias.requires_grad:
            bias._accum(g.sum(axis=0), owned=True)
        if a.requires_grad:
            gx = g * gain.data
            a._accum(inv * (gx - gx.mean(axis=1, keepdims=True)
                            - xhat * (gx * xhat).mean(axis=1, keepdims=True)), owned=True)

    return _result(xhat * gain.data + bias.data, (a, gain, bias), "layer_norm", backward)


def softmax_rows_masked(a, mask):
    """Row softmax over entries where ``mask`` is true; others get exactly 0.

    A row with no allowed entries comes out as all zeros.
    """
    a = _as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeMismatch(a.shape, mask.shape)
    s = np.where(mask, a.data, -np.inf)
    m = s.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(s - m)
    z = e.sum(axis=1, keepdims=True)
    y = e / np.where(z > 0, z, 1.0)

    def backward(g):
        a._accum(y * (g - (g * y).sum(axis=1, keepdims=True)), owned=True)

    return _result(y, (a,), "softmax_rows_masked", backward)


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of ``targets`` under row-softmax(logits)."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.intp)
    b = logits.shape[0]
    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(b), targets].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(b), targets] -= 1.0
        logits._accum(g * p / b, owned=True)

    return _result(np.asarray(loss), (logits,), "cross_entropy", backward)


# ---------------------------------------------------------------------------
# attention kernels

_PAIR_CHUNK = 512


def _pair_dots(a, ra, b, rb):
    """``out[p] = a[ra[p]] . b[rb[p]]``, gathered in cache-sized chunks."""
    out = np.empty(ra.size, dtype=np.result_type(a, b))
    for lo in range(0, ra.size, _PAIR_CHUNK):
        hi = lo + _PAIR_CHUNK
        np.einsum("pd,pd->p", a[ra[lo:hi]], b[rb[lo:hi]], out=out[lo:hi])
    return out


def sparse_attention(q, k, v, indptr, indices):
    """Scaled dot-product attention over an explicit CSR pair list.

    Only pairs ``(i, indices[indptr[i]:indptr[i+1]])`` are scored.  Every row
    must contain at least one pair.  Returns ``(output, weights)`` where
    ``weights`` is a CSR matrix of the softmax weights.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    n, dk = q.shape
    if k.shape != (n, dk) or v.shape[0] != n:
        raise ShapeMismatch((n, dk), (k.shape, v.shape))
    indptr = np.asarray(indptr, dtype=np.intp)
    indices = np.asarray(indices, dtype=np.intp)
    counts = np.diff(indptr)
    if np.any(counts == 0):
        raise ShapeMismatch("non-empty mask rows", int(np.argmin(counts)))
    rows = np.repeat(np.arange(n), counts)
    starts = indptr[:-1]
    c = 1.0 / np.sqrt(dk)

    s = _pair_dots(q.data, rows, k.data, indices)
    s *= c
    s = s - np.maximum.reduceat(s, starts)[rows]
    e = np.exp(s)
    w = e / np.add.reduceat(e, starts)[rows]
    W = sp.csr_matrix((w, indices, indptr), shape=(n, n))
    out = np.asarray(W @ v.data)

    def backward(g):
        if v.requires_grad:
            v._accum(np.asarray(W.T @ g), owned=True)
        if q.requires_grad or k.requires_grad:
            dw = _pair_dots(g, rows, v.data, indices)
            ds = w * (dw - np.add.reduceat(w * dw, starts)[rows]) * c
            S = sp.csr_matrix((ds, indices, indptr), shape=(n, n))
            if q.requires_grad:
                q._accum(np.asarray(S @ k.data), owned=True)
            if k.requires_grad:
                k._accum(np.asarray(S.T @ q.data), owned=True)

    return _result(out, (q, k, v), "sparse_attention", backward), W
