"""Shared oracles for the test suite."""

import numpy as np

from sacc import tensor as T
from sacc.corpus import bundled_records

EPS = 1e-5
REL_TOL = 1e-4


def bundled_source(stem):
    for r in bundled_records():
        if r["id"].startswith(stem):
            return r["source"]
    raise KeyError(stem)


def numeric_grad(f, arrays, index, eps=EPS):
    """Central-difference gradient of scalar ``f(*arrays)`` wrt ``arrays[index]``."""
    base = [np.array(a, dtype=np.float64, copy=True) for a in arrays]
    x = base[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f(*base)
        x[i] = old - eps
        lo = f(*base)
        x[i] = old
        grad[i] = (hi - lo) / (2 * eps)
    return grad


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b))))


def check_grads(build, arrays, which=None):
    """Compare autodiff and finite-difference gradients of ``build``.

    ``build`` maps Tensors to a scalar Tensor.  Returns the worst relative
    error over the inputs listed in ``which`` (default: all).
    """
    which = range(len(arrays)) if which is None else which
    ts = [T.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    build(*ts).backward()

    def scalar(*arrs):
        with T.no_grad():
            return float(build(*[T.Tensor(a) for a in arrs]).data)

    worst = 0.0
    for i in which:
        auto = ts[i].grad if ts[i].grad is not None else np.zeros_like(ts[i].data)
        worst = max(worst, rel_error(auto, numeric_grad(scalar, arrays, i)))
    return worst


def random_parents(n, rng):
    """Parent array of a random recursive tree (node i hangs under some j < i)."""
    return [None] + [int(rng.integers(0, i)) for i in range(1, n)]


def tree_adjacency(parent):
    n = len(parent)
    adj = np.eye(n, dtype=bool)
    for i, p in enumerate(parent):
        if p is not None:
            adj[i, p] = adj[p, i] = True
    return adj


# -- plain numpy Transformer used as a dense reference ---------------------------

def ref_layer_norm(z, gain, bias, eps):
    mu = z.mean(axis=1, keepdims=True)
    var = ((z - mu) ** 2).mean(axis=1, keepdims=True)
    return (z - mu) / np.sqrt(var + eps) * gain + bias


def ref_pe(n, d):
    pe = np.zeros((n, d))
    for pos in range(n):
        for i in range(0, d, 2):
            angle = pos / 10000 ** (i / d)
            pe[pos, i] = np.sin(angle)
            pe[pos, i + 1] = np.cos(angle)
    return pe


def ref_layer(x, lp, allowed=None, eps=1e-5):
    heads = []
    for wq, wk, wv in zip(lp.W_q, lp.W_k, lp.W_v):
        q, k, v = x @ wq.data, x @ wk.data, x @ wv.data
        s = q @ k.T / np.sqrt(q.shape[1])
        if allowed is not None:
            s = np.where(allowed, s, -np.inf)
        p = np.exp(s - s.max(axis=1, keepdims=True))
        heads.append(p / p.sum(axis=1, keepdims=True) @ v)
    y = ref_layer_norm(x + np.hstack(heads) @ lp.W_o.data, lp.ln1_gain.data, lp.ln1_bias.data, eps)
    f = np.maximum(y @ lp.W_1.data + lp.b_1.data, 0) @ lp.W_2.data + lp.b_2.data
    return ref_layer_norm(y + f, lp.ln2_gain.data, lp.ln2_bias.data, eps)


def ref_logits(e, layers, W_o, b_o, allowed=None, eps=1e-5):
    x = np.asarray(e) + ref_pe(len(e), np.asarray(e).shape[1])
    for lp in layers:
        x = ref_layer(x, lp, allowed, eps)
    return x.max(axis=0) @ W_o.data + b_o.data
