"""Sparse attention masks and the masked Transformer encoder.

Masks are stored in CSR form: for each query row ``i`` a sorted array of the
key columns it may attend to.  Every row always contains its diagonal, so a
softmax row is never empty.  Each allowed pair also carries a bitmask of the
patterns that admitted it.

Attention runs along one of two paths sharing the same mask:

* ``"dense"``: score all N*N pairs, then softmax with disallowed scores
  excluded (the reference path);
* ``"sparse"``: gather and score only the allowed pairs.
"""

import functools
import math
from dataclasses import dataclass, field, fields
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, IndexOutOfRange, LengthMismatch, NotSymmetric, OddDimension, ShapeMismatch, ZeroLength

PATTERN_BITS = {"local": 1, "global": 2, "ast": 4, "dilated": 8, "random": 16}
PATTERN_NAMES = tuple(PATTERN_BITS)


class AttentionMask:
    """Allowed (query, key) pairs for an N-element sequence."""

    def __init__(self, n, indptr, indices, prov):
        self.N = n
        self.indptr = indptr
        self.indices = indices
        self.prov = prov
        self._dense = None

    @classmethod
    def from_pairs(cls, n, rows, cols, bits=0):
        """Build a mask from pair lists; duplicates merge and the diagonal is added."""
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        bits = np.broadcast_to(np.asarray(bits, dtype=np.uint8), rows.shape)
        diag = np.arange(n, dtype=np.int64)
        keys = np.concatenate([rows * n + cols, diag * n + diag])
        allbits = np.concatenate([bits, np.zeros(n, dtype=np.uint8)])
        uniq, inv = np.unique(keys, return_inverse=True)
        prov = np.zeros(uniq.size, dtype=np.uint8)
        np.bitwise_or.at(prov, inv.ravel(), allbits)
        r = uniq // n if n else uniq
        indptr = np.zeros(n + 1, dtype=np.intp)
        np.cumsum(np.bincount(r, minlength=n), out=indptr[1:])
        indices = (uniq % n).astype(np.intp) if n else uniq.astype(np.intp)
        return cls(n, indptr, indices, prov)

    @classmethod
    def from_dense(cls, allowed, bits=0):
        allowed = np.asarray(allowed, dtype=bool)
        ii, jj = np.nonzero(allowed)
        return cls.from_pairs(allowed.shape[0], ii, jj, bits)

    @property
    def pairs(self):
        return int(self.indices.size)

    @property
    def rows(self):
        return [self.indices[self.indptr[i]:self.indptr[i + 1]] for i in range(self.N)]

    def row_ids(self):
        return np.repeat(np.arange(self.N), np.diff(self.indptr))

    def to_dense(self):
        if self._dense is None:
            d = np.zeros((self.N, self.N), dtype=bool)
            d[self.row_ids(), self.indices] = True
            self._dense = d
        return self._dense

    def pair_set(self):
        return set(zip(self.row_ids().tolist(), self.indices.tolist()))

    def provenance(self, i, j):
        lo, hi = self.indptr[i], self.indptr[i + 1]
        k = lo + np.searchsorted(self.indices[lo:hi], j)
        if k >= hi or self.indices[k] != j:
            return None
        return {name for name, bit in PATTERN_BITS.items() if self.prov[k] & bit}

    def provenance_matrix(self):
        """N x N nested list of pattern-name lists (empty for disallowed cells)."""
        out = [[[] for _ in range(self.N)] for _ in range(self.N)]
        for r, c, b in zip(self.row_ids().tolist(), self.indices.tolist(), self.prov.tolist()):
            out[r][c] = [name for name, bit in PATTERN_BITS.items() if b & bit]
        return out

    def padded(self, total):
        """Extend to ``total`` rows; padding rows attend only to themselves."""
        if total < self.N:
            raise LengthMismatch(f"cannot pad {self.N} rows down to {total}")
        extra = np.arange(self.N, total)
        indptr = np.concatenate([self.indptr, self.indptr[-1] + np.arange(1, extra.size + 1)])
        return AttentionMask(total, indptr, np.concatenate([self.indices, extra]),
                             np.concatenate([self.prov, np.zeros(extra.size, np.uint8)]))

    def __eq__(self, other):
        return (isinstance(other, AttentionMask) and self.N == other.N
                and np.array_equal(self.indptr, other.indptr) and np.array_equal(self.indices, other.indices))

    def __repr__(self):
        return f"AttentionMask(N={self.N}, pairs={self.pairs})"


def block_diag(masks):
    """Pack per-sample masks into one block-diagonal mask."""
    offsets = np.cumsum([0] + [m.N for m in masks])
    indptr = [np.zeros(1, dtype=np.intp)]
    base = 0
    for m in masks:
        indptr.append(m.indptr[1:] + base)
        base += m.pairs
    indices = np.concatenate([m.indices + off for m, off in zip(masks, offsets)])
    prov = np.concatenate([m.prov for m in masks])
    return AttentionMask(int(offsets[-1]), np.concatenate(indptr), indices, prov)


def local_mask(n, w, strict=False):
    if w < 1:
        raise ValueError("window must be >= 1")
    radius = w // 2
    if strict:
        radius -= 1
    offsets = np.arange(-radius, radius + 1) if radius >= 0 else np.arange(0)
    return _offset_mask(n, offsets, PATTERN_BITS["local"])


def dilated_mask(n, w, gap):
    if gap < 1:
        raise ValueError("gap must be >= 1")
    steps = np.arange(-(w // 2), w // 2 + 1) * gap
    return _offset_mask(n, steps, PATTERN_BITS["dilated"])


def _offset_mask(n, offsets, bit):
    i = np.arange(n)
    rows, cols = [], []
    for off in offsets:
        j = i + off
        ok = (j >= 0) & (j < n)
        rows.append(i[ok])
        cols.append(j[ok])
    if not rows:
        return AttentionMask.from_pairs(n, [], [])
    return AttentionMask.from_pairs(n, np.concatenate(rows), np.concatenate(cols), bit)


def global_mask(n, g_set):
    g = np.unique(np.asarray(list(g_set), dtype=np.int64))
    if g.size and (g.min() < 0 or g.max() >= n):
        raise IndexOutOfRange(f"global indices must lie in [0, {n})")
    allr = np.arange(n)
    rows = np.concatenate([np.repeat(g, n), np.tile(allr, g.size)])
    cols = np.concatenate([np.tile(allr, g.size), np.repeat(g, n)])
    return AttentionMask.from_pairs(n, rows, cols, PATTERN_BITS["global"])


def ast_mask(adj):
    adj = np.asarray(adj, dtype=bool)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ShapeMismatch("square matrix", adj.shape)
    if not np.array_equal(adj, adj.T):
        raise NotSymmetric("AST adjacency must be symmetric")
    return AttentionMask.from_dense(adj, PATTERN_BITS["ast"])


def random_mask(n, per_row, seed):
    if per_row > n:
        raise ValueError("per_row must be <= N")
    rng = np.random.default_rng(seed)
    rows, cols = [], []
    if per_row > 0:
        for i in range(n):
            rows.append(np.full(per_row, i))
            cols.append(rng.choice(n, size=per_row, replace=False))
        return AttentionMask.from_pairs(n, np.concatenate(rows), np.concatenate(cols), PATTERN_BITS["random"])
    return AttentionMask.from_pairs(n, [], [])


def union(masks):
    masks = list(masks)
    if not masks:
        raise ValueError("union of no masks")
    n = masks[0].N
    if any(m.N != n for m in masks):
        raise LengthMismatch(f"masks have different lengths: {[m.N for m in masks]}")
    rows = np.concatenate([m.row_ids() for m in masks])
    cols = np.concatenate([m.indices for m in masks])
    bits = np.concatenate([m.prov for m in masks])
    return AttentionMask.from_pairs(n, rows, cols, bits)


def full_mask(n):
    return AttentionMask.from_dense(np.ones((n, n), dtype=bool))


# ---------------------------------------------------------------------------
# configuration and parameters

@dataclass
class ModelConfig:
    d_model: int = 128
    d_embed: int = 128
    layers: int = 2
    heads: int = 2
    d_k: int = 64
    d_ff: int = 2048
    window: int = 3
    strict_window: bool = False
    global_size: int = 1
    global_indices: Optional[List[int]] = None
    patterns: List[str] = field(default_factory=lambda: ["local", "global", "ast"])
    dilation: int = 2
    random_per_row: int = 1
    random_seed: int = 0
    adj_closure: bool = False
    num_classes: int = 2
    pooling: str = "max"
    attention_path: str = "sparse"
    min_freq: int = 1
    ln_eps: float = 1e-5

    def validate(self):
        if self.heads * self.d_k != self.d_model:
            raise ConfigError(f"heads*d_k ({self.heads}*{self.d_k}) must equal d_model ({self.d_model})")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError("window must be a positive odd integer")
        if self.global_size < 0:
            raise ConfigError("global_size must be >= 0")
        unknown = set(self.patterns) - set(PATTERN_NAMES)
        if unknown:
            raise ConfigError(f"unknown attention patterns: {sorted(unknown)}")
        if self.pooling != "max":
            raise ConfigError("only max pooling is supported")
        if self.attention_path not in ("sparse", "dense"):
            raise ConfigError("attention_path must be 'sparse' or 'dense'")
        if self.d_model % 2:
            raise ConfigError("d_model must be even")
        if self.num_classes < 1 or self.layers < 0 or self.d_ff < 1:
            raise ConfigError("num_classes, layers and d_ff must be positive")
        return self

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


def xavier(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class LayerParams:
    W_q: List[T.Tensor]
    W_k: List[T.Tensor]
    W_v: List[T.Tensor]
    W_o: T.Tensor
    W_1: T.Tensor
    b_1: T.Tensor
    W_2: T.Tensor
    b_2: T.Tensor
    ln1_gain: T.Tensor
    ln1_bias: T.Tensor
    ln2_gain: T.Tensor
    ln2_bias: T.Tensor

    @classmethod
    def init(cls, config, rng):
        d, dk, h, dff = config.d_model, config.d_k, config.heads, config.d_ff

        def p(a):
            return T.Tensor(a, requires_grad=True)

        W_q, W_k, W_v = [], [], []
        for _ in range(h):
            W_q.append(p(xavier(rng, d, dk)))
            W_k.append(p(xavier(rng, d, dk)))
            W_v.append(p(xavier(rng, d, dk)))
        return cls(
            W_q, W_k, W_v,
            W_o=p(xavier(rng, h * dk, d)),
            W_1=p(xavier(rng, d, dff)), b_1=p(np.zeros(dff)),
            W_2=p(xavier(rng, dff, d)), b_2=p(np.zeros(d)),
            ln1_gain=p(np.ones(d)), ln1_bias=p(np.zeros(d)),
            ln2_gain=p(np.ones(d)), ln2_bias=p(np.zeros(d)),
        )

    def named(self, prefix):
        for h in range(len(self.W_q)):
            yield f"{prefix}.head{h}.W_q", self.W_q[h]
            yield f"{prefix}.head{h}.W_k", self.W_k[h]
            yield f"{prefix}.head{h}.W_v", self.W_v[h]
        for name in ("W_o", "W_1", "b_1", "W_2", "b_2", "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
            yield f"{prefix}.{name}", getattr(self, name)


# ---------------------------------------------------------------------------
# mask construction from a config

def global_set(n, config):
    if config.global_indices is not None:
        return [i for i in config.global_indices if i < n]
    return list(range(min(config.global_size, n)))


def build_mask(n, config, adj=None):
    """Union of the patterns enabled in ``config`` for a length-``n`` sequence."""
    masks = [AttentionMask.from_pairs(n, [], [])]
    pats = set(config.patterns)
    if "local" in pats:
        masks.append(local_mask(n, config.window, strict=config.strict_window))
    if "global" in pats:
        masks.append(global_mask(n, global_set(n, config)))
    if "ast" in pats:
        if adj is None:
            raise ValueError("AST pattern enabled but no adjacency given")
        masks.append(ast_mask(adj))
    if "dilated" in pats:
        masks.append(dilated_mask(n, config.window, config.dilation))
    if "random" in pats:
        masks.append(random_mask(n, min(config.random_per_row, n), config.random_seed))
    return union(masks)


# ---------------------------------------------------------------------------
# forward computation

def positional_encoding(n, d_model):
    """Sinusoidal table, n x d_model.  Cached; the returned array is read-only."""
    if d_model % 2:
        raise OddDimension(f"d_model must be even, got {d_model}")
    return _pe_table(int(n), int(d_model))


@functools.lru_cache(maxsize=32)
def _pe_table(n, d_model):
    pos = np.arange(n, dtype=np.float64)[:, None]
    rate = 10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.empty((n, d_model))
    pe[:, 0::2] = np.sin(pos / rate)
    pe[:, 1::2] = np.cos(pos / rate)
    pe.flags.writeable = False
    return pe


def _attend(q, k, v, mask, path):
    """Attention output only; see ``masked_attention`` for the public API."""
    n, dk = q.shape
    if path == "sparse":
        out, w = T.sparse_attention(q, k, v, mask.indptr, mask.indices)
        return out, w
    allowed = np.ones((n, n), dtype=bool) if mask is None else mask.to_dense()
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dk))
    p = T.softmax_rows_masked(scores, allowed)
    return T.matmul(p, v), p


def masked_attention(q, k, v, mask, path="sparse"):
    """Scaled dot-product attention restricted to ``mask``.

    Returns ``(output, weights)``; ``weights`` is a dense N x N array with
    exact zeros at disallowed pairs.  ``mask=None`` on the dense path means
    unrestricted attention.
    """
    q, k, v = T._as_tensor(q), T._as_tensor(k), T._as_tensor(v)
    n = q.shape[0]
    if k.shape != q.shape or v.shape[0] != n:
        raise ShapeMismatch(q.shape, (k.shape, v.shape))
    if mask is not None and mask.N != n:
        raise ShapeMismatch(n, mask.N)
    if mask is None and path == "sparse":
        mask = full_mask(n)
    out, w = _attend(q, k, v, mask, path)
    weights = w.toarray() if path == "sparse" else w.data
    return out, weights


def multi_head(x, layer, mask, path="sparse", record=None):
    heads = []
    for h in range(len(layer.W_q)):
        q = T.matmul(x, layer.W_q[h])
        k = T.matmul(x, layer.W_k[h])
        v = T.matmul(x, layer.W_v[h])
        out, w = _attend(q, k, v, mask, path)
        if record is not None:
            record.append(w)
        heads.append(out)
    cat = heads[0] if len(heads) == 1 else T.concat_columns(heads)
    return T.matmul(cat, layer.W_o)


def feed_forward(x, layer):
    return T.feed_forward(x, layer.W_1, layer.b_1, layer.W_2, layer.b_2)


def encoder_layer(x, layer, mask, path="sparse", eps=1e-5, record=None):
    y = T.layer_norm(T.add(x, multi_head(x, layer, mask, path, record)), layer.ln1_gain, layer.ln1_bias, eps)
    return T.layer_norm(T.add(y, feed_forward(y, layer)), layer.ln2_gain, layer.ln2_bias, eps)


def encoder_stack(e, layers, mask, config, positions=None, path=None, record=None):
    """Positional encoding once, then every layer in turn.

    ``positions`` gives each row's position inside its own sequence when
    several sequences are packed into one matrix.
    """
    e = T._as_tensor(e)
    n = e.shape[0]
    if positions is None:
        pe = positional_encoding(n, config.d_model)
    else:
        pe = positional_encoding(int(np.max(positions)) + 1, config.d_model)[positions]
    x = T.add(e, pe)
    path = path or config.attention_path
    for i, layer in enumerate(layers):
        rec = None
        if record is not None:
            rec = []
            record.append(rec)
        x = encoder_layer(x, layer, mask, path, config.ln_eps, rec)
    return x


def project_logits(v, W_o, b_o):
    return T.linear(v, W_o, b_o)


def classify(e, seq_valid_length, params, config, adj=None, mask=None, path=None):
    """Logits for one (possibly padded) sequence of statement-tree vectors.

    ``params`` must expose ``layers``, ``W_o`` and ``b_o``.  The mask is built
    from ``config`` and ``adj`` for the valid prefix; padded rows attend only
    to themselves and are excluded from pooling.
    """
    e = T._as_tensor(e)
    n = e.shape[0]
    if seq_valid_length < 1:
        raise ZeroLength("sequence has no valid rows")
    if seq_valid_length > n:
        raise ShapeMismatch(f"<= {n} valid rows", seq_valid_length)
    if mask is None:
        mask = build_mask(seq_valid_length, config, adj)
    if mask.N < n:
        mask = mask.padded(n)
    out = encoder_stack(e, params.layers, mask, config, path=path)
    v, _ = T.segment_max(out, [0]) if seq_valid_length == n else T.segment_max(out, [0, seq_valid_length])
    if seq_valid_length < n:
        v = T.gather_rows(v, [0])
    logits = project_logits(v, params.W_o, params.b_o)
    return T.reshape(logits, (logits.shape[1],))
