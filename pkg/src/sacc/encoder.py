"""Node vocabulary, node embeddings and the recursive statement-tree encoder.

Every node's hidden state is ``tanh(W_n^T w_n + sum(child states) + b_n)``
where ``w_n`` is the node token's embedding row; the tree vector is the
element-wise max over all node states.  Trees are encoded in batches, one
level of node height at a time, so the number of graph operations grows with
tree depth rather than node count.
"""

import json
from collections import Counter
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .attention import xavier
from .errors import EmptyCorpus
from .treesplit import StatementTree, node_token

PAD, UNK = "<pad>", "<unk>"


class Vocabulary:
    def __init__(self, token_to_id, min_freq=1):
        self.token_to_id = dict(token_to_id)
        self.min_freq = min_freq

    @property
    def size(self):
        return len(self.token_to_id)

    def __len__(self):
        return len(self.token_to_id)

    def __contains__(self, token):
        return token in self.token_to_id

    def lookup(self, token):
        return self.token_to_id.get(token, 1)

    def to_json(self):
        return json.dumps(self.token_to_id, ensure_ascii=False)

    @classmethod
    def from_json(cls, text, min_freq=1):
        return cls(json.loads(text), min_freq)


def build_vocab(corpus, min_freq=1):
    """Ids 0/1 are PAD/UNK; the rest go by descending frequency, then text."""
    corpus = list(corpus)
    if not corpus:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for doc in corpus for tok in doc)
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    token_to_id = {PAD: 0, UNK: 1}
    for tok in kept:
        if tok not in token_to_id:
            token_to_id[tok] = len(token_to_id)
    return Vocabulary(token_to_id, min_freq)


@dataclass
class EncoderParams:
    W_e: T.Tensor
    W_n: T.Tensor
    b_n: T.Tensor

    @classmethod
    def init(cls, vocab_size, d, k, rng):
        return cls(
            W_e=T.Tensor(xavier(rng, vocab_size, d), requires_grad=True),
            W_n=T.Tensor(xavier(rng, d, k), requires_grad=True),
            b_n=T.Tensor(np.zeros(k), requires_grad=True),
        )

    def named(self, prefix="encoder"):
        yield f"{prefix}.W_e", self.W_e
        yield f"{prefix}.W_n", self.W_n
        yield f"{prefix}.b_n", self.b_n


@dataclass
class TreeArrays:
    """Flattened pre-order view of one statement tree."""
    ids: np.ndarray
    parent: np.ndarray
    height: np.ndarray


def tree_arrays(tree, vocab):
    root = tree.nodes if isinstance(tree, StatementTree) else tree
    ids, parent = [], []
    stack = [(root, -1)]
    while stack:
        node, par = stack.pop()
        idx = len(ids)
        ids.append(vocab.lookup(node_token(node)))
        parent.append(par)
        stack.extend((c, idx) for c in reversed(node.children))
    parent = np.asarray(parent, dtype=np.intp)
    height = np.zeros(len(ids), dtype=np.intp)
    for i in range(len(ids) - 1, 0, -1):
        p = parent[i]
        if height[i] + 1 > height[p]:
            height[p] = height[i] + 1
    return TreeArrays(np.asarray(ids, dtype=np.intp), parent, height)


def embed_node(token, params, vocab):
    return params.W_e.data[vocab.lookup(token)]


def encode_trees(arrays, params):
    """Encode a list of TreeArrays; returns a (len(arrays) x k) Tensor."""
    sizes = np.array([a.ids.size for a in arrays])
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    ids = np.concatenate([a.ids for a in arrays])
    height = np.concatenate([a.height for a in arrays])
    parent = np.concatenate([np.where(a.parent >= 0, a.parent + off, -1) for a, off in zip(arrays, offsets)])
    tree_of = np.repeat(np.arange(len(arrays)), sizes)

    # node projections for every node at once
    pre = T.add(T.matmul(T.gather_rows(params.W_e, ids), params.W_n), params.b_n)

    order = np.argsort(height, kind="stable")
    pos = np.empty_like(order)
    pos[order] = np.arange(order.size)
    level_bounds = np.searchsorted(height[order], np.arange(height.max() + 2))

    h_all = None
    for lvl in range(height.max() + 1):
        lo, hi = level_bounds[lvl], level_bounds[lvl + 1]
        nodes = order[lo:hi]
        z = T.gather_rows(pre, nodes)
        if lvl > 0:
            child = np.nonzero((parent >= 0) & (height < lvl))[0]
            child = child[np.isin(parent[child], nodes)]
            rows = pos[parent[child]] - lo
            agg = sp.csr_matrix((np.ones(child.size), (rows, pos[child])), shape=(hi - lo, lo))
            z = T.add(z, T.sparse_matmul(agg, h_all))
        h = T.tanh(z)
        h_all = h if h_all is None else T.concat_rows([h_all, h])

    by_tree = np.argsort(tree_of[order], kind="stable")
    grouped = T.gather_rows(h_all, by_tree)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    pooled, _ = T.segment_max(grouped, starts)
    return pooled


def encode_tree(tree, params, vocab):
    """Vector of one statement tree, shape (k,)."""
    out = encode_trees([tree_arrays(tree, vocab)], params)
    return T.reshape(out, (out.shape[1],))


def encode_sequence(seq, params, vocab):
    """N x k matrix of statement-tree vectors, one row per tree in order."""
    return encode_trees([tree_arrays(t, vocab) for t in seq.trees], params)
