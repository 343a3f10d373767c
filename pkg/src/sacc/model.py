"""Full classifier: statement-tree encoder, sparse Transformer, max pool, linear head.

A batch is packed rather than padded: the statement-tree vectors of all
samples are stacked into one matrix and attention runs under a
block-diagonal mask, so no sample ever sees another's rows.
"""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import tensor as T
from .attention import LayerParams, block_diag, build_mask, encoder_stack, project_logits, xavier
from .encoder import EncoderParams, TreeArrays, encode_trees, tree_arrays
from .errors import IndexOutOfRange
from .treesplit import StatementSequence, adjacency


@dataclass
class ModelParams:
    encoder: EncoderParams
    layers: List[LayerParams]
    W_o: T.Tensor
    b_o: T.Tensor

    @classmethod
    def init(cls, config, vocab_size, seed=0):
        rng = np.random.default_rng(seed)
        enc = EncoderParams.init(vocab_size, config.d_embed, config.d_model, rng)
        layers = [LayerParams.init(config, rng) for _ in range(config.layers)]
        W_o = T.Tensor(xavier(rng, config.d_model, config.num_classes), requires_grad=True)
        b_o = T.Tensor(np.zeros(config.num_classes), requires_grad=True)
        return cls(enc, layers, W_o, b_o)

    def named(self):
        yield from self.encoder.named("encoder")
        for i, layer in enumerate(self.layers):
            yield from layer.named(f"layers.{i}")
        yield "classifier.W_o", self.W_o
        yield "classifier.b_o", self.b_o

    def tensors(self):
        return [t for _, t in self.named()]

    def zero_grad(self):
        for t in self.tensors():
            t.grad = None

    def state(self):
        """Copy of every parameter array, keyed by name."""
        return {name: t.data.copy() for name, t in self.named()}

    def load_state(self, state):
        for name, t in self.named():
            arr = state[name]
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = np.array(arr, dtype=t.data.dtype, copy=True)


@dataclass
class Prepared:
    """A sample turned into model inputs for a fixed vocabulary and config."""
    trees: List[TreeArrays]
    mask: object
    n: int


def prepare(seq: StatementSequence, vocab, config, adj: Optional[np.ndarray] = None):
    if adj is None:
        adj = adjacency(seq, closure=config.adj_closure)
    return Prepared([tree_arrays(t, vocab) for t in seq.trees], build_mask(seq.N, config, adj), seq.N)


def forward(params, config, batch, path=None, record=None):
    """Logits (B x P) for a list of Prepared samples."""
    lengths = np.array([p.n for p in batch])
    e = encode_trees([t for p in batch for t in p.trees], params.encoder)
    mask = batch[0].mask if len(batch) == 1 else block_diag([p.mask for p in batch])
    positions = np.concatenate([np.arange(n) for n in lengths])
    out = encoder_stack(e, params.layers, mask, config, positions=positions, path=path, record=record)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    v, _ = T.segment_max(out, starts)
    return project_logits(v, params.W_o, params.b_o)


def attention_export(params, config, vocab, seq, adj=None, layer=0, head=0):
    """Attention weights of one head for one program, ready for a heatmap.

    Keys: ``layer``, ``head``, ``labels`` (statement-tree header names),
    ``weights`` (N x N, exact zeros at disallowed pairs) and
    ``mask_provenance`` (N x N lists of pattern names).
    """
    if not 0 <= layer < len(params.layers):
        raise IndexOutOfRange(f"layer {layer} not in [0, {len(params.layers)})")
    if not 0 <= head < config.heads:
        raise IndexOutOfRange(f"head {head} not in [0, {config.heads})")
    item = prepare(seq, vocab, config, adj)
    record = []
    with T.no_grad():
        forward(params, config, [item], record=record)
    w = record[layer][head]
    w = w.toarray() if hasattr(w, "toarray") else np.asarray(w.data)
    return {
        "layer": layer,
        "head": head,
        "labels": [t.label for t in seq.trees],
        "weights": w.tolist(),
        "mask_provenance": item.mask.provenance_matrix(),
    }


def probabilities(logits):
    x = np.asarray(logits.data if isinstance(logits, T.Tensor) else logits, dtype=np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)
