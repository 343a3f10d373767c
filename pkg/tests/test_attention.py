import math
from dataclasses import replace

import numpy as np
import pytest

from helpers import bundled_source, random_parents, ref_layer, ref_layer_norm, ref_logits, tree_adjacency
from sacc import tensor as T
from sacc.attention import (AttentionMask, LayerParams, ModelConfig, ast_mask, block_diag, build_mask, classify,
                            dilated_mask, encoder_layer, encoder_stack, full_mask, global_mask, local_mask,
                            masked_attention, multi_head, positional_encoding, random_mask, union)
from sacc.cfront import parse_source
from sacc.errors import IndexOutOfRange, LengthMismatch, NotSymmetric, OddDimension, ShapeMismatch, ZeroLength
from sacc.model import ModelParams
from sacc.treesplit import adjacency, split

SMALL = ModelConfig(d_model=8, d_embed=8, heads=2, d_k=4, d_ff=16, num_classes=3)


def pairs_of(mask):
    return mask.pair_set()


def diag(n):
    return {(i, i) for i in range(n)}


def random_dense_mask(n, rng, density=0.3):
    m = rng.random((n, n)) < density
    np.fill_diagonal(m, True)
    return m


# -- mask constructions ------------------------------------------------------------

def test_local_band_example():
    m = local_mask(5, 3)
    assert [r.tolist() for r in m.rows] == [[0, 1], [0, 1, 2], [1, 2, 3], [2, 3, 4], [3, 4]]


def test_local_degenerate_windows():
    assert pairs_of(local_mask(6, 1)) == diag(6)
    assert local_mask(6, 11).pairs == 36


def test_global_example():
    m = global_mask(5, {0, 1, 2}).to_dense()
    assert m[:3].all() and m[:, :3].all()
    assert m[3:, 3:].tolist() == [[True, False], [False, True]]
    assert pairs_of(global_mask(5, set())) == diag(5)
    assert global_mask(5, range(5)).pairs == 25


def test_global_out_of_range():
    with pytest.raises(IndexOutOfRange):
        global_mask(4, {4})


def test_ast_mask_examples():
    assert pairs_of(ast_mask(tree_adjacency([None, 0, 1]))) == diag(3) | {(0, 1), (1, 0), (1, 2), (2, 1)}
    assert pairs_of(ast_mask(np.eye(4, dtype=bool))) == diag(4)
    seq = split(parse_source(bundled_source("alg1")))
    assert ast_mask(adjacency(seq)).pairs == 7 + 12


def test_ast_mask_rejects_asymmetric():
    a = np.eye(3, dtype=bool)
    a[0, 2] = True
    with pytest.raises(NotSymmetric):
        ast_mask(a)


def test_dilated_examples():
    assert dilated_mask(6, 3, 2).rows[2].tolist() == [0, 2, 4]
    for n in (1, 5, 9):
        assert pairs_of(dilated_mask(n, 5, 1)) == pairs_of(local_mask(n, 5))


def test_random_mask_reproducible():
    assert pairs_of(random_mask(8, 0, seed=3)) == diag(8)
    a, b = random_mask(20, 3, seed=7), random_mask(20, 3, seed=7)
    assert a == b
    sizes = np.diff(a.indptr)
    assert ((sizes == 3) | (sizes == 4)).all()


def test_union_examples():
    d = AttentionMask.from_pairs(4, [], [])
    assert union([d, d]) == d
    u = union([local_mask(5, 3), global_mask(5, {0})])
    want = pairs_of(local_mask(5, 3)) | {(0, j) for j in range(5)} | {(i, 0) for i in range(5)}
    assert pairs_of(u) == want
    assert u.provenance(0, 0) == {"local", "global"}
    assert u.provenance(4, 0) == {"global"}
    assert u.provenance(4, 1) is None
    assert union([random_mask(6, 2, 1), full_mask(6)]).pairs == 36


def test_union_length_mismatch():
    with pytest.raises(LengthMismatch):
        union([local_mask(3, 3), local_mask(4, 3)])


def test_mask_invariants_rows_sorted_unique_with_diagonal():
    rng = np.random.default_rng(0)
    for _ in range(30):
        n = int(rng.integers(1, 40))
        m = union([random_mask(n, int(rng.integers(0, n + 1)), int(rng.integers(100))), local_mask(n, 3)])
        for i, row in enumerate(m.rows):
            assert i in row
            assert (np.diff(row) > 0).all()
            assert row.min() >= 0 and row.max() < n


def test_brute_force_suite():
    """Every construction equals its set definition for N <= 32."""
    for n in range(1, 33):
        for w in (1, 3, 5):
            r = w // 2
            assert pairs_of(local_mask(n, w)) == {(i, j) for i in range(n) for j in range(n) if abs(i - j) <= r}
            for gap in (1, 2, 3):
                steps = {s * gap for s in range(r + 1)}
                assert pairs_of(dilated_mask(n, w, gap)) == {
                    (i, j) for i in range(n) for j in range(n) if abs(i - j) in steps}
        for g in (0, 1, 3):
            G = set(range(min(g, n)))
            assert pairs_of(global_mask(n, G)) == {
                (i, j) for i in range(n) for j in range(n) if i in G or j in G} | diag(n)
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(1, 33))
        parent = random_parents(n, rng)
        edges = {(i, p) for i, p in enumerate(parent) if p is not None}
        want = diag(n) | edges | {(p, i) for i, p in edges}
        assert pairs_of(ast_mask(tree_adjacency(parent))) == want
        assert pairs_of(ast_mask(adjacency_from(parent))) == want


def adjacency_from(parent):
    from sacc.treesplit import StatementSequence
    return adjacency(StatementSequence([None] * len(parent), parent))


def test_union_monotone_on_random_pairs():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n = int(rng.integers(1, 30))
        a = AttentionMask.from_dense(random_dense_mask(n, rng), bits=1)
        b = AttentionMask.from_dense(random_dense_mask(n, rng), bits=2)
        u = union([a, b])
        assert pairs_of(u) == pairs_of(a) | pairs_of(b)
        assert diag(n) <= pairs_of(u)
        for i, j in pairs_of(a):
            assert "local" in u.provenance(i, j)


def test_enabling_a_pattern_never_removes_pairs():
    rng = np.random.default_rng(3)
    order = ["local", "global", "ast", "dilated", "random"]
    for _ in range(20):
        n = int(rng.integers(2, 40))
        adj = tree_adjacency(random_parents(n, rng))
        prev = set()
        for k in range(1, len(order) + 1):
            cur = pairs_of(build_mask(n, replace(SMALL, patterns=order[:k]), adj))
            assert prev <= cur
            prev = cur


@pytest.mark.parametrize("n", [16, 64, 256, 1024])
def test_default_pair_count_is_linear(n):
    rng = np.random.default_rng(n)
    for _ in range(3):
        m = build_mask(n, ModelConfig(), tree_adjacency(random_parents(n, rng)))
        assert m.pairs <= 8 * n


def test_block_diag_keeps_samples_apart():
    a, b = local_mask(3, 3), global_mask(4, {0})
    m = block_diag([a, b])
    assert pairs_of(m) == pairs_of(a) | {(i + 3, j + 3) for i, j in pairs_of(b)}


# -- positional encoding ---------------------------------------------------------------

def test_positional_encoding_values():
    pe = positional_encoding(4, 6)
    assert pe[0].tolist() == [0, 1, 0, 1, 0, 1]
    assert abs(pe[1, 0] - 0.8414709848078965) < 1e-15
    assert np.abs(positional_encoding(50, 16)).max() <= 1
    assert abs(pe[3, 2] - math.sin(3 / 10000 ** (2 / 6))) < 1e-15
    assert abs(pe[3, 3] - math.cos(3 / 10000 ** (2 / 6))) < 1e-15


def test_positional_encoding_odd_dimension():
    with pytest.raises(OddDimension):
        positional_encoding(3, 5)


# -- masked attention ----------------------------------------------------------------

def qkv(rng, n, dk=4, dv=3):
    return rng.standard_normal((n, dk)), rng.standard_normal((n, dk)), rng.standard_normal((n, dv))


def test_full_mask_equals_plain_attention():
    rng = np.random.default_rng(4)
    q, k, v = qkv(rng, 7)
    s = q @ k.T / 2
    p = np.exp(s - s.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    for path in ("sparse", "dense"):
        out, w = masked_attention(q, k, v, full_mask(7), path)
        assert np.max(np.abs(out.data - p @ v)) < 1e-12
        assert np.max(np.abs(w - p)) < 1e-12


def test_diagonal_mask_copies_values():
    rng = np.random.default_rng(5)
    q, k, v = qkv(rng, 6)
    for path in ("sparse", "dense"):
        out, w = masked_attention(q, k, v, local_mask(6, 1), path)
        assert np.array_equal(out.data, v)
        assert np.array_equal(w, np.eye(6))


def test_attention_shape_errors():
    rng = np.random.default_rng(6)
    q, k, v = qkv(rng, 5)
    with pytest.raises(ShapeMismatch):
        masked_attention(q, k[:4], v, local_mask(5, 3))
    with pytest.raises(ShapeMismatch):
        masked_attention(q, k, v, local_mask(4, 3))


def test_sparse_path_equals_dense_path_with_gradients():
    rng = np.random.default_rng(7)
    for _ in range(20):
        n = int(rng.integers(4, 65))
        mask = AttentionMask.from_dense(random_dense_mask(n, rng, rng.uniform(0.05, 0.6)))
        arrays = qkv(rng, n, dk=8, dv=5)
        r = rng.standard_normal((n, 5))
        res = {}
        for path in ("sparse", "dense"):
            ts = [T.Tensor(a, requires_grad=True) for a in arrays]
            out, w = masked_attention(*ts, mask, path)
            T.sum_all(T.mul(out, T.Tensor(r))).backward()
            res[path] = [out.data, w] + [t.grad for t in ts]
        for a, b in zip(res["sparse"], res["dense"]):
            assert np.max(np.abs(a - b)) < 1e-9


def test_weights_zero_off_mask_and_rows_sum_to_one():
    rng = np.random.default_rng(8)
    n = 30
    allowed = random_dense_mask(n, rng)
    q, k, v = qkv(rng, n)
    for path in ("sparse", "dense"):
        _, w = masked_attention(q, k, v, AttentionMask.from_dense(allowed), path)
        assert (w[~allowed] == 0).all()
        assert np.max(np.abs(w.sum(axis=1) - 1)) < 1e-12


def test_zero_leakage_gradient_probe():
    rng = np.random.default_rng(9)
    n = 12
    mask = build_mask(n, SMALL, tree_adjacency(random_parents(n, rng)))
    dense = mask.to_dense()
    i, j = map(int, np.argwhere(~dense)[0])
    for path in ("sparse", "dense"):
        ts = [T.Tensor(a, requires_grad=True) for a in qkv(rng, n)]
        out, _ = masked_attention(*ts, mask, path)
        probe = np.zeros((n, 3))
        probe[i] = rng.standard_normal(3)
        T.sum_all(T.mul(out, T.Tensor(probe))).backward()
        assert (ts[1].grad[j] == 0).all() and (ts[2].grad[j] == 0).all()
        # an allowed key does receive gradient
        assert np.abs(ts[1].grad[i]).sum() > 0


# -- layers ------------------------------------------------------------------------------

def small_layer(seed, config=SMALL):
    return LayerParams.init(config, np.random.default_rng(seed))


def test_multi_head_is_concat_of_single_heads():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((9, 8))
    lp = small_layer(0)
    mask = build_mask(9, SMALL, tree_adjacency(random_parents(9, rng)))
    got = multi_head(x, lp, mask).data
    parts = []
    for h in range(2):
        out, _ = masked_attention(x @ lp.W_q[h].data, x @ lp.W_k[h].data, x @ lp.W_v[h].data, mask)
        parts.append(out.data)
    assert got.shape == (9, 8)
    assert np.max(np.abs(got - np.hstack(parts) @ lp.W_o.data)) < 1e-12


def test_single_head_is_projected_attention():
    cfg = replace(SMALL, heads=1, d_k=8)
    rng = np.random.default_rng(11)
    x = rng.standard_normal((5, 8))
    lp = small_layer(1, cfg)
    mask = local_mask(5, 3)
    out, _ = masked_attention(x @ lp.W_q[0].data, x @ lp.W_k[0].data, x @ lp.W_v[0].data, mask)
    assert np.max(np.abs(multi_head(x, lp, mask).data - out.data @ lp.W_o.data)) < 1e-12


def test_zeroed_sublayers_leave_double_layer_norm():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((6, 8))
    lp = small_layer(2)
    for t in (lp.W_o, lp.W_1, lp.b_1, lp.W_2, lp.b_2):
        t.data = np.zeros_like(t.data)
    ones, zeros = np.ones(8), np.zeros(8)
    want = ref_layer_norm(ref_layer_norm(x, ones, zeros, 1e-5), ones, zeros, 1e-5)
    got = encoder_layer(x, lp, local_mask(6, 3)).data
    assert np.max(np.abs(got - want)) < 1e-12


def test_layer_matches_numpy_reference():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((10, 8))
    lp = small_layer(3)
    mask = build_mask(10, SMALL, tree_adjacency(random_parents(10, rng)))
    for path in ("sparse", "dense"):
        got = encoder_layer(x, lp, mask, path).data
        assert np.max(np.abs(got - ref_layer(x, lp, mask.to_dense()))) < 1e-12


def test_two_layer_stack_is_composition():
    rng = np.random.default_rng(14)
    e = rng.standard_normal((7, 8))
    layers = [small_layer(4), small_layer(5)]
    mask = local_mask(7, 3)
    x = e + positional_encoding(7, 8)
    want = encoder_layer(encoder_layer(x, layers[0], mask), layers[1], mask).data
    got = encoder_stack(e, layers, mask, SMALL).data
    assert got.shape == (7, 8)
    assert np.array_equal(got, want)


# -- classification ----------------------------------------------------------------------

def small_model(seed=0, config=SMALL):
    return ModelParams.init(config, vocab_size=4, seed=seed)


def test_classify_hand_example_without_layers():
    cfg = replace(SMALL, d_model=2, d_k=1, layers=0, num_classes=2, patterns=["local"])
    p = small_model(config=cfg)
    p.W_o.data = np.array([[1.0, -2.0], [0.5, 3.0]])
    p.b_o.data = np.array([0.25, -0.75])
    e = np.array([[0.1, -0.4], [0.3, 0.2]])
    # stack output = E + PE; PE rows are [0, 1] and [sin 1, cos 1]
    h = [[0.1, 0.6], [0.3 + math.sin(1), 0.2 + math.cos(1)]]
    v = [max(h[0][0], h[1][0]), max(h[0][1], h[1][1])]
    want = [v[0] * 1.0 + v[1] * 0.5 + 0.25, v[0] * -2.0 + v[1] * 3.0 - 0.75]
    got = classify(e, 2, p, cfg).data
    assert np.max(np.abs(got - want)) < 1e-15


def test_classify_constant_head():
    p = small_model()
    p.W_o.data = np.zeros_like(p.W_o.data)
    p.b_o.data = np.array([1.5, -2.0, 0.5])
    rng = np.random.default_rng(15)
    for n in (1, 4):
        got = classify(rng.standard_normal((n, 8)), n, p, SMALL, adj=np.eye(n, dtype=bool))
        assert got.data.tolist() == [1.5, -2.0, 0.5]


def test_classify_single_row_pools_that_row():
    p = small_model(1)
    e = np.random.default_rng(16).standard_normal((1, 8))
    out = encoder_stack(e, p.layers, local_mask(1, 3), SMALL).data[0]
    got = classify(e, 1, p, SMALL, adj=np.eye(1, dtype=bool)).data
    assert np.max(np.abs(got - (out @ p.W_o.data + p.b_o.data))) < 1e-14


def test_classify_zero_length():
    with pytest.raises(ZeroLength):
        classify(np.zeros((2, 8)), 0, small_model(), SMALL)


def test_padding_invariance():
    rng = np.random.default_rng(17)
    p = small_model(2)
    for n in (1, 3, 8):
        adj = tree_adjacency(random_parents(n, rng))
        e = rng.standard_normal((n, 8))
        base = classify(e, n, p, SMALL, adj=adj).data
        padded = np.vstack([e, rng.standard_normal((5, 8))])
        assert np.max(np.abs(classify(padded, n, p, SMALL, adj=adj).data - base)) < 1e-12


def test_wide_local_window_equals_dense_transformer():
    rng = np.random.default_rng(18)
    cfg = replace(ModelConfig(num_classes=4), patterns=["local"])
    p = ModelParams.init(cfg, vocab_size=4, seed=3)
    for n in (1, 5, 12):
        wide = replace(cfg, window=2 * n - 1)
        e = rng.standard_normal((n, 128))
        want = ref_logits(e, p.layers, p.W_o, p.b_o)
        for path in ("sparse", "dense"):
            got = classify(e, n, p, wide, path=path).data
            assert np.max(np.abs(got - want)) < 1e-12
