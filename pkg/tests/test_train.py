import json
import math
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from sacc import tensor as T
from sacc.attention import ModelConfig
from sacc.corpus import BUNDLED_MANIFEST, bundled_records, generate_corpus
from sacc.errors import (AllSamplesFailed, CheckpointError, EmptySplit, EmptyTrainSplit, LabelOutOfRange,
                         ManifestNotFound, MissingGradient)
from sacc.model import ModelParams, forward, prepare, probabilities
from sacc.train import (Adamax, Checkpoint, TrainConfig, adamax_step, build_dataset, cross_entropy, evaluate,
                        history_csv, ingest, metrics_from_confusion, metrics_from_predictions, train)

TINY = ModelConfig(d_model=8, d_embed=8, heads=2, d_k=4, d_ff=16)


def tiny_train(epochs=2, seed=0):
    return TrainConfig(epochs=epochs, batch_size=4, seed=seed)


# -- loss ------------------------------------------------------------------------

def test_uniform_logits_loss_is_log_p():
    assert abs(float(cross_entropy(np.zeros(18), 3).data) - math.log(18)) < 1e-15
    assert round(float(cross_entropy(np.zeros(18), 3).data), 4) == 2.8904


def test_three_logit_example():
    want = -math.log(math.exp(3) / (math.exp(1) + math.exp(2) + math.exp(3)))
    got = float(cross_entropy(np.array([1.0, 2.0, 3.0]), 2).data)
    assert abs(got - want) < 1e-15
    assert round(got, 5) == 0.40761


def test_saturated_loss():
    x = np.zeros(4)
    x[1] = 50.0
    assert float(cross_entropy(x, 1).data) < 1e-20


def test_batch_loss_is_mean():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((5, 3))
    y = [0, 2, 1, 1, 0]
    each = [float(cross_entropy(logits[i], y[i]).data) for i in range(5)]
    assert abs(float(cross_entropy(logits, y).data) - sum(each) / 5) < 1e-15


def test_loss_agrees_with_softmax_probability():
    rng = np.random.default_rng(1)
    for _ in range(20):
        logits = rng.standard_normal(6) * 4
        y = int(rng.integers(6))
        assert abs(math.exp(-float(cross_entropy(logits, y).data)) - probabilities(logits)[y]) < 1e-12


def test_label_out_of_range():
    with pytest.raises(LabelOutOfRange):
        cross_entropy(np.zeros(3), 3)
    with pytest.raises(LabelOutOfRange):
        cross_entropy(np.zeros(3), -1)


# -- optimizer -------------------------------------------------------------------

def adamax_oracle(theta, grads, lr=0.002, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar restatement of the update rule, one element at a time."""
    m = u = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        u = max(b2 * u, abs(g))
        theta = theta - lr / (1 - b1 ** t) * m / max(u, eps)
    return theta


def test_adamax_first_step_hand_value():
    p = T.Tensor(np.array([1.0]), requires_grad=True)
    opt = Adamax([p], lr=0.002)
    p.grad = np.array([0.5])
    opt.step()
    # lr/(1-0.9) * 0.05 / 0.5 = 0.002
    assert abs(p.data[0] - 0.998) < 1e-15
    assert abs(opt.m[0][0] - 0.05) < 1e-16 and opt.u[0][0] == 0.5
    assert opt.t == 1


def test_adamax_matches_scalar_oracle_over_steps():
    rng = np.random.default_rng(2)
    grads = rng.standard_normal((6, 4))
    p = T.Tensor(np.ones(4), requires_grad=True)
    opt = Adamax([p])
    for g in grads:
        p.grad = g.copy()
        opt.step()
    want = [adamax_oracle(1.0, grads[:, i]) for i in range(4)]
    assert np.max(np.abs(p.data - want)) < 1e-15


def test_adamax_first_step_bounded_by_lr():
    rng = np.random.default_rng(3)
    for _ in range(10):
        p = T.Tensor(rng.standard_normal(50), requires_grad=True)
        before = p.data.copy()
        opt = Adamax([p], lr=0.002)
        p.grad = rng.standard_normal(50) * 10 ** rng.uniform(-6, 3)
        opt.step()
        assert np.abs(p.data - before).max() <= 0.002 * (1 + 1e-12)


def test_adamax_zero_gradient_is_a_no_op():
    p = T.Tensor(np.array([0.3, -1.2]), requires_grad=True)
    opt = Adamax([p])
    for _ in range(3):
        p.grad = np.zeros(2)
        opt.step()
    assert p.data.tolist() == [0.3, -1.2]


def test_adamax_missing_gradient():
    p = T.Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(MissingGradient):
        Adamax([p]).step()


def test_functional_adamax_step():
    p = T.Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([0.5])
    _, state = adamax_step([p], None, TrainConfig())
    assert state.t == 1 and abs(p.data[0] - 0.998) < 1e-15


def test_single_step_descent_on_fresh_models():
    records = generate_corpus(16, seed=5)
    wins = 0
    for seed in range(10):
        ds = build_dataset(records, seed=seed)
        from sacc.encoder import build_vocab
        from sacc.treesplit import tree_tokens
        vocab = build_vocab([tree_tokens(t) for s in ds.samples for t in s.seq.trees])
        cfg = replace(TINY, num_classes=ds.num_classes)
        params = ModelParams.init(cfg, vocab.size, seed=seed)
        batch = [prepare(s.seq, vocab, cfg, s.adj) for s in ds.samples[:8]]
        y = [s.label for s in ds.samples[:8]]
        opt = Adamax(params.tensors(), lr=1e-3)
        loss = cross_entropy(forward(params, cfg, batch), y)
        loss.backward()
        opt.step()
        with T.no_grad():
            after = cross_entropy(forward(params, cfg, batch), y)
        wins += float(after.data) < float(loss.data)
    assert wins >= 8


# -- metrics ---------------------------------------------------------------------

def metrics_oracle(cm):
    """Exact rational metrics from a confusion matrix, rounded once at the end."""
    p = len(cm)
    total = sum(map(sum, cm))
    prec, rec, f1 = [], [], []
    for c in range(p):
        tp = cm[c][c]
        pred = sum(cm[r][c] for r in range(p))
        act = sum(cm[c])
        pc = Fraction(tp, pred) if pred else Fraction(0)
        rc = Fraction(tp, act) if act else Fraction(0)
        prec.append(pc)
        rec.append(rc)
        f1.append(2 * pc * rc / (pc + rc) if pc + rc else Fraction(0))
    acc = Fraction(sum(cm[c][c] for c in range(p)), total)
    return {"accuracy": acc, "precision": sum(prec) / p, "recall": sum(rec) / p, "f1": sum(f1) / p,
            "per_class": (prec, rec, f1)}


METRIC_CASES = [
    [[2, 0], [0, 2]],
    [[2, 0], [2, 0]],
    [[2, 0, 0], [1, 1, 0], [0, 0, 2]],
    [[1]],
    [[0, 1], [1, 0]],
    [[3, 1, 0], [0, 0, 0], [2, 0, 1]],
    [[5, 0, 0, 0], [0, 0, 3, 0], [0, 0, 0, 0], [1, 1, 1, 1]],
    [[0, 0], [0, 4]],
    [[1, 2, 3], [4, 5, 6], [7, 8, 9]],
    [[10, 0, 0, 0, 1], [0, 7, 2, 0, 0], [0, 0, 0, 0, 0], [3, 0, 0, 4, 0], [0, 0, 0, 0, 6]],
]


@pytest.mark.parametrize("cm", METRIC_CASES)
def test_metrics_match_rational_oracle(cm):
    m = metrics_from_confusion(cm)
    want = metrics_oracle(cm)
    for key in ("accuracy", "precision", "recall", "f1"):
        assert abs(getattr(m, key) - float(want[key])) <= 2 ** -52, key
    prec, rec, f1 = want["per_class"]
    assert m.precision_per_class.tolist() == [float(x) for x in prec]
    assert m.recall_per_class.tolist() == [float(x) for x in rec]
    assert np.max(np.abs(m.f1_per_class - [float(x) for x in f1])) <= 2 ** -52
    total = sum(map(sum, cm))
    assert ((m.tp + m.fp + m.fn + m.tn) == total).all()
    assert m.f1 <= m.f1_per_class.max() + 1e-15
    assert m.accuracy == np.trace(np.array(cm)) / total


def test_metrics_hand_examples():
    m = metrics_from_predictions([0, 0, 1, 1], [0, 0, 0, 0], 2)
    assert m.accuracy == 0.5
    assert m.precision_per_class.tolist() == [0.5, 0.0]
    assert m.recall_per_class.tolist() == [1.0, 0.0]
    assert m.f1_per_class.tolist() == [2 / 3, 0.0]
    assert m.f1 == 1 / 3
    m = metrics_from_confusion([[2, 0, 0], [1, 1, 0], [0, 0, 2]])
    assert m.accuracy == 5 / 6 and m.recall == 5 / 6
    perfect = metrics_from_predictions([0, 1, 2], [0, 1, 2], 3)
    assert (perfect.accuracy, perfect.precision, perfect.recall, perfect.f1) == (1.0, 1.0, 1.0, 1.0)


def test_metrics_empty():
    with pytest.raises(EmptySplit):
        metrics_from_predictions([], [], 2)


# -- ingestion -------------------------------------------------------------------

def test_ingest_bundled_manifest():
    ds = ingest(BUNDLED_MANIFEST)
    assert ds.num_classes == 7 and len(ds.samples) == 7
    assert ds.label_names == sorted(ds.label_names)
    assert sorted(s.label for s in ds.samples) == list(range(7))
    assert not ds.failures


def test_ingest_missing_manifest(tmp_path):
    with pytest.raises(ManifestNotFound):
        ingest(tmp_path / "nope.jsonl")


def test_ingest_empty_manifest(tmp_path):
    m = tmp_path / "m.jsonl"
    m.write_text("")
    with pytest.raises(AllSamplesFailed):
        ingest(m)


def test_ingest_reports_unparseable_file(tmp_path):
    (tmp_path / "a.c").write_text("int main(){return 0;}")
    (tmp_path / "b.c").write_text("int main(){while(a != 0 b != 0){}}")
    (tmp_path / "c.c").write_text("int f(int x){return x+1;}")
    lines = [{"path": "a.c", "label": "x"}, {"path": "b.c", "label": "y"}, {"path": "c.c", "label": "y"}]
    m = tmp_path / "m.jsonl"
    m.write_text("\n".join(json.dumps(x) for x in lines))
    ds = ingest(m)
    assert len(ds.samples) == 2
    assert [f["id"] for f in ds.failures] == ["b.c"]
    assert ds.failures[0]["kind"] == "SyntaxError"


def test_ingest_directory_layout(tmp_path):
    for label, src in (("sort", "int main(){return 0;}"), ("dp", "int f(){return 1;}")):
        d = tmp_path / label
        d.mkdir()
        (d / "p.c").write_text(src)
    ds = ingest(tmp_path)
    assert ds.label_names == ["dp", "sort"]


def test_splits_are_disjoint_and_seeded():
    records = generate_corpus(40, seed=0)
    a, b = build_dataset(records, seed=4), build_dataset(records, seed=4)
    assert [s.split for s in a.samples] == [s.split for s in b.samples]
    counts = {k: len(a.subset(k)) for k in ("train", "val", "test")}
    assert counts == {"train": 24, "val": 8, "test": 8}


# -- training --------------------------------------------------------------------

def bundled_dataset():
    return build_dataset(bundled_records(), seed=0)


def test_one_epoch_on_one_sample():
    rec = bundled_records()[:1]
    ds = build_dataset([{**rec[0], "split": "train"}])
    result = train(ds, TINY, TrainConfig(epochs=1))
    assert len(result.history) == 1
    assert math.isfinite(result.history[0].train_loss)


def test_empty_train_split():
    ds = build_dataset([{**r, "split": "test"} for r in bundled_records()])
    with pytest.raises(EmptyTrainSplit):
        train(ds, TINY, TrainConfig(epochs=1))


def test_training_is_bit_deterministic(tmp_path):
    runs = []
    for k in range(2):
        result = train(bundled_dataset(), TINY, tiny_train(epochs=3), out_dir=tmp_path / str(k))
        runs.append((tmp_path / str(k) / "history.csv").read_bytes())
        assert runs[-1] == history_csv(result.history).encode()
    assert runs[0] == runs[1]
    assert (tmp_path / "0" / "checkpoint.sacc").read_bytes() == (tmp_path / "1" / "checkpoint.sacc").read_bytes()


def test_loss_falls_on_small_corpus():
    ds = build_dataset(generate_corpus(24, seed=2), seed=0)
    result = train(ds, TINY, TrainConfig(epochs=8, batch_size=4))
    assert result.history[-1].train_loss < result.history[0].train_loss


def test_checkpoint_round_trip(tmp_path):
    ds = bundled_dataset()
    result = train(ds, TINY, tiny_train())
    path = tmp_path / "c.sacc"
    result.final.save(path)
    loaded = Checkpoint.load(path)
    assert loaded.label_names == result.final.label_names
    assert loaded.vocab.token_to_id == result.final.vocab.token_to_id
    assert loaded.config == result.final.config
    for (n1, a), (n2, b) in zip(loaded.params.named(), result.final.params.named()):
        assert n1 == n2 and a.data.tobytes() == b.data.tobytes()
    m1 = evaluate(result.final, ds.samples).to_dict()
    m2 = evaluate(loaded, ds.samples).to_dict()
    assert json.dumps(m1) == json.dumps(m2)


def test_checkpoint_header_layout(tmp_path):
    import struct
    result = train(bundled_dataset(), TINY, tiny_train(epochs=1))
    path = tmp_path / "c.sacc"
    result.final.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"SACC"
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    header = json.loads(raw[16:16 + hlen])
    assert version == 1
    assert list(header) == ["config", "vocab", "min_freq", "label_names", "params"]
    n = sum(int(np.prod(p["shape"])) for p in header["params"])
    assert len(raw) == 16 + hlen + 8 * n


def test_bad_checkpoint(tmp_path):
    p = tmp_path / "x.sacc"
    p.write_bytes(b"NOPE")
    with pytest.raises(CheckpointError):
        Checkpoint.load(p)
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "missing.sacc")


def test_best_checkpoint_is_best_by_val_accuracy():
    ds = build_dataset(generate_corpus(24, seed=3), seed=1)
    result = train(ds, TINY, TrainConfig(epochs=5, batch_size=4))
    accs = [r.val_accuracy for r in result.history]
    assert result.best_epoch == 1 + accs.index(max(accs))
    val = evaluate(result.best, ds.subset("val"))
    assert val.accuracy == max(accs)
