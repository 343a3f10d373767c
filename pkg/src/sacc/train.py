"""Dataset ingestion, training with Adamax, evaluation and checkpoints."""

import csv
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .attention import ModelConfig
from .cfront import parse_source
from .encoder import Vocabulary, build_vocab
from .errors import (AllSamplesFailed, CheckpointError, ConfigError, EmptySplit, EmptyTrainSplit,
                     LabelOutOfRange, ManifestNotFound, MissingGradient, SaccError)
from .model import ModelParams, forward, prepare, probabilities
from .treesplit import StatementSequence, adjacency, split, tree_tokens

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class Sample:
    id: str
    seq: StatementSequence
    adj: np.ndarray
    label: int
    split: Optional[str] = None


@dataclass
class Dataset:
    samples: List[Sample]
    label_names: List[str]
    failures: List[dict] = field(default_factory=list)

    @property
    def num_classes(self):
        return len(self.label_names)

    def subset(self, name):
        return [s for s in self.samples if s.split == name]


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True
    split_ratios: List[float] = field(default_factory=lambda: [0.6, 0.2, 0.2])

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("epochs and batch_size must be >= 1 and lr > 0")
        if len(self.split_ratios) != 3 or any(r < 0 for r in self.split_ratios):
            raise ConfigError("split_ratios needs three non-negative fractions")
        return self

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------------
# ingestion

def sample_from_source(sid, source, label, split_name=None, closure=False):
    seq = split(parse_source(source))
    return Sample(sid, seq, adjacency(seq, closure=closure), label, split_name)


def build_dataset(records, seed=0, ratios=(0.6, 0.2, 0.2), closure=False):
    """``records``: iterable of dicts with ``id``, ``source``, ``label`` and optional ``split``."""
    records = list(records)
    label_names = sorted({r["label"] for r in records})
    index = {name: i for i, name in enumerate(label_names)}
    samples, failures = [], []
    for r in records:
        try:
            samples.append(sample_from_source(r["id"], r["source"], index[r["label"]], r.get("split"), closure))
        except SaccError as exc:
            failures.append({"id": r["id"], **exc.to_dict()})
    if not samples:
        raise AllSamplesFailed(f"no usable samples ({len(failures)} failed)")
    for f in failures:
        log.warning("skipping %s: %s", f["id"], f["message"])
    used = sorted({s.label for s in samples})
    if len(used) != len(label_names):
        names = [label_names[i] for i in used]
        remap = {old: new for new, old in enumerate(used)}
        for s in samples:
            s.label = remap[s.label]
        label_names = names
    assign_splits(samples, seed, ratios)
    return Dataset(samples, label_names, failures)


def assign_splits(samples, seed=0, ratios=(0.6, 0.2, 0.2)):
    """Seeded shuffle into train/val/test for samples without a split."""
    todo = [s for s in samples if s.split is None]
    if not todo:
        return
    perm = np.random.default_rng(seed).permutation(len(todo))
    total = sum(ratios)
    n_train = int(round(len(todo) * ratios[0] / total))
    n_val = int(round(len(todo) * ratios[1] / total))
    for rank, i in enumerate(perm):
        todo[i].split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"


def _read_text(path):
    return Path(path).read_bytes().decode("utf-8", errors="replace")


def ingest(manifest_path, seed=0, ratios=(0.6, 0.2, 0.2), closure=False):
    """Load a JSON-lines manifest or a directory with one subdirectory per label."""
    path = Path(manifest_path)
    if not path.exists():
        raise ManifestNotFound(f"manifest not found: {path}")
    records = []
    if path.is_dir():
        for label_dir in sorted(p for p in path.iterdir() if p.is_dir()):
            for f in sorted(p for p in label_dir.iterdir() if p.is_file()):
                records.append({"id": str(f.relative_to(path)), "source": _read_text(f), "label": label_dir.name})
    else:
        failures = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            entry = json.loads(line)
            f = Path(entry["path"])
            if not f.is_absolute():
                f = path.parent / f
            try:
                source = _read_text(f)
            except OSError as exc:
                failures.append({"id": entry["path"], "kind": "io", "line": lineno, "col": None, "message": str(exc)})
                continue
            rec = {"id": entry["path"], "source": source, "label": entry["label"]}
            if "split" in entry:
                rec["split"] = entry["split"]
            records.append(rec)
        if not records:
            raise AllSamplesFailed(f"manifest {path} has no readable samples")
        ds = build_dataset(records, seed, ratios, closure)
        ds.failures = failures + ds.failures
        return ds
    if not records:
        raise AllSamplesFailed(f"no source files under {path}")
    return build_dataset(records, seed, ratios, closure)


# ---------------------------------------------------------------------------
# loss and optimizer

def cross_entropy(logits, y):
    """Mean cross-entropy; ``logits`` is (P,) or (B x P), ``y`` an index or indices."""
    logits = T._as_tensor(logits)
    if logits.data.ndim == 1:
        logits = T.reshape(logits, (1, logits.shape[0]))
    y = np.atleast_1d(np.asarray(y, dtype=np.intp))
    p = logits.shape[1]
    if y.shape[0] != logits.shape[0]:
        raise LabelOutOfRange(f"{y.shape[0]} labels for {logits.shape[0]} rows")
    if np.any(y < 0) or np.any(y >= p):
        raise LabelOutOfRange(f"labels must lie in [0, {p})")
    return T.cross_entropy(logits, y)


class Adamax:
    """Adamax (infinity-norm Adam): m <- b1 m + (1-b1) g; u <- max(b2 u, |g|);
    theta <- theta - lr/(1-b1^t) * m / max(u, eps)."""

    def __init__(self, params, lr=0.002, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.u = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise MissingGradient(f"parameter of shape {p.shape} has no gradient")
        self.t += 1
        step = self.lr / (1.0 - self.beta1 ** self.t)
        for p, m, u in zip(self.params, self.m, self.u):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            np.maximum(self.beta2 * u, np.abs(g), out=u)
            p.data -= step * m / np.maximum(u, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adamax_step(params, state, config):
    """Functional form: ``state`` is an Adamax instance (or None to create one)."""
    if state is None:
        state = Adamax(params, config.lr, config.beta1, config.beta2, config.eps)
    state.step()
    return params, state


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"SACC"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    vocab: Vocabulary
    label_names: List[str]
    params: ModelParams

    def save(self, path):
        manifest = []
        offset = 0
        blobs = []
        for name, t in self.params.named():
            arr = np.ascontiguousarray(t.data, dtype="<f8")
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
            blobs.append(arr.tobytes())
        header = json.dumps({
            "config": self.config.to_dict(),
            "vocab": self.vocab.token_to_id,
            "min_freq": self.vocab.min_freq,
            "label_names": self.label_names,
            "params": manifest,
        }, ensure_ascii=False).encode("utf-8")
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        buf.write(header)
        for b in blobs:
            buf.write(b)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path):
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if raw[:4] != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        version, hlen = struct.unpack_from("<IQ", raw, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        start = 4 + struct.calcsize("<IQ")
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
        body = memoryview(raw)[start + hlen:]
        config = ModelConfig.from_dict(header["config"])
        vocab = Vocabulary(header["vocab"], header.get("min_freq", 1))
        params = ModelParams.init(config, vocab.size, seed=0)
        state = {}
        for entry in header["params"]:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            arr = np.frombuffer(body, dtype="<f8", count=count, offset=entry["offset"])
            state[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
        params.load_state(state)
        return cls(config, vocab, header["label_names"], params)


# ---------------------------------------------------------------------------
# training

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class TrainResult:
    history: List[EpochRecord]
    best: Checkpoint
    final: Checkpoint
    best_epoch: int


def history_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_accuracy"])
    for r in history:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.val_accuracy)])
    return buf.getvalue()


class _Prepared:
    """Per-sample model inputs, built once per training run."""

    def __init__(self, samples, vocab, config):
        self.items = [prepare(s.seq, vocab, config, s.adj) for s in samples]
        self.labels = np.array([s.label for s in samples], dtype=np.intp)


def predict_logits(params, config, prepared_items, batch_size=64):
    out = []
    with T.no_grad():
        for lo in range(0, len(prepared_items), batch_size):
            out.append(forward(params, config, prepared_items[lo:lo + batch_size]).data)
    return np.concatenate(out, axis=0)


def train(dataset, model_config, train_config, out_dir=None, on_epoch=None):
    """Train on the dataset's train split; select the best epoch by val accuracy."""
    train_config.validate()
    train_set = dataset.subset("train")
    if not train_set:
        raise EmptyTrainSplit("training split is empty")
    val_set = dataset.subset("val")
    model_config = replace(model_config, num_classes=dataset.num_classes).validate()

    vocab = build_vocab([tree_tokens(t) for s in train_set for t in s.seq.trees], model_config.min_freq)
    params = ModelParams.init(model_config, vocab.size, seed=train_config.seed)
    opt = Adamax(params.tensors(), train_config.lr, train_config.beta1, train_config.beta2, train_config.eps)

    tr = _Prepared(train_set, vocab, model_config)
    va = _Prepared(val_set, vocab, model_config) if val_set else None

    history = []
    best_state, best_acc, best_epoch = None, -1.0, 0
    bs = train_config.batch_size
    for epoch in range(1, train_config.epochs + 1):
        order = np.arange(len(tr.items))
        if train_config.shuffle:
            order = np.random.default_rng(train_config.seed + epoch).permutation(len(tr.items))
        total = 0.0
        for lo in range(0, len(order), bs):
            idx = order[lo:lo + bs]
            logits = forward(params, model_config, [tr.items[i] for i in idx])
            loss = cross_entropy(logits, tr.labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
        train_loss = total / len(order)
        if va is not None:
            pred = predict_logits(params, model_config, va.items).argmax(axis=1)
            val_acc = float(np.mean(pred == va.labels))
        else:
            val_acc = float("nan")
        history.append(EpochRecord(epoch, train_loss, val_acc))
        log.info("epoch %d loss %.6f val_acc %.4f", epoch, train_loss, val_acc)
        if on_epoch is not None:
            on_epoch(history[-1])
        score = val_acc if not math.isnan(val_acc) else -train_loss
        if best_state is None or score > best_acc:
            best_state, best_acc, best_epoch = params.state(), score, epoch

    labels = list(dataset.label_names)
    final = Checkpoint(model_config, vocab, labels, params)
    best_params = ModelParams.init(model_config, vocab.size, seed=0)
    best_params.load_state(best_state)
    best = Checkpoint(model_config, vocab, labels, best_params)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        best.save(out / "checkpoint.sacc")
        final.save(out / "final.sacc")
        (out / "history.csv").write_text(history_csv(history))
    return TrainResult(history, best, final, best_epoch)


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class Metrics:
    confusion: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray
    precision_per_class: np.ndarray
    recall_per_class: np.ndarray
    f1_per_class: np.ndarray
    accuracy: float
    precision: float
    recall: float
    f1: float

    def to_dict(self, label_names=None):
        d = {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "per_class": {
                "tp": self.tp.tolist(), "fp": self.fp.tolist(),
                "fn": self.fn.tolist(), "tn": self.tn.tolist(),
                "precision": self.precision_per_class.tolist(),
                "recall": self.recall_per_class.tolist(),
                "f1": self.f1_per_class.tolist(),
            },
            "confusion": self.confusion.tolist(),
        }
        if label_names is not None:
            d["labels"] = list(label_names)
        return d


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def metrics_from_predictions(y_true, y_pred, num_classes):
    """Per-class one-vs-rest counts and macro averages; 0/0 rates count as 0."""
    y_true = np.asarray(y_true, dtype=np.intp)
    y_pred = np.asarray(y_pred, dtype=np.intp)
    if y_true.size == 0:
        raise EmptySplit("cannot evaluate an empty split")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return metrics_from_confusion(cm)


def metrics_from_confusion(cm):
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise EmptySplit("cannot evaluate an empty split")
    tp = np.diag(cm).copy()
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = total - tp - fp - fn
    prec = _safe_div(tp, tp + fp)
    rec = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * prec * rec, prec + rec)
    return Metrics(cm, tp, fp, fn, tn, prec, rec, f1,
                   accuracy=float(tp.sum() / total), precision=float(prec.mean()),
                   recall=float(rec.mean()), f1=float(f1.mean()))


def evaluate(checkpoint, samples, batch_size=64):
    if not samples:
        raise EmptySplit("cannot evaluate an empty split")
    items = [prepare(s.seq, checkpoint.vocab, checkpoint.config, s.adj) for s in samples]
    pred = predict_logits(checkpoint.params, checkpoint.config, items, batch_size).argmax(axis=1)
    return metrics_from_predictions([s.label for s in samples], pred, len(checkpoint.label_names))


def predict_source(checkpoint, source):
    seq = split(parse_source(source))
    item = prepare(seq, checkpoint.vocab, checkpoint.config, adjacency(seq, closure=checkpoint.config.adj_closure))
    probs = probabilities(predict_logits(checkpoint.params, checkpoint.config, [item]))[0]
    return probs
