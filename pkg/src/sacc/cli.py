"""Command-line entry point: ``sacc <command> ...``.

Commands print JSON (or CSV for ``bench``) on stdout.  Failures print
``{"error": {"kind", "line", "col", "message"}}`` on stdout and exit with 1
for bad input or 2 for an internal fault.
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .attention import ModelConfig
from .cfront import ast_to_dict, parse_source
from .errors import ConfigError, LabelOutOfRange, SaccError
from .model import attention_export
from .train import Checkpoint, TrainConfig, evaluate, history_csv, ingest, predict_source, train
from .treesplit import adjacency, split, split_to_dict

log = logging.getLogger("sacc")

# keys that only shape the attention mask; safe to override on a trained checkpoint
MASK_KEYS = ("window", "strict_window", "global_size", "global_indices", "patterns",
             "dilation", "random_per_row", "random_seed", "adj_closure", "attention_path")


@dataclass
class RunConfig:
    """Flat union of the model and training settings."""
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    explicit: set = field(default_factory=set)

    @staticmethod
    def keys():
        return [f.name for f in fields(ModelConfig)] + [f.name for f in fields(TrainConfig)]

    def update(self, values):
        model_keys = {f.name for f in fields(ModelConfig)}
        train_keys = {f.name for f in fields(TrainConfig)}
        unknown = sorted(set(values) - model_keys - train_keys)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        m = {k: v for k, v in values.items() if k in model_keys}
        t = {k: v for k, v in values.items() if k in train_keys}
        try:
            self.model = replace(self.model, **m)
            self.train = replace(self.train, **t)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        self.explicit |= set(values)
        return self

    def validate(self):
        try:
            self.model.validate()
            self.train.validate()
        except TypeError as exc:
            raise ConfigError(f"bad config value: {exc}") from exc
        return self

    def to_dict(self):
        return {**self.model.to_dict(), **self.train.to_dict()}


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(config_path=None, overrides=(), seed=None):
    rc = RunConfig()
    if config_path is not None:
        try:
            data = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {config_path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        rc.update(data)
    sets = {}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        sets[key.strip()] = _parse_value(value)
    rc.update(sets)
    if seed is not None:
        rc.update({"seed": seed})
    return rc.validate()


def _read_source(path):
    return Path(path).read_bytes().decode("utf-8", errors="replace")


def _emit(obj, out):
    out.write(json.dumps(obj, ensure_ascii=False, allow_nan=False))
    out.write("\n")


def _with_mask_overrides(checkpoint, rc):
    keys = [k for k in MASK_KEYS if k in rc.explicit]
    if not keys:
        return checkpoint.config
    return replace(checkpoint.config, **{k: getattr(rc.model, k) for k in keys}).validate()


# ---------------------------------------------------------------------------
# commands

def cmd_parse(args, rc, out):
    _emit(ast_to_dict(parse_source(_read_source(args.file))), out)


def cmd_split(args, rc, out):
    closure = args.adj_closure or rc.model.adj_closure
    _emit(split_to_dict(split(parse_source(_read_source(args.file))), closure=closure), out)


def cmd_train(args, rc, out):
    ds = ingest(args.manifest, seed=rc.train.seed, ratios=rc.train.split_ratios, closure=rc.model.adj_closure)
    result = train(ds, rc.model, rc.train, out_dir=args.out)
    out_dir = Path(args.out)
    _emit({
        "checkpoint": str(out_dir / "checkpoint.sacc"),
        "final_checkpoint": str(out_dir / "final.sacc"),
        "history": str(out_dir / "history.csv"),
        "epochs": len(result.history),
        "best_epoch": result.best_epoch,
        "labels": ds.label_names,
        "samples": {s: len(ds.subset(s)) for s in ("train", "val", "test")},
        "failures": ds.failures,
    }, out)


def _relabel(samples, ds_names, ckpt_names):
    index = {name: i for i, name in enumerate(ckpt_names)}
    for s in samples:
        name = ds_names[s.label]
        if name not in index:
            raise LabelOutOfRange(f"label {name!r} is not known to the checkpoint")
        s.label = index[name]
    return samples


def cmd_eval(args, rc, out):
    ckpt = Checkpoint.load(args.checkpoint)
    ds = ingest(args.manifest, seed=rc.train.seed, ratios=rc.train.split_ratios, closure=ckpt.config.adj_closure)
    samples = ds.samples if args.split == "all" else ds.subset(args.split)
    samples = _relabel(samples, ds.label_names, ckpt.label_names)
    metrics = evaluate(ckpt, samples)
    result = metrics.to_dict(ckpt.label_names)
    result["samples"] = len(samples)
    result["failures"] = ds.failures
    _emit(result, out)


def cmd_predict(args, rc, out):
    ckpt = Checkpoint.load(args.checkpoint)
    probs = predict_source(ckpt, _read_source(args.file))
    best = int(np.argmax(probs))
    _emit({"label": ckpt.label_names[best],
           "probs": {name: float(p) for name, p in zip(ckpt.label_names, probs)}}, out)


def cmd_attn(args, rc, out):
    ckpt = Checkpoint.load(args.checkpoint)
    config = _with_mask_overrides(ckpt, rc)
    seq = split(parse_source(_read_source(args.file)))
    adj = adjacency(seq, closure=config.adj_closure)
    _emit(attention_export(ckpt.params, config, ckpt.vocab, seq, adj, args.layer, args.head), out)


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def cmd_bench(args, rc, out):
    patterns = None
    if args.patterns is not None:
        patterns = [p for p in args.patterns.split(",") if p.strip()]
    rows = bench_mod.run_bench(args.lengths, rc.model, repeats=args.repeats, seed=rc.train.seed,
                               patterns=patterns, threads=args.threads)
    out.write(bench_mod.rows_to_csv(rows))


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="sacc", description="Statement-tree sparse-attention code classifier.")
    p.add_argument("--config", metavar="PATH", help="JSON file with model/training settings")
    p.add_argument("--seed", type=int, help="seed for splits, initialisation and shuffling")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                   help="override one setting; VALUE is parsed as JSON when possible")
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("parse", help="print the AST of a C file as JSON")
    s.add_argument("file")
    s.set_defaults(func=cmd_parse)

    s = sub.add_parser("split", help="print statement trees and their parent links")
    s.add_argument("file")
    s.add_argument("--adj-closure", action="store_true", help="also link every tree to all its ancestors")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train on a labelled manifest")
    s.add_argument("manifest")
    s.add_argument("--out", default="run", help="output directory (default: ./run)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    s.add_argument("checkpoint")
    s.add_argument("manifest")
    s.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="classify one C file")
    s.add_argument("checkpoint")
    s.add_argument("file")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("attn", help="export one head's attention weights as JSON")
    s.add_argument("checkpoint")
    s.add_argument("file")
    s.add_argument("--layer", type=int, default=0)
    s.add_argument("--head", type=int, default=0)
    s.set_defaults(func=cmd_attn)

    s = sub.add_parser("bench", help="time sparse against dense attention")
    s.add_argument("--lengths", type=_int_list, default=[64, 256, 1024])
    s.add_argument("--patterns", default=None, help="comma-separated pattern names")
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
    s.set_defaults(func=cmd_bench)
    return p


def _error(kind, message, line=None, col=None):
    return {"error": {"kind": kind, "line": line, "col": col, "message": message}}


def main(argv=None, out=None):
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    bench_mod.tune_allocator()
    try:
        rc = load_run_config(args.config, args.overrides, args.seed)
        args.func(args, rc, out)
    except SaccError as exc:
        _emit({"error": exc.to_dict()}, out)
        return 1
    except OSError as exc:
        _emit(_error("io", f"{exc.strerror or exc}: {exc.filename}" if exc.filename else str(exc)), out)
        return 1
    except ValueError as exc:
        _emit(_error("value", str(exc)), out)
        return 1
    except Exception as exc:  # invariant violation
        log.exception("internal error")
        _emit(_error("internal", f"{type(exc).__name__}: {exc}"), out)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
