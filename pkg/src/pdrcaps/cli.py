"""Command-line entry point: ``pdrcaps {train,eval,analyze,smoke}``.

Exit codes: 0 success, 1 configuration, 2 data, 3 numeric divergence,
4 checkpoint / file I/O.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys

from . import __version__
from .analyzer import analyze, compare_text, footnote_text, nc_sweep
from .checkpoint import load_checkpoint, save_checkpoint
from .config import dump_config, load_config, parse_config
from .data import SyntheticSpec, load_directory, make_synthetic, train_val_split
from .errors import CheckpointError, ConfigError, DataError, DivergenceError, PDRError
from .model import REFERENCE_CONFIGS, build_model
from .train import TrainConfig, TrainState, evaluate, history_csv, train

CHECKPOINT = "checkpoint.pdrc"
LAST_GOOD = "last_good.pdrc"
HISTORY = "history.csv"
MANIFEST = "manifest.json"
METRICS = "metrics.csv"
CONFUSION = "confusion.csv"


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which would collide with the data-error code
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------- helpers


def _resolve_config(args):
    if getattr(args, "config", None):
        return load_config(args.config, os.environ)
    name = getattr(args, "arch", None) or "pdr-small"
    if name not in REFERENCE_CONFIGS:
        raise ConfigError(f"unknown reference architecture {name!r}; choose from {sorted(REFERENCE_CONFIGS)}")
    # round-trip through the text form so environment overrides apply uniformly
    return parse_config(dump_config(REFERENCE_CONFIGS[name]()), os.environ)


def _synthetic_spec(data_cfg, arch, seed_offset=0):
    kw = {}
    for f in dataclasses.fields(SyntheticSpec):
        if f.name in data_cfg:
            kw[f.name] = type(f.default)(data_cfg[f.name])
    c, h, _ = arch.input_shape
    kw.setdefault("classes", arch.n_classes)
    kw.setdefault("image_size", h)
    kw.setdefault("channels", c)
    kw["seed"] = kw.get("seed", 0) + seed_offset
    return SyntheticSpec(**kw)


def load_data(data_cfg, arch, split):
    """Dataset for ``split`` ("train" or "test") as described by a ``[data]`` section.

    ``source`` is ``synthetic`` or a directory; ``limit`` / ``test_limit`` keep
    the first samples only.
    """
    source = data_cfg.get("source", "synthetic")
    try:
        if source == "synthetic":
            ds = make_synthetic(_synthetic_spec(data_cfg, arch, 0 if split == "train" else 1))
        else:
            ds = load_directory(source, split)
        limit = data_cfg.get("limit" if split == "train" else "test_limit")
        if limit is not None:
            ds = ds.head(int(limit))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, PDRError):
            raise
        raise ConfigError(f"[data] section: {exc}") from exc
    if len(ds) == 0:
        raise DataError(f"{split} split from {source!r} is empty")
    if tuple(ds.images.shape[1:]) != arch.input_shape:
        raise DataError(f"data shape {ds.images.shape[1:]} does not match the configured input {arch.input_shape}")
    return ds


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _train_overrides(args):
    out = {}
    for key in ("lr", "gamma", "batch_size", "max_epochs", "early_stop_patience", "val_fraction"):
        value = getattr(args, key, None)
        if value is not None:
            out[key] = repr(value) if isinstance(value, float) else str(value)
    if args.seed is not None:
        out["seed"] = str(args.seed)
    return out


# --------------------------------------------------------------------------- subcommands


def cmd_train(args):
    state = None
    if args.resume:
        model, extra, run = load_checkpoint(args.resume, with_extra=True)
        if "train/counters" not in extra:
            raise CheckpointError(f"{args.resume} carries no training state to resume")
        state = TrainState.from_tensors(extra, model)
    else:
        run = _resolve_config(args)
    if args.data:
        run.data["source"] = args.data
    if args.limit is not None:
        run.data["limit"] = str(args.limit)
    tcfg = TrainConfig.from_mapping({**run.train, **_train_overrides(args)})
    if not args.resume:
        model = build_model(run.arch, seed=tcfg.seed)
    os.makedirs(args.out, exist_ok=True)
    dataset = load_data(run.data, run.arch, "train")
    train_map = tcfg.to_mapping()

    def save(name, st):
        save_checkpoint(os.path.join(args.out, name), model, st.to_tensors(), train_map, run.data)

    try:
        result = train(model, dataset, tcfg, state=state, epoch_budget=args.epochs)
    except DivergenceError:
        # the trainer has already rolled the weights back to the last finite state
        save_checkpoint(os.path.join(args.out, LAST_GOOD), model, None, train_map, run.data)
        raise
    save(CHECKPOINT, result.state)
    _write(os.path.join(args.out, HISTORY), history_csv(result.history))
    artifacts = {"checkpoint": CHECKPOINT, "history": HISTORY}
    final_val = None
    if result.state.done:
        report = evaluate(model, result.val_set)
        final_val = report.accuracy
        _write(os.path.join(args.out, METRICS), report.to_csv())
        artifacts["metrics"] = METRICS
    manifest = {
        "tool": "pdrcaps",
        "version": __version__,
        "seed": tcfg.seed,
        "config": dump_config(run.arch, train_map, run.data),
        "artifacts": artifacts,
        "epochs_completed": result.state.epoch,
        "finished": result.state.done,
        "final_val_accuracy": final_val,
        "resumed_from": os.path.abspath(args.resume) if args.resume else None,
    }
    _write(os.path.join(args.out, MANIFEST), json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if not args.quiet:
        last = result.history[-1] if result.history else None
        status = "finished" if result.state.done else "paused"
        msg = f"{status} after {result.state.epoch} epochs"
        if last:
            msg += f"; last train_acc {last['train_acc']:.4f} val_acc {last['val_acc']:.4f}"
        print(msg)
        print(f"wrote {os.path.join(args.out, CHECKPOINT)}")
    return 0


def cmd_eval(args):
    model, _, run = load_checkpoint(args.checkpoint, with_extra=True)
    if args.data:
        run.data["source"] = args.data
    if args.limit is not None:
        run.data["test_limit" if args.split == "test" else "limit"] = str(args.limit)
    if args.split == "val":
        tcfg = TrainConfig.from_mapping(run.train)
        _, ds = train_val_split(load_data(run.data, run.arch, "train"), tcfg.val_fraction, tcfg.seed)
        if len(ds) == 0:
            raise DataError("validation split is empty")
    else:
        ds = load_data(run.data, run.arch, args.split)
    report = evaluate(model, ds)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write(os.path.join(args.out, METRICS), report.to_csv())
        _write(os.path.join(args.out, CONFUSION), report.confusion_csv(normalized=True))
    if not args.quiet:
        print(report.to_text())
    return 0


def cmd_analyze(args):
    run = _resolve_config(args)
    reports = [analyze(run.arch, args.batch)]
    for name in args.compare or ():
        if name not in REFERENCE_CONFIGS:
            raise ConfigError(f"unknown reference architecture {name!r}")
        reports.append(analyze(REFERENCE_CONFIGS[name](), args.batch))
    out = [reports[0].to_text()]
    if len(reports) > 1:
        out += ["", compare_text(reports)]
    if args.footnote:
        out += ["", footnote_text()]
    rows = []
    if args.nc:
        entries = [(f"model{i + 1}", t, a) for i, (t, a) in enumerate(args.nc)]
        rows = nc_sweep(entries, args.n)
        out += ["", f"{'entry':<10}{'n':>6}{'NC':>20}"]
        out += [f"{label:<10}{n:>6g}{nc:>20.12g}" for label, n, nc in rows]
    if not args.quiet:
        print("\n".join(out))
    if args.csv:
        _write(args.csv, reports[0].to_csv())
    if args.nc_csv and rows:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["entry", "n", "nc"])
        w.writerows([label, repr(float(n)), repr(nc)] for label, n, nc in rows)
        _write(args.nc_csv, buf.getvalue())
    return 0


def cmd_smoke(args):
    """Train the desk-scale model on a small synthetic set and report train accuracy."""
    arch = REFERENCE_CONFIGS["pdr-small"]()
    per_class = -(-args.samples // arch.n_classes)
    data = {"source": "synthetic", "samples_per_class": str(per_class), "limit": str(args.samples)}
    os.makedirs(args.out, exist_ok=True)
    cfg_path = os.path.join(args.out, "smoke.cfg")
    _write(cfg_path, dump_config(arch, {"max_epochs": str(args.max_epochs)}, data))
    train_args = build_parser().parse_args(["train", "--config", cfg_path, "--out", args.out])
    train_args.seed, train_args.quiet, train_args.verbose = args.seed, True, args.verbose
    cmd_train(train_args)
    model, _, run = load_checkpoint(os.path.join(args.out, CHECKPOINT), with_extra=True)
    tcfg = TrainConfig.from_mapping(run.train)
    train_set, _ = train_val_split(load_data(run.data, run.arch, "train"), tcfg.val_fraction, tcfg.seed)
    acc = evaluate(model, train_set).accuracy
    if not args.quiet:
        print(f"train accuracy {acc:.4f} on {len(train_set)} samples")
    return 0


# --------------------------------------------------------------------------- parser


def build_parser():
    p = _Parser(prog="pdrcaps", description="Parallel dynamic routing capsule networks on numpy.")
    p.add_argument("--seed", type=int, default=None, help="overrides the [train] seed")
    p.add_argument("--quiet", action="store_true", help="print nothing on success")
    p.add_argument("--verbose", action="store_true", help="per-epoch log lines")
    p.add_argument("--version", action="version", version=f"pdrcaps {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", help="train a model and write checkpoint, history and manifest")
    src = t.add_mutually_exclusive_group()
    src.add_argument("--config", help="config file")
    src.add_argument("--arch", help=f"reference architecture: {', '.join(sorted(REFERENCE_CONFIGS))}")
    src.add_argument("--resume", help="checkpoint written by an earlier train run")
    t.add_argument("--data", help="'synthetic' or a dataset directory (overrides [data] source)")
    t.add_argument("--limit", type=int, help="use the first N training samples")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--lr", type=float)
    t.add_argument("--gamma", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--max-epochs", dest="max_epochs", type=int, help="per hard-training round")
    t.add_argument("--patience", dest="early_stop_patience", type=int)
    t.add_argument("--val-fraction", dest="val_fraction", type=float)
    t.add_argument("--epochs", type=int, help="stop after this many epochs (resumable)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics and normalized confusion matrix for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="'synthetic' or a dataset directory")
    e.add_argument("--split", choices=("test", "train", "val"), default="test")
    e.add_argument("--limit", type=int, help="use the first N samples")
    e.add_argument("--out", help=f"directory for {METRICS} and {CONFUSION}")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="parameters, MACs, FLOPs, capsule counts and NC")
    a.add_argument("--config")
    a.add_argument("--arch")
    a.add_argument("--batch", type=int, default=128)
    a.add_argument("--compare", nargs="+", metavar="ARCH", help="reference architectures to tabulate alongside")
    a.add_argument("--footnote", action="store_true", help="four 3x3 convs versus one 9x9 conv")
    a.add_argument("--nc", nargs=2, type=float, action="append", metavar=("TEST_TIME", "ACCURACY"))
    a.add_argument("--n", nargs="+", type=float, default=[0.5, 1.0, 2.0])
    a.add_argument("--csv", help="write the per-layer cost table here")
    a.add_argument("--nc-csv", dest="nc_csv", help="write the NC sweep here")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("smoke", help="capacity check: train pdr-small on a small synthetic set")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--samples", type=int, default=64)
    s.add_argument("--max-epochs", dest="max_epochs", type=int, default=100, help="per hard-training round")
    s.set_defaults(func=cmd_smoke)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    level = logging.WARNING if args.quiet else (logging.INFO if args.verbose else logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PDRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
