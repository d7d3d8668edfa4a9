"""Command-line entry point: ``gen``, ``train``, ``eval`` and ``bench``.

Every subcommand accepts ``--config FILE`` with flat ``key = value`` lines
whose keys are the long flag names (dashes or underscores).  Flags given on
the command line win over the file, which wins over built-in defaults.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .data import (SyntheticConfig, featureset_digest, generate_synthetic, generate_train_test,
                   load_featureset, save_featureset)
from .errors import ConfigError, GraphSamplingError, ParseError, TrainingAborted, ValidationError
from .evaluation import evaluate, make_split, write_eval_csv
from .loss import LossConfig
from .metric import RerankConfig
from .model import MODEL_KINDS, EmbeddingModel
from .samplers import SAMPLER_KINDS, SamplerConfig
from .trainer import TrainConfig, train

log = logging.getLogger("graph_sampling")

EXIT_IO = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3

BENCH_COLUMNS = ("sampler", "seed", "macc", "active_frac_epoch1", "iters_to_target",
                 "wall_seconds")


def _clip_value(text):
    if text.strip().lower() == "none":
        return None
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'none' or a positive number, got {text!r}")
    if not (math.isfinite(value) and value > 0):
        raise argparse.ArgumentTypeError(
            f"clip threshold must be > 0, got {text} (use 'none' to disable clipping)")
    return value


def _optional_int(text):
    return None if text.strip().lower() == "none" else int(text)


def _target_value(text):
    if text.strip().lower() == "pk":
        return "pk"
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'pk' or a number, got {text!r}")


def _bool_value(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError("expected 'key = value'", lineno, path)
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ParseError("empty key", lineno, path)
            values[key.replace("-", "_")] = value
    return values


def _apply_config_file(parser, path, argv):
    """Install file values as parser defaults so explicit flags still override them."""
    raw = read_config_file(path)
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config")}
    converted = {}
    for key, text in raw.items():
        action = actions.get(key)
        if action is None:
            raise ConfigError(f"{path}: unknown config key {key!r}")
        try:
            if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                value = _bool_value(text)
            elif action.type is not None:
                value = action.type(text)
            else:
                value = text
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ConfigError(f"{path}: bad value for {key}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise ConfigError(f"{path}: {key} must be one of {list(action.choices)}, got {value!r}")
        converted[key] = value
    parser.set_defaults(**converted)
    # required options satisfied by the file must not be demanded again
    for key in converted:
        actions[key].required = False
    return parser.parse_args(argv)


# -- argument groups --------------------------------------------------------

def _add_data_args(p, with_test=True):
    g = p.add_argument_group("synthetic data")
    g.add_argument("--classes", type=int, default=64, help="number of training classes")
    g.add_argument("--groups", type=int, default=8, help="number of group centres")
    g.add_argument("--dim", type=int, default=32, help="feature dimension d_in")
    g.add_argument("--per-class", type=int, default=6,
                   help="samples per class (lower bound when --per-class-max is set)")
    g.add_argument("--per-class-max", type=_optional_int, default=None)
    g.add_argument("--group-scale", type=float, default=4.0)
    g.add_argument("--class-scale", type=float, default=1.0)
    g.add_argument("--sigma", type=float, default=0.5, help="within-class noise std")
    g.add_argument("--signal-dim", type=_optional_int, default=None,
                   help="coordinates carrying class structure (default: all)")
    g.add_argument("--data-seed", type=_optional_int, default=None,
                   help="generator seed (default: --seed)")
    if with_test:
        g.add_argument("--test-classes", type=int, default=0,
                       help="also draw this many held-out classes from the same world")


def _add_train_args(p):
    g = p.add_argument_group("training")
    g.add_argument("--batch-size", type=int, default=64)
    g.add_argument("--k", type=int, default=2, help="instances per class in a batch")
    g.add_argument("--margin", type=float, default=16.0)
    g.add_argument("--clip", type=_clip_value, default=8.0,
                   help="gradient-norm threshold T, or 'none'")
    g.add_argument("--epochs", type=int, default=15)
    g.add_argument("--decay-epoch", type=int, default=10)
    g.add_argument("--decay-factor", type=float, default=0.1)
    g.add_argument("--lr", type=float, default=0.01)
    g.add_argument("--rerank", choices=("none", "kreciprocal"), default="kreciprocal")
    g.add_argument("--k1", type=int, default=20)
    g.add_argument("--k2", type=int, default=6)
    g.add_argument("--lambda", dest="lam", type=float, default=0.3)
    g.add_argument("--match-gs-iters", action="store_true",
                   help="give pk/cluster epochs as many batches as there are classes")
    g.add_argument("--num-batches", type=_optional_int, default=None)
    g.add_argument("--num-clusters", type=int, default=10)
    g.add_argument("--model", choices=MODEL_KINDS, default="linear")
    g.add_argument("--embed-dim", type=int, default=32)
    g.add_argument("--hidden-dim", type=int, default=64)
    g.add_argument("--bias", action="store_true")
    g.add_argument("--l2-normalize", action="store_true")
    g.add_argument("--eval-every", type=_optional_int, default=None,
                   help="score the held-out split every N steps")


def _add_common(p):
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metric", choices=("euclidean", "cosine"), default="euclidean")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graph-sampling",
                                     description="Graph-sampling metric learning on feature sets.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic feature file")
    _add_common(p)
    _add_data_args(p)
    p.add_argument("-o", "--out", required=True, help="training feature file")
    p.add_argument("--test-out", help="held-out feature file (needs --test-classes)")

    p = sub.add_parser("train", help="train one model")
    _add_common(p)
    _add_train_args(p)
    p.add_argument("--sampler", choices=SAMPLER_KINDS, default="gs")
    p.add_argument("--train", dest="train_file", required=True, help="training feature file")
    p.add_argument("--test", dest="test_file", help="held-out feature file")
    p.add_argument("--queries-per-class", type=int, default=1)
    p.add_argument("-o", "--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a feature file")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", dest="test_file", required=True)
    p.add_argument("--queries-per-class", type=int, default=1)
    p.add_argument("-o", "--out", required=True, help="evaluation CSV")

    p = sub.add_parser("bench", help="compare samplers over several runs")
    _add_common(p)
    _add_train_args(p)
    _add_data_args(p)
    p.add_argument("--samplers", default="pk,cluster,gs",
                   help="comma-separated list drawn from " + ",".join(SAMPLER_KINDS))
    p.add_argument("--runs", type=int, default=4)
    p.add_argument("--train", dest="train_file", help="training feature file (else synthetic)")
    p.add_argument("--test", dest="test_file", help="held-out feature file (else synthetic)")
    p.add_argument("--queries-per-class", type=int, default=1)
    p.add_argument("--target-map", type=_target_value, default="pk",
                   help="held-out mAP target for iters_to_target, or 'pk' for the PK run's final mAP")
    p.add_argument("-o", "--out", required=True, help="comparison CSV")
    return parser


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        # the top-level parser has no options of its own, so argv[0] is the command
        argv = list(sys.argv[1:] if argv is None else argv)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub_args = _apply_config_file(sub, args.config, argv[1:])
        sub_args.command = args.command
        return sub_args
    return args


# -- config assembly ---------------------------------------------------------

def synthetic_config(args) -> SyntheticConfig:
    hi = args.per_class if args.per_class_max is None else args.per_class_max
    seed = args.seed if args.data_seed is None else args.data_seed
    cfg = SyntheticConfig(num_classes=args.classes, samples_per_class_min=args.per_class,
                          samples_per_class_max=hi, ambient_dim=args.dim,
                          num_groups=args.groups, group_center_scale=args.group_scale,
                          class_center_scale=args.class_scale, within_class_sigma=args.sigma,
                          seed=seed, signal_dim=args.signal_dim)
    cfg.validate()
    return cfg


def train_config(args, seed=None) -> TrainConfig:
    rerank = RerankConfig("none" if args.rerank == "none" else "k-reciprocal",
                          args.k1, args.k2, args.lam)
    return TrainConfig(
        lr=args.lr, decay_factor=args.decay_factor, decay_epoch=args.decay_epoch,
        total_epochs=args.epochs, clip=args.clip, seed=args.seed if seed is None else seed,
        metric=args.metric, rerank=rerank, loss=LossConfig(args.margin),
        sampler=SamplerConfig(args.batch_size, args.k, args.seed if seed is None else seed),
        num_batches=args.num_batches, match_gs_iters=args.match_gs_iters,
        num_clusters=args.num_clusters, model_kind=args.model, embed_dim=args.embed_dim,
        hidden_dim=args.hidden_dim, bias=args.bias, l2_normalize=args.l2_normalize)


def _write_manifest(path, args, extra):
    """Echo every resolved option so a run can be repeated from its outputs."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# graph-sampling {__version__}\n")
        for key in sorted(vars(args)):
            if key in ("config", "verbose"):
                continue
            value = getattr(args, key)
            fh.write(f"{key} = {'none' if value is None else value}\n")
        for key, value in extra.items():
            fh.write(f"# {key}: {value}\n")


# -- subcommands -------------------------------------------------------------

def cmd_gen(args):
    cfg = synthetic_config(args)
    if args.test_classes:
        if not args.test_out:
            raise ConfigError("--test-classes needs --test-out")
        train_set, test_set = generate_train_test(cfg, args.test_classes)
    else:
        if args.test_out:
            raise ConfigError("--test-out needs --test-classes")
        train_set, test_set = generate_synthetic(cfg), None
    save_featureset(train_set, args.out)
    print(f"{args.out}: N={len(train_set)} C={train_set.num_classes} d_in={train_set.dim}")
    if test_set is not None:
        save_featureset(test_set, args.test_out)
        print(f"{args.test_out}: N={len(test_set)} C={test_set.num_classes} d_in={test_set.dim}")
    return 0


def cmd_train(args):
    cfg = train_config(args)
    train_set = load_featureset(args.train_file)
    split = None
    if args.test_file:
        split = make_split(load_featureset(args.test_file), args.queries_per_class, args.seed)
    os.makedirs(args.out, exist_ok=True)
    digest = featureset_digest(train_set)
    log.info("training data %s sha256=%s", args.train_file, digest)
    _write_manifest(os.path.join(args.out, "manifest.txt"), args, {"train_sha256": digest})
    try:
        model, metrics = train(train_set, cfg, args.sampler, eval_split=split,
                               eval_every=args.eval_every)
    except TrainingAborted as exc:
        diag = os.path.join(args.out, "diverged.json")
        with open(diag, "w", encoding="utf-8") as fh:
            json.dump({"error": str(exc), **exc.state}, fh, indent=1, default=str)
        print(f"error: training diverged ({exc}); diagnostics in {diag}", file=sys.stderr)
        return EXIT_DIVERGED
    model.save(os.path.join(args.out, "model.ckpt"))
    with open(os.path.join(args.out, "metrics.csv"), "w", encoding="utf-8", newline="") as fh:
        metrics.write_iterations(fh)
    with open(os.path.join(args.out, "epochs.csv"), "w", encoding="utf-8", newline="") as fh:
        metrics.write_epochs(fh)
    if split is not None:
        with open(os.path.join(args.out, "curve.csv"), "w", encoding="utf-8", newline="") as fh:
            metrics.write_curve(fh)
        report = evaluate(model, split, cfg.metric)
        with open(os.path.join(args.out, "eval.csv"), "w", encoding="utf-8", newline="") as fh:
            write_eval_csv([("heldout", args.seed, report)], fh)
        print(f"rank1={report.rank1:.4f} mAP={report.map:.4f} mAcc={report.macc:.4f}")
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args):
    model = EmbeddingModel.load(args.checkpoint)
    test_set = load_featureset(args.test_file)
    if model.d_in != test_set.dim:
        raise ValidationError(
            f"checkpoint {args.checkpoint} expects d_in={model.d_in}, "
            f"{args.test_file} has {test_set.dim}")
    split = make_split(test_set, args.queries_per_class, args.seed)
    report = evaluate(model, split, args.metric)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        write_eval_csv([("heldout", args.seed, report)], fh)
    print(f"rank1={report.rank1:.4f} mAP={report.map:.4f} mAcc={report.macc:.4f}")
    return 0


def _bench_data(args):
    if bool(args.train_file) != bool(args.test_file):
        raise ConfigError("bench needs both --train and --test, or neither")
    if args.train_file:
        return load_featureset(args.train_file), load_featureset(args.test_file)
    if args.test_classes < 2:
        raise ConfigError("synthetic bench data needs --test-classes >= 2")
    return generate_train_test(synthetic_config(args), args.test_classes)


def run_bench(args):
    """Train every sampler for every run; returns the comparison rows."""
    samplers = [s.strip() for s in args.samplers.split(",") if s.strip()]
    for s in samplers:
        if s not in SAMPLER_KINDS:
            raise ConfigError(f"unknown sampler {s!r}, expected one of {SAMPLER_KINDS}")
    if args.runs < 1:
        raise ConfigError("--runs must be >= 1")
    if args.target_map == "pk" and "pk" not in samplers:
        raise ConfigError("--target-map pk needs the pk sampler in --samplers")
    train_set, test_set = _bench_data(args)
    log.info("bench data sha256=%s (shared by every sampler and run)",
             featureset_digest(train_set))
    rows = []
    for run in range(args.runs):
        seed = args.seed ^ run
        split = make_split(test_set, args.queries_per_class, seed)
        results = {}
        # pk first so its final mAP can serve as the target for the others
        for kind in sorted(samplers, key=lambda s: s != "pk"):
            cfg = train_config(args, seed)
            t0 = time.perf_counter()
            model, metrics = train(train_set, cfg, kind, eval_split=split,
                                   eval_every=args.eval_every)
            wall = time.perf_counter() - t0
            report = evaluate(model, split, cfg.metric)
            results[kind] = (report, metrics, wall)
        target = results["pk"][0].map if args.target_map == "pk" else args.target_map
        for kind in samplers:
            report, metrics, wall = results[kind]
            rows.append((kind, seed, report.macc, metrics.epoch_active_fraction(0),
                         metrics.steps_to_map(target), wall))
    return rows


def summarize(rows):
    """Per-sampler ``(mean, std, n)`` of mAcc, in first-seen sampler order."""
    out = {}
    for kind in dict.fromkeys(r[0] for r in rows):
        values = np.array([r[2] for r in rows if r[0] == kind])
        out[kind] = (float(values.mean()), float(values.std()), int(values.size))
    return out


def cmd_bench(args):
    import csv

    rows = run_bench(args)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(BENCH_COLUMNS)
        for kind, seed, m, act, iters, wall in rows:
            writer.writerow([kind, seed, repr(m), repr(act), "" if iters is None else iters,
                             f"{wall:.6f}"])
    for kind, (mean, std, n) in summarize(rows).items():
        print(f"{kind:8s} mAcc {mean:.4f} +- {std:.4f} over {n} runs")
    print(f"wrote {args.out}")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except GraphSamplingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
