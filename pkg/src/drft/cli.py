"""Command line entry point: ``drft synth|train|eval|gradcheck``.

Outputs go to the config's ``output_dir`` unless ``DRFT_OUTPUT_DIR`` is set.
"""

import argparse
import logging
import os
import sys

from . import autograd as ag
from . import checkpoint
from .checkpoint import CheckpointFormatError
from .config import ConfigError, load_config
from .data import (
    AnnotationParseError,
    FeatureFormatError,
    SyntheticConfigError,
    corpus_dataset,
    directory_digest,
    generate_synthetic,
    load_dataset,
    separability_probe,
    write_corpus,
)
from .encoders import VocabularyError
from .harness import format_table, run_all
from .train import IncompatibleCheckpointError, Trainer, build_model, load_model_state, write_eval

log = logging.getLogger("drft")

EXIT_OK = 0
EXIT_FAILED = 1  # a check did not pass
EXIT_INPUT = 2  # bad config, missing paths, incompatible files
EXIT_NUMERIC = 3


def _overrides(args):
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.seed is not None:
        out["seed"] = str(args.seed)
    return out


def _config(args):
    return load_config(args.config, _overrides(args))


def _out_dir(cfg):
    path = cfg.output_dir
    os.makedirs(path, exist_ok=True)
    return path


def _load(cfg, split):
    root = cfg["data.root"]
    if not os.path.isdir(root):
        raise FileNotFoundError(f"dataset directory not found: {root}")
    return load_dataset(root, split, oov=cfg["data.oov"])


def cmd_synth(args):
    cfg = _config(args)
    corpus = generate_synthetic(cfg.synthetic())
    report = separability_probe([corpus_dataset(corpus, s) for s in corpus.splits])
    print("separability probe (pooled ground-truth features, linear classifier):")
    for line in report.lines():
        print("  " + line)
    if not report.passed:
        for f in report.failures:
            print(f"probe failure: {f}", file=sys.stderr)
        print("dataset rejected: planted signatures are not separable", file=sys.stderr)
        return EXIT_FAILED
    root = cfg["data.root"]
    write_corpus(corpus, root)
    sizes = ", ".join(f"{s}={len(items)}" for s, items in corpus.splits.items())
    print(f"wrote {root} ({sizes}); digest {directory_digest(root)}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    train_set = _load(cfg, cfg["data.train_split"])
    out = _out_dir(cfg)
    trainer = Trainer(cfg, train_set)
    log_path = os.path.join(out, "train.csv")
    ckpt_path = os.path.join(out, "model.ckpt")
    if args.checkpoint:
        meta = trainer.load(args.checkpoint)
        print(f"resumed from {args.checkpoint} at epoch {meta['epoch']}")
    remaining = cfg["train.epochs"] - trainer.epoch
    if remaining <= 0:
        print(f"checkpoint already at epoch {trainer.epoch} >= train.epochs")
        return EXIT_OK
    history = trainer.fit(remaining, log_path=log_path, checkpoint_path=ckpt_path,
                          callback=_progress if args.verbose else None)
    last = history[-1]
    print(f"epoch {last.epoch}: total loss {last.total:.4f}, train mIoU {last.train_miou:.2f}")
    print(f"wrote {log_path} and {ckpt_path}")
    return EXIT_OK


def _progress(stats):
    print(f"epoch {stats.epoch:4d}  loss {stats.total:.4f}  train mIoU {stats.train_miou:.2f}",
          flush=True)


def cmd_eval(args):
    cfg = _config(args)
    split = args.split or cfg["data.eval_split"]
    dataset = _load(cfg, split)
    model = build_model(cfg, dataset)
    if args.checkpoint:
        arrays, meta = checkpoint.load(args.checkpoint)
        load_model_state(model, cfg, arrays, meta)
    else:
        print("no --checkpoint given: evaluating a freshly initialized model", file=sys.stderr)
    path = os.path.join(_out_dir(cfg), f"eval_{split}.csv")
    result, _ = write_eval(path, split, model, dataset)
    recalls = "  ".join(f"R@{t}={v:.2f}" for t, v in sorted(result.recall_at.items()))
    print(f"{split}: {recalls}  mIoU={result.mean_tiou:.2f}  n={result.count}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(args):
    _config(args)  # validates the config even though checks use fixed tiny dims
    faults = args.inject_fault or []
    rows = run_all(seed=args.seed or 0, faults=faults)
    print(format_table(rows))
    failed = [r for r in rows if not r.passed]
    if failed:
        names = ", ".join(f"{r.module}/{r.name}" for r in failed)
        print(f"FAILED: {names}", file=sys.stderr)
        return EXIT_FAILED
    print(f"all {len(rows)} checks passed")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="drft", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file (defaults if omitted)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("synth", help="generate and probe the synthetic corpus"))
    p = common(sub.add_parser("train", help="train and write train.csv + model.ckpt"))
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p = common(sub.add_parser("eval", help="evaluate a checkpoint on a split"))
    p.add_argument("--checkpoint", help="checkpoint to evaluate")
    p.add_argument("--split", help="annotation split name (default: data.eval_split)")
    p = common(sub.add_parser("gradcheck", help="finite-difference gradient checks"))
    p.add_argument("--inject-fault", action="append", metavar="OP",
                   help="scale the backward rule of OP by 2 (repeatable)")
    return parser


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ag.NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except IncompatibleCheckpointError as exc:
        print(f"incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"path error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, SyntheticConfigError, AnnotationParseError, FeatureFormatError,
            CheckpointFormatError, VocabularyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
