"""Command-line entry point: ``csqa train | eval | gen-data | dump-heatmaps``."""

import argparse
import json
import logging
import sys

from . import checkpoint as ckpt_io
from . import config as config_mod
from . import data as data_mod
from . import harness
from .errors import CsqaError, ConfigurationError, DimensionError, NonFiniteError, UsageError


def _train(args):
    cfg = config_mod.load(args.config)
    out = args.out or cfg.output
    res = harness.train(cfg, output=out, log_every=1)
    summary = {"output": out, "epochs": cfg.train.epochs, "final_loss": res.loss_trace[-1],
               "train_accuracy": res.train_accuracy[-1]}
    if res.test_accuracy:
        summary["test_accuracy"] = res.test_accuracy[-1]
    print(json.dumps(summary))


def _eval(args):
    ckpt = ckpt_io.load(args.checkpoint)
    acc, heads = harness.evaluate(ckpt, data_mod.load_eval_set(args.data))
    print(json.dumps({"accuracy": acc, "per_head": heads, "config_hash": ckpt.config_hash}))


def _gen_data(args):
    with open(args.spec) as fh:
        cfg = config_mod.parse_text(fh.read(), config_mod.RunConfig())
    spec = cfg.data
    spec.validate()
    if spec.kind != "synthetic":
        raise UsageError("gen-data needs data.kind = 'synthetic'")
    train, test = data_mod.split(data_mod.generate_synthetic(spec), spec.test_fraction)
    data_mod.write_splits(train, test, args.out)
    print(json.dumps({"out": args.out, "train": len(train), "test": len(test)}))


def _dump_heatmaps(args):
    ckpt = ckpt_io.load(args.checkpoint)
    if args.images:
        images = data_mod.load_eval_set(args.images).images[:args.limit]
    else:
        cfg = config_mod.parse_text(ckpt.config_text)
        _, test = data_mod.split(data_mod.generate_synthetic(cfg.data), cfg.data.test_fraction)
        images = test.images[:args.limit]
    paths = harness.dump_heatmaps(ckpt, images, args.out)
    print(json.dumps({"out": args.out, "files": len(paths)}))


class _Parser(argparse.ArgumentParser):
    """Argument errors are reported as one JSON line like every other failure."""

    def error(self, message):
        print(json.dumps({"error": "usage", "type": "ArgumentError", "message": message}), file=sys.stderr)
        sys.exit(2)


def build_parser():
    p = _Parser(prog="csqa", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)
    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="override the config's output directory")
    t.set_defaults(func=_train)
    e = sub.add_parser("eval", help="image-branch accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset directory (uses test/ when present)")
    e.set_defaults(func=_eval)
    g = sub.add_parser("gen-data", help="render the synthetic dataset to PPM folders")
    g.add_argument("--spec", required=True, help="config text with data.* keys")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_gen_data)
    h = sub.add_parser("dump-heatmaps", help="per-stage channel-mean activation grids")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--out", required=True)
    h.add_argument("--images", help="dataset directory; defaults to the checkpoint's synthetic test split")
    h.add_argument("--limit", type=int, default=8)
    h.set_defaults(func=_dump_heatmaps)
    return p


_KINDS = (
    (ConfigurationError, "config"),
    (DimensionError, "dimension"),
    (NonFiniteError, "non_finite"),
    (UsageError, "usage"),
    (CsqaError, "csqa"),
    (OSError, "io"),
)


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one error line
        kind = next((k for cls, k in _KINDS if isinstance(exc, cls)), "internal")
        msg = " ".join(str(exc).split())
        print(json.dumps({"error": kind, "type": type(exc).__name__, "message": msg}), file=sys.stderr)
        return 2 if kind == "usage" or kind == "config" else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
