"""Command-line surface: preprocess, train, eval, trace, groups.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Set POIREC_SEED to override the configured seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import TrainConfig, load_config
from .ingest import DataError, SPLIT_CODES, load_dataset, preprocess
from .metrics import (evaluate, group_users_by_mobility, sampling_trace,
                      trace_sample_for_user)
from .model import Model, load_checkpoint, save_checkpoint
from .tensor import NonFiniteError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _seed_override(config):
    env = os.environ.get("POIREC_SEED")
    if env is not None:
        config.seed = int(env)
    return config


def _cmd_preprocess(args):
    dataset, manifest = preprocess(args.input, args.format, args.out,
                                   threshold_km=args.threshold_km,
                                   min_core=args.min_core)
    print(f"users={manifest['n_users']} pois={manifest['n_pois']} "
          f"interactions={manifest['n_interactions']} "
          f"avg_visit={manifest['avg_visit']:.2f}")
    print(f"written to {args.out}")
    return EXIT_OK


def _cmd_train(args):
    config = load_config(args.config) if args.config else TrainConfig()
    _seed_override(config)
    dataset, manifest = load_dataset(args.data)
    if "threshold_km" in manifest:
        config.threshold_km = float(manifest["threshold_km"])
    model = Model(dataset, config)
    model.fit(progress=lambda e: print(
        f"epoch {e['epoch']:3d} loss {e['train_total']:.4f} "
        f"valid R@10 {e.get('valid_recall10', float('nan')):.4f}", flush=True))
    save_checkpoint(model, args.out)
    best = f"{model.best_metric:.4f}" if model.best_metric is not None else "n/a"
    print(f"saved {args.out} (best valid R@10 {best} at epoch {model.best_epoch})")
    return EXIT_OK


def _cmd_eval(args):
    dataset, _ = load_dataset(args.data)
    model = load_checkpoint(args.ckpt, dataset)
    if os.environ.get("POIREC_SEED") is not None:
        model.config.seed = int(os.environ["POIREC_SEED"])
    groups = None
    if args.groups:
        boundaries = [float(b) for b in args.boundaries.split(",")]
        groups = group_users_by_mobility(dataset, boundaries)
    report = evaluate(model, dataset, SPLIT_CODES[args.split], groups=groups)
    report.save(args.report)
    for k in sorted(report.recall):
        print(f"recall@{k}={report.recall[k]:.4f} ndcg@{k}={report.ndcg[k]:.4f}")
    print(f"report written to {args.report}")
    return EXIT_OK


def _cmd_trace(args):
    dataset, _ = load_dataset(args.data)
    model = load_checkpoint(args.ckpt, dataset)
    sample = trace_sample_for_user(model, dataset, args.user)
    trace = sampling_trace(model, dataset, sample, top_k=args.top_k)
    trace.write_csv(dataset, args.out)
    means = {f"{f * 100:.0f}%": round(trace.mean_distance(f), 3) for f in trace.fractions}
    print(f"trace for user {args.user} -> {args.out}")
    print(f"mean distance to target by checkpoint: {json.dumps(means)}")
    return EXIT_OK


def _cmd_groups(args):
    dataset, _ = load_dataset(args.data)
    boundaries = [float(b) for b in args.boundaries.split(",")]
    groups = group_users_by_mobility(dataset, boundaries)
    counts = {}
    for label in groups.values():
        counts[label] = counts.get(label, 0) + 1
    for label in sorted(counts):
        print(f"{label}\t{counts[label]}")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="poirec",
                     description="next-POI recommender with diffusion-sampled "
                                 "spatial preference")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="parse, filter, split, and persist a check-in log")
    p.add_argument("--input", required=True)
    p.add_argument("--format", default="canonical_tsv",
                   choices=["canonical_tsv", "gowalla", "foursquare"])
    p.add_argument("--threshold-km", type=float, default=1.0)
    p.add_argument("--min-core", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("train", help="train a model on a preprocessed dataset")
    p.add_argument("--config", help="JSON or TOML file of TrainConfig fields")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["valid", "test"])
    p.add_argument("--report", required=True, help="output JSON path")
    p.add_argument("--groups", action="store_true",
                   help="break metrics down by mobility group")
    p.add_argument("--boundaries", default="5,10,15")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("trace", help="export the sampling trace for one user")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--top-k", type=int, default=100)
    p.set_defaults(func=_cmd_trace)

    p = sub.add_parser("groups", help="report the mobility-group distribution")
    p.add_argument("--data", required=True)
    p.add_argument("--boundaries", default="5,10,15")
    p.set_defaults(func=_cmd_groups)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as e:
        return e.code if e.code is not None else EXIT_OK
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
