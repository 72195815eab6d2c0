"""Command line entry point: ``protoshape <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext

import yaml
from threadpoolctl import threadpool_limits

from . import harness
from .config import ConfigError, ExperimentConfig, load_config, override

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 2, 3, 4


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(raw)
    return out


def build_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = _parse_set(args.set)
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.data is not None:
        changes["data_root"] = args.data
    if args.deterministic:
        changes["workers"] = 1
    return override(cfg, changes) if changes else cfg


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def cmd_gen_data(cfg, args):
    summary = harness.gen_data(cfg)
    _print(summary)
    print("changed" if summary["changed"] else "no changes")


def cmd_train_pretext(cfg, args):
    harness.write_config(cfg)
    res = harness.train_pretext(cfg, resume=args.resume, stop_after=args.stop_after)
    _print({k: v for k, v in res.items() if k != "losses"})


def cmd_fit_prototypes(cfg, args):
    res = harness.fit_prototypes(cfg)
    _print({"prototypes": res["prototypes"], "radii": res["radii"]})


def cmd_train(cfg, args):
    harness.write_config(cfg)
    rows = harness.train(cfg)["rows"]
    _print(rows[-1])


def cmd_ablate(cfg, args):
    methods = args.methods.split(",") if args.methods else list(harness.ABLATION)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    rows = harness.ablate(cfg, methods, seeds)
    for r in rows:
        print(f"{r['method']} seed={r['seed']} CD={r['CD']:.6f} F={r['F-Score']:.4f}")


def cmd_eval(cfg, args):
    changes = {}
    if args.split:
        changes["eval.split"] = args.split
    if args.oracle:
        changes["eval.oracle"] = True
    if changes:
        cfg = override(cfg, changes)
    _print(harness.evaluate(cfg, args.checkpoint))


def cmd_report(cfg, args):
    labels = args.labels.split(",") if args.labels else None
    _print(harness.report(args.ledgers, args.out or cfg.out_dir, labels))


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic corpus"),
    "train-pretext": (cmd_train_pretext, "train the shape-classification extractor"),
    "fit-prototypes": (cmd_fit_prototypes, "fit per-category prototypes with EM"),
    "train": (cmd_train, "train the completion network"),
    "ablate": (cmd_ablate, "run the A-H ablation grid"),
    "eval": (cmd_eval, "score a trained model on a split"),
    "report": (cmd_report, "merge run ledgers into plot-ready files"),
}


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config; missing keys take defaults")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("--data", help="corpus directory (overrides data_root)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted config override, e.g. loss.use_proj=false")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded, fixed-order execution")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="protoshape", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "train-pretext":
            p.add_argument("--resume", action="store_true", help="continue from the resume checkpoint")
            p.add_argument("--stop-after", type=int, help="stop after this many epochs")
        elif name == "ablate":
            p.add_argument("--methods", help="comma-separated subset of A-H")
            p.add_argument("--seeds", help="comma-separated seeds (default: --seed)")
        elif name == "eval":
            p.add_argument("--checkpoint", help="model checkpoint (default: the run's model)")
            p.add_argument("--split", choices=("train", "val", "test"))
            p.add_argument("--oracle", action="store_true", help="score the ground truth against itself")
        elif name == "report":
            p.add_argument("ledgers", nargs="+", help="ledger.jsonl files")
            p.add_argument("--labels", help="comma-separated run labels")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
        # one BLAS thread and one worker give a fixed execution order
        limit = threadpool_limits(1) if args.deterministic else nullcontext()
        with limit:
            COMMANDS[args.command][0](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except harness.NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, KeyError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
