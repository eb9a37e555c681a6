"""Command line entry point: ``inflrobust <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from inflrobust import harness
from inflrobust.checkpoint import CheckpointError
from inflrobust.datagen import DatasetFormatError
from inflrobust.influence import LissaDivergence


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="inflrobust", description="Influence-based robust training toolkit.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a noisy phantom dataset (PHTM1)")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one method; writes checkpoint and metrics")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    t.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint of the same config")
    t.add_argument("--stop-after", type=int, metavar="EPOCH", help="stop once this epoch is finished")

    i = sub.add_parser("influence", help="influence scores (and perturbation maps) of the training set")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--maps", action="store_true", help="also write per-sample perturbation maps")

    e = sub.add_parser("eval", help="accuracy on clean, noisy and combined test partitions")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="also write the table as JSON here")

    m = sub.add_parser("matrix", help="all configs in a directory over several seeds; Table-1 layout CSV")
    m.add_argument("--configs", required=True)
    m.add_argument("--seeds", type=int, default=5)
    m.add_argument("--out", required=True)
    return p


def run(args: argparse.Namespace) -> None:
    if args.command == "generate":
        cfg = harness.load_config(args.config)
        path = harness.cmd_generate(cfg, args.out)
        print(f"wrote {path}")
    elif args.command == "train":
        cfg = harness.load_config(args.config)
        rec = harness.cmd_train(cfg, args.data, args.out, force=args.force, resume=args.resume,
                                stop_after=args.stop_after)
        f = rec["final"]
        print(f"{rec['method']} seed {rec['seed']} epoch {rec['epochs_completed']}: "
              f"val {f['val']:.2f}  test {f['test']:.2f}  [{rec['config_hash']}]")
    elif args.command == "influence":
        doc = harness.cmd_influence(args.checkpoint, args.data, args.out, maps=args.maps)
        print(f"{doc['n_train']} scores, LiSSA residual {doc['residual']:.4f} -> {args.out}")
    elif args.command == "eval":
        res = harness.cmd_eval(args.checkpoint, args.data, args.out)
        print(harness.format_eval(res))
    elif args.command == "matrix":
        configs = harness.load_matrix_configs(args.configs)
        out = harness.run_matrix(configs, args.seeds, args.out)
        with open(args.out) as fh:
            sys.stdout.write(fh.read())
        print(f"{len(out['runs'])} runs in {out['wall']:.0f}s")


_EXPECTED = (harness.ConfigError, harness.OutputExists, DatasetFormatError, CheckpointError,
             LissaDivergence, FileNotFoundError, ValueError)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except _EXPECTED as exc:
        err = {"error": type(exc).__name__, "command": args.command, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
