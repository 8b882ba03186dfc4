from __future__ import annotations

import argparse
import logging
import logging.config

from . import settings
from .exceptions import DivergenceError, DlabError

logger = logging.getLogger("dlab.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY_FAILED = 2
EXIT_DIVERGED = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="manage.py", description="Disentanglement lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model from a key=value config")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("eval", help="score a checkpoint with the six metrics and the ST gap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--points", type=int)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("select", help="pick the run with the smallest ST gap")
    p.add_argument("--out", required=True, help="sweep directory")
    p.add_argument("--by", default="st_gap", choices=["st_gap", "sup_val"])

    p = sub.add_parser("plot-latent", help="SVG scatter of a 2-D latent space")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--out")

    p = sub.add_parser("traverse", help="PNG of decoded latent traversals")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("verify", help="Monte-Carlo checks of the latent propositions")
    p.add_argument("props", nargs="*", help="any of p1a p1b p2")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional CSV for the result table")

    p = sub.add_parser("correlate", help="Spearman correlation of ST gap with a metric")
    p.add_argument("--out", required=True, help="sweep directory")
    p.add_argument("--metric", default="mig")

    p = sub.add_parser("gen-data", help="write a DLAB-DS dataset file")
    p.add_argument("--dataset", required=True, help="e.g. gridworld:x=4,y=4,shape=2")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("sweep", help="run a desk-scale experiment preset")
    p.add_argument("--preset", default="circles-sweep")
    p.add_argument("--out")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--steps", type=int)
    p.add_argument("--workers", type=int)
    return parser


def run(args) -> int:
    from . import experiments as ex

    if args.command == "train":
        print(ex.cmd_train(args.config, out=args.out, seed=args.seed))
    elif args.command == "eval":
        row = ex.cmd_eval(args.checkpoint, args.dataset, points=args.points, seed=args.seed)
        print(",".join(f"{k}={v}" for k, v in row.items() if v is not None))
    elif args.command == "select":
        best = ex.cmd_select(args.out, by=args.by)
        print(f"{best['checkpoint']}\t{best['reason']}")
    elif args.command == "plot-latent":
        print(ex.cmd_plot_latent(args.checkpoint, args.dataset, args.out))
    elif args.command == "traverse":
        print(ex.cmd_traverse(args.checkpoint, args.dataset, args.out, steps=args.steps, seed=args.seed))
    elif args.command == "verify":
        table, ok = ex.cmd_verify(args.props, trials=args.trials, seed=args.seed)
        if args.out:
            table.to_csv(args.out, index=False)
        if len(table):
            print(table.to_string(index=False))
        return EXIT_OK if ok else EXIT_VERIFY_FAILED
    elif args.command == "correlate":
        rho, path = ex.cmd_correlate(args.out, args.metric)
        print(f"spearman={rho:.4f}\t{path}")
    elif args.command == "gen-data":
        print(ex.cmd_gen_data(args.dataset, args.count, args.out, seed=args.seed))
    elif args.command == "sweep":
        summary = ex.cmd_sweep(args.preset, args.out, workers=args.workers, seeds=args.seeds, steps=args.steps)
        for k, v in summary.items():
            print(f"{k}\t{v}")
    return EXIT_OK


def main(argv=None) -> int:
    logging.config.dictConfig(settings.LOGGING)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return run(args)
    except DivergenceError as exc:
        logger.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except (DlabError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
