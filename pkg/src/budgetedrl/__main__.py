import argparse
import json
import logging
import sys
from pathlib import Path

import baodebug

import budgetedrl
from budgetedrl.solvers.errors import BudgetedRLError
from budgetedrl.utils.files import run_dir

logger = logging.getLogger("budgetedrl")


def parse_seeds(text: str) -> range:
    """`a..b` (inclusive) or a single integer."""
    if ".." in text:
        a, b = text.split("..", 1)
        return range(int(a), int(b) + 1)
    return range(int(text), int(text) + 1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="budgetedrl", description="Budgeted reinforcement learning experiments.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="experiment YAML/JSON file, on top of cfg/default.yaml.")
    common.add_argument("--seed", type=int, default=None, help="master seed.")
    common.add_argument("--workers", type=int, default=None, help="worker processes.")
    common.add_argument("--out", type=str, default=None, help="output directory.")
    common.add_argument("--log-level", type=str, default="info", choices=["debug", "info", "warning", "error"])

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve-bvi", parents=[common], help="Budgeted Value Iteration on a finite BMDP.")
    sub.add_parser("explore", parents=[common], help="collect a batch of transitions.")
    for name in ("train-bftq", "train-ftq-lambda"):
        p = sub.add_parser(name, parents=[common], help=f"{name[6:]} training on a batch file.")
        p.add_argument("--batch", type=str, required=True, help="batch.bin written by 'explore'.")
    p = sub.add_parser("evaluate", parents=[common], help="evaluate a saved Q-function over beta_eval_grid.")
    p.add_argument("--model", type=str, required=True, help="bftq_q.bin or bvi_q.bin.")
    p.add_argument("--algorithm", type=str, default="bftq", choices=["bftq", "bvi"])
    p.add_argument("--debug-frontiers", action="store_true", help="dump every decision's hull frontier to <out>/baodebug.")
    p = sub.add_parser("run", parents=[common], help="full pipeline over seeds, writes tradeoff.csv.")
    p.add_argument("--seeds", type=str, default=None, help="seed range a..b; sets the number of seeds to b - a + 1.")
    p = sub.add_parser("witness-noncontraction", parents=[common], help="non-contraction ratio of the optimality operator.")
    p.add_argument("--epsilon", type=float, nargs="+", default=[1.0, 0.1, 0.01])
    p.add_argument("--gamma", type=float, nargs="+", default=[0.5, 0.9])
    return parser


def run_command(args) -> None:
    if args.command == "witness-noncontraction":
        frame = budgetedrl.witness_noncontraction(args.epsilon, args.gamma, args.out)
        print(frame.to_string(index=False))
        return

    overrides = {"seed": args.seed, "workers": args.workers, "out": args.out}
    seeds = parse_seeds(args.seeds) if getattr(args, "seeds", None) else None
    if seeds is not None:
        overrides.update(seed=seeds.start if args.seed is None else args.seed, n_seeds=len(seeds))
    cfg = budgetedrl.load_experiment_config(args.config, **overrides)
    out = Path(cfg.out) if args.out else run_dir(cfg.out, args.command, cfg.seed)
    cfg.out = str(out)
    args.resolved_out = out
    baodebug.debugutils.SetDebugPath(str(out / "baodebug/"))
    budgetedrl.save_resolved_config(cfg, out)

    if args.command == "solve-bvi":
        budgetedrl.solve_bvi(cfg, out)
    elif args.command == "explore":
        budgetedrl.explore(cfg, cfg.seed, out)
    elif args.command == "train-bftq":
        budgetedrl.train_bftq(cfg, args.batch, out, cfg.seed)
    elif args.command == "train-ftq-lambda":
        budgetedrl.train_ftq_lambda(cfg, args.batch, out, cfg.seed)
    elif args.command == "evaluate":
        debug_dir = out / "baodebug" if args.debug_frontiers else None
        budgetedrl.evaluate(cfg, args.model, out, cfg.seed, args.algorithm, debug_dir)
    elif args.command == "run":
        budgetedrl.run_experiment(cfg, out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    baodebug.debugutils.ConfigureRootLogger(args.log_level)
    try:
        run_command(args)
    except (BudgetedRLError, FileNotFoundError) as e:
        out = getattr(args, "resolved_out", None) or Path(args.out or ".")
        out.mkdir(parents=True, exist_ok=True)
        logger.error(f"{args.command} failed: {e}")
        error = {"stage": getattr(e, "stage", None) or args.command, "type": type(e).__name__, "message": str(e)}
        with open(out / "error.json", "w", encoding="utf-8") as f:
            json.dump(error, f, indent=2)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
