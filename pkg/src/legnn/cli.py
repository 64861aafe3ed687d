"""Command-line entry point: ``legnn <command> ...``.

Failures print one line ``error: <code>: <message>`` to stderr and exit with
a nonzero status specific to the error class.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import experiments
from .errors import CapacityError, FormatError, LegnnError, TrainingAborted, UsageError
from .graph import compute_homophily, generate_synthetic, load_dataset, save_dataset

EXIT_CODES = {
    UsageError: 2,
    FormatError: 3,
    CapacityError: 4,
    TrainingAborted: 5,
}


def _parse_s_values(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"s-values: expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 0:
        raise UsageError("s-values: need at least one non-negative integer")
    return values


def cmd_train(args) -> dict:
    config = experiments.ExperimentConfig.load(args.config)
    res = experiments.run_experiment(config)
    return {"output_dir": str(config.resolved_output_dir()), **res.aggregate}


def cmd_sweep(args) -> dict:
    config = experiments.ExperimentConfig.load(args.config)
    methods = [m for m in args.methods.split(",") if m]
    res = experiments.run_synthetic_sweep(config, _parse_s_values(args.s_values), methods)
    return {"output_dir": str(config.resolved_output_dir()), "rows": res.rows}


def cmd_ablate(args) -> dict:
    config = experiments.ExperimentConfig.load(args.config)
    res = experiments.run_ablation(config, args.kind)
    return {"output_dir": str(config.resolved_output_dir()), "rows": res.rows}


def cmd_homophily(args) -> dict:
    g = load_dataset(args.dataset)
    return {"dataset": args.dataset, "homophily": compute_homophily(g)}


def cmd_gen_synthetic(args) -> dict:
    if args.s < 0:
        raise UsageError("s: must be non-negative")
    g = load_dataset(args.dataset)
    syn = generate_synthetic(g, args.s, args.seed)
    save_dataset(syn, args.out)
    return {"out": args.out, "added_edges": args.s, "homophily": compute_homophily(syn)}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: usage: {' '.join(message.split())}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="legnn", description="Label-enhanced GNN experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and evaluate over the configured seeds")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="synthetic cross-label edge sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--s-values", required=True)
    p.add_argument("--methods", default="vanilla,legnn")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="training-node-selection / confidence ablations")
    p.add_argument("--config", required=True)
    p.add_argument("--kind", required=True, choices=experiments.ABLATIONS)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("homophily", help="edge homophily of a dataset")
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_homophily)

    p = sub.add_parser("gen-synthetic", help="add S random cross-label edges")
    p.add_argument("--dataset", required=True)
    p.add_argument("--s", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synthetic)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        summary = args.func(args)
    except LegnnError as exc:
        print(f"error: {exc.code}: {_one_line(exc)}", file=sys.stderr)
        return next((c for cls, c in EXIT_CODES.items() if isinstance(exc, cls)), 1)
    except OSError as exc:
        print(f"error: io: {_one_line(exc)}", file=sys.stderr)
        return 6
    print(json.dumps(summary, default=str))
    return 0


def _one_line(exc) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
