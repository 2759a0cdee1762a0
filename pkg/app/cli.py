"""Command-line front end: data generation, training, evaluation, experiments, frontiers."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Type

import numpy as np
from pydantic import TypeAdapter, ValidationError

from app import settings
from app.baselines import make_random_tree, train_random_tree
from app.datagen import frontier_grid, generate_gaussian_dataset, load_dataset, save_dataset, save_frontier
from app.errors import MalformedFileError, RdtError
from app.experiment import load_experiment_config, run_experiment
from app.inference import evaluate_accuracy, leaf_allocation
from app.models import (
    BaseConfig,
    Box,
    DatasetSpec,
    EvalMode,
    LeafInit,
    LossName,
    SamplingMode,
    TrainConfig,
    TreeShape,
)
from app.trainer import train
from app.tree_core import build_complete_tree, init_model, load_model, parameter_norms, save_model

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_IO = 3


class UsageError(Exception):
    """Invalid command-line values; reported with exit code 1."""


class RdtArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _problems(errors: Dict[str, str], missing: List[str]) -> str:
    return "; ".join(
        [f"{name}: {message}" for name, message in errors.items()]
        + [f"{name}: required" for name in missing]
    )


def _validated(config_class: Type[BaseConfig], data: Dict[str, Any]) -> BaseConfig:
    """Validate CLI values with a config model; unset options keep the model defaults."""
    data = {key: value for key, value in data.items() if value is not None}
    instance, errors, missing = config_class.create_and_validate(data)
    if instance is None:
        raise UsageError(_problems(errors, missing))
    return instance


def cmd_gen_data(args: argparse.Namespace) -> int:
    spec = _validated(
        DatasetSpec,
        {
            "classes": args.classes,
            "per_class": args.per_class,
            "seed": args.seed,
            "sigma_range": args.sigma_range,
            "mean_bounds": args.mean_bounds,
        },
    )
    train_set, test_set = generate_gaussian_dataset(
        spec.classes, spec.per_class, spec.seed, spec.mean_bounds, spec.sigma_range
    )
    out_dir = Path(args.out)
    save_dataset(train_set, out_dir / "train.csv")
    save_dataset(test_set, out_dir / "test.csv")
    print(
        f"Wrote {len(train_set)} train and {len(test_set)} test examples "
        f"({spec.classes} classes, seed {spec.seed}) to {out_dir}"
    )
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    shape = _validated(TreeShape, {"width": args.width, "depth": args.depth})
    cfg = _validated(
        TrainConfig,
        {
            "learning_rate": args.lr,
            "epochs": args.epochs,
            "loss": args.loss,
            "seed": args.seed,
            "trajectories_per_example": args.trajectories,
            "baseline_enabled": args.baseline,
            "sampling": args.sampling,
            "log_every": args.log_every,
        },
    )
    if args.init_scale <= 0:
        raise UsageError(f"--init-scale must be positive. Got: {args.init_scale}")

    train_set = load_dataset(args.data)
    eval_set = load_dataset(args.eval_data) if args.eval_data else None
    topology = build_complete_tree(shape.width, shape.depth)
    if args.random_tree:
        model = make_random_tree(topology, train_set.input_dim, train_set.num_classes, args.init_scale, cfg.seed)
        log = train_random_tree(model, train_set, cfg, eval_set)
    else:
        model = init_model(
            topology, train_set.input_dim, train_set.num_classes, args.init_scale, cfg.seed, LeafInit(args.leaf_init)
        )
        log = train(model, train_set, cfg, eval_set)

    out = Path(args.out)
    save_model(model, out)
    log_path = out.with_suffix(".log.csv")
    log.save_csv(log_path)
    summary = f"Trained W={shape.width} D={shape.depth} for {log.epochs} epochs: train_acc={log.train_accuracy[-1]:.4f}"
    if eval_set is not None:
        summary += f" test_acc={log.test_accuracy[-1]:.4f}"
    print(summary)
    print(f"Model written to {out}, log to {log_path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    if args.samples < 1:
        raise UsageError(f"--samples must be >= 1. Got: {args.samples}")
    model = load_model(args.model)
    dataset = load_dataset(args.data)
    mode = EvalMode(args.mode)
    rng = np.random.default_rng(args.seed) if mode is EvalMode.STOCHASTIC else None
    result = evaluate_accuracy(model, dataset, mode, rng, args.samples)
    print(f"accuracy {result.accuracy:.6f}")
    if mode is EvalMode.STOCHASTIC:
        print(f"standard_error {result.standard_error:.6f}")
    return EXIT_OK


def cmd_experiment(args: argparse.Namespace) -> int:
    if args.workers is not None and args.workers < 1:
        raise UsageError(f"--workers must be >= 1. Got: {args.workers}")
    try:
        config, errors, missing = load_experiment_config(args.config)
    except json.JSONDecodeError as e:
        raise MalformedFileError(e.msg, path=args.config, line=e.lineno)
    if config is None:
        raise UsageError(f"{args.config}: {_problems(errors, missing)}")

    out = Path(args.out)
    report = run_experiment(config, workers=args.workers, partial_path=f"{out}.partial")
    table_path = report.write(out)
    print(report.render_table(), end="")
    print(f"Report written to {out}, table to {table_path}")
    failed = sum(not run.ok for run in report.runs)
    if failed:
        print(f"{failed} run(s) failed; see the report for details", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_frontier(args: argparse.Namespace) -> int:
    try:
        bounds = TypeAdapter(Box).validate_python(args.bounds)
    except ValidationError as e:
        raise UsageError(f"--bounds: {e.errors()[0]['msg']}")
    if args.resolution < 2:
        raise UsageError(f"--resolution must be >= 2. Got: {args.resolution}")
    model = load_model(args.model)
    grid = frontier_grid(model, bounds, args.resolution)
    save_frontier(grid, args.out)
    print(f"Wrote {len(grid.points)} frontier points to {args.out}")
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    topo = model.topology
    theta_norm, alpha_norm = parameter_norms(model)
    allocation = leaf_allocation(model)
    print(f"W={topo.width} D={topo.depth} L={topo.leaf_count} nodes={topo.node_count}")
    print(f"input_dim={model.input_dim} num_classes={model.num_classes} alpha_frozen={str(model.alpha_frozen).lower()}")
    print(f"theta_norm={theta_norm:.6f} alpha_norm={alpha_norm:.6f}")
    print(
        f"covered_classes={len(allocation.covered_classes)}/{model.num_classes} "
        f"coverage={allocation.coverage:.4f}"
    )
    for leaf in topo.leaves:
        print(f"leaf {leaf} -> class {allocation.leaf_classes[leaf]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = RdtArgumentParser(prog="rdt", description=__doc__)
    parser.add_argument(
        "--log-level",
        default=settings.LOG_LEVEL,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        type=str.upper,
    )
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="Generate a Gaussian-cluster train/test pair")
    gen.add_argument("--classes", type=int, default=16)
    gen.add_argument("--per-class", type=int, default=100)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--sigma-range", help="low,high (default 0.05,0.15)")
    gen.add_argument("--mean-bounds", help="x0_min,x1_min,x0_max,x1_max (default -1,-1,1,1)")
    gen.add_argument("--out", required=True, help="Directory receiving train.csv and test.csv")
    gen.set_defaults(handler=cmd_gen_data)

    tr = commands.add_parser("train", help="Train an RDT or a Random Tree")
    tr.add_argument("--data", required=True)
    tr.add_argument("--eval-data")
    tr.add_argument("--width", type=int, required=True)
    tr.add_argument("--depth", type=int, required=True)
    tr.add_argument("--random-tree", action="store_true")
    tr.add_argument("--lr", type=float)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--loss", choices=[loss.value for loss in LossName])
    tr.add_argument("--seed", type=int)
    tr.add_argument("--trajectories", type=int, help="Sampled trajectories per example (M)")
    tr.add_argument("--baseline", action="store_true", default=None, help="Subtract the running mean loss")
    tr.add_argument("--sampling", choices=[mode.value for mode in SamplingMode])
    tr.add_argument("--log-every", type=int)
    tr.add_argument("--init-scale", type=float, default=settings.INIT_SCALE)
    tr.add_argument(
        "--leaf-init",
        choices=[mode.value for mode in LeafInit],
        default=LeafInit.UNIFORM.value,
        help="Centre of the random leaf scores",
    )
    tr.add_argument("--out", required=True, help="Model file; the log goes next to it as .log.csv")
    tr.set_defaults(handler=cmd_train)

    ev = commands.add_parser("eval", help="Accuracy of a model on a dataset")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--mode", choices=[mode.value for mode in EvalMode], default=EvalMode.GREEDY.value)
    ev.add_argument("--samples", type=int, default=1)
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(handler=cmd_eval)

    ex = commands.add_parser("experiment", help="Reproduce an accuracy table from a config file")
    ex.add_argument("--config", required=True)
    ex.add_argument("--out", required=True, help="JSON Lines report; the table goes next to it as .md")
    ex.add_argument("--workers", type=int)
    ex.set_defaults(handler=cmd_experiment)

    fr = commands.add_parser("frontier", help="Export greedy predictions on a 2D lattice")
    fr.add_argument("--model", required=True)
    fr.add_argument("--bounds", default=settings.DEFAULT_BOUNDS, help="x0_min,x1_min,x0_max,x1_max")
    fr.add_argument("--resolution", type=int, default=200)
    fr.add_argument("--out", required=True)
    fr.set_defaults(handler=cmd_frontier)

    ins = commands.add_parser("inspect", help="Print topology, norms and leaf allocation of a model")
    ins.add_argument("--model", required=True)
    ins.set_defaults(handler=cmd_inspect)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(
        level=args.log_level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        return args.handler(args)
    except UsageError as e:
        print(f"rdt {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, MalformedFileError) as e:
        print(f"rdt {args.command}: {e}", file=sys.stderr)
        return EXIT_IO
    except RdtError as e:
        print(f"rdt {args.command}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
