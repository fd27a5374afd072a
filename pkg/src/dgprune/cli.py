"""Command line entry point: ``dgprune <subcommand> [--config FILE] [--seed N] [--out PATH]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .domains import save_dataset
from .exceptions import DGPruneError
from .harness import (
    dataset_for,
    derive_seed,
    evaluate,
    prepare,
    pretrained_model,
    report,
    run_paired,
)
from .nn import load_checkpoint, save_checkpoint
from .pruning import CRITERIA, prune_finetune_loop


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "data", None):
        cfg = cfg.replace(dataset_path=str(args.data))
    if getattr(args, "held_out", None) is not None:
        cfg = cfg.replace(held_out_domain=args.held_out)
    if args.seed is not None:
        cfg = cfg.replace(seeds=(args.seed,))
    return cfg


def _emit(obj) -> None:
    print(json.dumps(obj))


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    out = Path(args.out or "data.dgpd")
    path = save_dataset(dataset_for(cfg.replace(dataset_path=None), cfg.seeds[0]), out)
    _emit({"dataset": str(path), "seed": cfg.seeds[0]})


def cmd_pretrain(args) -> None:
    cfg = _config(args)
    seed = cfg.seeds[0]
    dataset, plan = prepare(cfg, seed)
    out = Path(args.out or "pretrained.pldg")
    out.parent.mkdir(parents=True, exist_ok=True)
    model = pretrained_model(cfg, seed, dataset, plan, log_path=out.with_suffix(".jsonl"))
    save_checkpoint(model, out)
    intra, cross = evaluate(model, dataset, plan)
    _emit({"checkpoint": str(out), "seed": seed, "intra": intra, "cross": cross})


def cmd_prune(args) -> None:
    cfg = _config(args)
    seed = cfg.seeds[0]
    pr = cfg.pruning
    criterion = args.criterion or pr.criterion
    dataset, plan = prepare(cfg, seed)
    out = Path(args.out or "pruned.pldg")
    out.parent.mkdir(parents=True, exist_ok=True)
    rec = prune_finetune_loop(load_checkpoint(args.checkpoint), dataset, plan, pr.schedule, criterion, pr.ior,
                              epochs=pr.finetune_epochs, seed=derive_seed(seed, "prune"),
                              batch_size=pr.batch_size, learning_rate=pr.learning_rate, momentum=pr.momentum,
                              log_path=out.with_suffix(".jsonl"))
    save_checkpoint(rec.best_model, out)
    rec.table.to_csv(out.with_suffix(".importance.csv"))
    intra, cross = evaluate(rec.best_model, dataset, plan)
    _emit({"checkpoint": str(out), "criterion": criterion, "seed": seed, "intra": intra, "cross": cross,
           "remaining_ratio": rec.best_model.remaining_ratio, "best_epoch": rec.best_epoch})


def cmd_eval(args) -> None:
    cfg = _config(args)
    seed = cfg.seeds[0]
    dataset, plan = prepare(cfg, seed)
    model = load_checkpoint(args.checkpoint)
    intra, cross = evaluate(model, dataset, plan)
    _emit({"checkpoint": str(args.checkpoint), "seed": seed, "intra": intra, "cross": cross,
           "remaining_ratio": model.remaining_ratio})


def cmd_experiment(args) -> None:
    cfg = _config(args)
    if args.out:
        cfg = cfg.replace(output_dir=str(args.out))
    criteria = args.criteria.split(",") if args.criteria else [cfg.pruning.criterion]
    docs = run_paired(cfg, criteria, cache_dir=args.cache)
    root = Path(cfg.output_dir)
    for c, doc in docs.items():
        path = root / c / "results.json" if len(criteria) > 1 else root / "results.json"
        _emit({"criterion": c, "results": str(path), "aggregate": doc["aggregate"],
               "failed_seeds": [f["seed"] for f in doc["failures"]]})


def cmd_report(args) -> None:
    rep = report(args.results)
    md = rep.to_markdown()
    if args.out:
        prefix = Path(args.out)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        prefix.with_suffix(".csv").write_text(rep.to_csv())
        prefix.with_suffix(".md").write_text(md)
    sys.stdout.write(md)


def build_parser() -> argparse.ArgumentParser:
    def global_flags(default):
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--config", type=Path, default=default, help="YAML or JSON experiment config")
        g.add_argument("--seed", type=int, default=default, help="run a single seed instead of the config's list")
        g.add_argument("--out", type=Path, default=default, help="output file or directory")
        g.add_argument("-v", "--verbose", action="store_true", default=default or False)
        return g

    # flags may come before or after the subcommand; the subcommand copy only
    # sets attributes that were actually given
    common = global_flags(argparse.SUPPRESS)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", type=Path, help="DGPD dataset file (default: generate from config)")
    data.add_argument("--held-out", type=int, dest="held_out", help="held-out domain index")

    parser = argparse.ArgumentParser(prog="dgprune", parents=[global_flags(None)],
                                     description="Filter pruning under domain shift.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic DGPD dataset")
    p.set_defaults(func=cmd_gen_data)
    p = sub.add_parser("pretrain", parents=[common, data], help="pretrain and save the best-validation checkpoint")
    p.set_defaults(func=cmd_pretrain)
    p = sub.add_parser("prune", parents=[common, data], help="prune a checkpoint while finetuning")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--criterion", choices=CRITERIA)
    p.set_defaults(func=cmd_prune)
    p = sub.add_parser("eval", parents=[common, data], help="intra/cross accuracy of a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("experiment", parents=[common, data], help="full multi-seed run")
    p.add_argument("--criteria", help="comma-separated criteria sharing pretrained checkpoints")
    p.add_argument("--cache", type=Path, help="directory for reusable pretrained checkpoints")
    p.set_defaults(func=cmd_experiment)
    p = sub.add_parser("report", parents=[common], help="CSV and Markdown tables from results files")
    p.add_argument("results", nargs="+", type=Path)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (DGPruneError, OSError) as err:
        print(json.dumps({"error": type(err).__name__, "message": str(err), "command": args.command}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
