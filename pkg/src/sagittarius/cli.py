"""Command-line entry point: ``sagittarius <command> [options]``.

Failures exit with status 1 (2 for usage errors) and print one line
``error[<category>]: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from sagittarius import checkpoint, pipeline
from sagittarius.config import ConfigError, ExperimentConfig, load_config
from sagittarius.data import DataError
from sagittarius.evaluation import EvaluationError
from sagittarius.gradcheck import check_gradients, random_instance
from sagittarius.topk import recommend_for_graph, write_recommendations
from sagittarius.training import TrainingError
from sagittarius.model import forward


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(hyper=cfg.hyper.replace(seed=args.seed))
    if getattr(args, "out", None) and args.command in ("train", "ablate", "sweep"):
        cfg = cfg.replace(output_dir=args.out)
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    ckpt, state = pipeline.train(cfg)
    print(f"best epoch {state.best_epoch} of {len(state.history)}; val URecall@{cfg.hyper.eval_k} {state.best_val:.6f}")
    print(os.path.join(cfg.output_dir, pipeline.CHECKPOINT_FILE))
    return 0


def _checkpoint_path(args, cfg: ExperimentConfig) -> str:
    return args.checkpoint or os.path.join(cfg.output_dir, pipeline.CHECKPOINT_FILE)


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    if args.k is not None:
        cfg = cfg.replace(k_list=(args.k,))
    ckpt = checkpoint.load(_checkpoint_path(args, cfg))
    reports = pipeline.evaluate_checkpoint(ckpt, cfg)
    pipeline.write_reports(reports, args.out or cfg.output_dir)
    for rep in reports:
        print(rep.line())
    return 0


def cmd_recommend(args) -> int:
    cfg = _config(args)
    ckpt = checkpoint.load(_checkpoint_path(args, cfg))
    emb = forward(ckpt.graph, ckpt.params, ckpt.hyper)
    k = args.k if args.k is not None else cfg.k_list[0]
    batch = recommend_for_graph(emb.z_u, emb.z_v, ckpt.params.Q1, ckpt.graph, k, args.workers)
    out = args.out or os.path.join(cfg.output_dir, "recommendations.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    write_recommendations(batch, out)
    print(out)
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    results = pipeline.run_ablation(cfg)
    table = pipeline.format_ablation(results)
    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(os.path.join(cfg.output_dir, "ablation.tsv"), "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    curves = pipeline.run_lambda_sweep(cfg)
    for path in pipeline.write_sweep(curves, cfg.output_dir):
        print(path)
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    n_layers = 2
    if args.config:
        n_layers = load_config(args.config).hyper.n_layers
    inst = random_instance(seed, n_users=5, n_items=5, n_edges=8, n_layers=n_layers)
    report = check_gradients(inst, corrupt=args.corrupt)
    print("tensor\tmax_rel_error\tstatus")
    for line in report.lines():
        print(line)
    if not report.ok:
        raise CliError("gradcheck", f"gradient mismatch in {report.worst.name} (rel error {report.worst.max_rel_error:.3e})")
    print("PASS")
    return 0


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "recommend": cmd_recommend,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sagittarius", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=list(COMMANDS))
    parser.add_argument("--config", metavar="PATH")
    parser.add_argument("--checkpoint", metavar="PATH")
    parser.add_argument("--k", type=int)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--out", metavar="PATH")
    parser.add_argument("--seed", type=int, help="overrides training.seed")
    parser.add_argument("--corrupt", metavar="TENSOR", help=argparse.SUPPRESS)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.k is not None and args.k < 1:
            raise CliError("usage", "--k must be >= 1")
        if args.workers < 1:
            raise CliError("usage", "--workers must be >= 1")
        return COMMANDS[args.command](args)
    except CliError as exc:
        category, message = exc.category, str(exc)
    except ConfigError as exc:
        category, message = "config", str(exc)
    except DataError as exc:
        category, message = "data", str(exc)
    except checkpoint.CheckpointError as exc:
        category, message = "checkpoint", str(exc)
    except TrainingError as exc:
        category, message = "training", str(exc)
    except EvaluationError as exc:
        category, message = "evaluation", str(exc)
    except OSError as exc:
        category, message = "io", f"{exc.strerror or exc}: {exc.filename}" if exc.filename else str(exc)
    print(f"error[{category}]: {' '.join(message.split())}", file=sys.stderr)
    return 2 if category == "usage" else 1


if __name__ == "__main__":
    sys.exit(main())
