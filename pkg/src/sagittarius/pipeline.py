"""End-to-end experiment steps shared by the CLI and the test-suite."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

from sagittarius import checkpoint
from sagittarius.config import ExperimentConfig, dump_config
from sagittarius.data import (
    BipartiteGraph,
    DatasetSplit,
    IdIndex,
    InteractionRecord,
    build_graph,
    read_interactions,
    split_dataset,
)
from sagittarius.evaluation import MetricsReport, evaluate
from sagittarius.training import EpochRecord, TrainState, fit

log = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.bin"
HISTORY_FILE = "loss_history.csv"
RESOLVED_CONFIG_FILE = "config.resolved.ini"
HISTORY_HEADER = "epoch, l1, l2, l3, total, val_urecall@10"

ABLATIONS = {
    "full": {},
    "-CTR": {"disable_ctr": True},
    "-Sequence": {"disable_seq": True},
    "-BPR": {"disable_bpr": True},
    "-Behavior": {"disable_behavior_weighting": True},
}


def mf_baseline(cfg: ExperimentConfig) -> ExperimentConfig:
    """Same pipeline with no convolution layers and only the ranking loss."""
    return cfg.replace(
        hyper=cfg.hyper.replace(n_layers=0),
        disable_ctr=True,
        disable_seq=True,
        output_dir=os.path.join(cfg.output_dir, "mf_baseline"),
    )


@dataclass
class Prepared:
    records: list[InteractionRecord]
    split: DatasetSplit
    graph: BipartiteGraph


def prepare(cfg: ExperimentConfig) -> Prepared:
    """Load records, split them and build the training graph.

    The graph's indexes cover every user/item in the log (first-appearance
    order over the whole file); only training records contribute edges.
    """
    if not cfg.data_path:
        raise FileNotFoundError("config has no data.path")
    records = read_interactions(cfg.data_path, cfg.data_format, cfg.score_map())
    split = split_dataset(records, cfg.split, cfg.split_seed)
    users, items = IdIndex(), IdIndex()
    for rec in records:
        users.add(rec.user_id)
        items.add(rec.item_id)
    graph = build_graph(split.train, users, items)
    if cfg.disable_behavior_weighting:
        graph = graph.with_unit_weights()
    return Prepared(records, split, graph)


def train(cfg: ExperimentConfig, prepared: Prepared | None = None, write: bool = True) -> tuple[checkpoint.Checkpoint, TrainState]:
    prepared = prepared if prepared is not None else prepare(cfg)
    hyper = cfg.effective_hyper()
    callbacks = []
    if write:
        os.makedirs(cfg.output_dir, exist_ok=True)
        hist_path = os.path.join(cfg.output_dir, HISTORY_FILE)
        with open(hist_path, "w", encoding="utf-8") as fh:
            fh.write(HISTORY_HEADER + "\n")

        def append_history(record: EpochRecord, state: TrainState) -> None:
            with open(hist_path, "a", encoding="utf-8") as fh:
                fh.write(record.line() + "\n")

        callbacks.append(append_history)
        with open(os.path.join(cfg.output_dir, RESOLVED_CONFIG_FILE), "w", encoding="utf-8") as fh:
            fh.write(dump_config(cfg))

    state = fit(prepared.graph, prepared.split, hyper, callbacks)
    ckpt = checkpoint.Checkpoint(
        hyper,
        prepared.graph,
        state.best_params,
        {
            "best_epoch": state.best_epoch,
            "best_val_urecall": state.best_val,
            "epochs_run": len(state.history),
            "behavior_weighting": not cfg.disable_behavior_weighting,
        },
    )
    if write:
        checkpoint.save(ckpt, os.path.join(cfg.output_dir, CHECKPOINT_FILE))
    return ckpt, state


def evaluate_checkpoint(
    ckpt: checkpoint.Checkpoint, cfg: ExperimentConfig, prepared: Prepared | None = None
) -> list[MetricsReport]:
    prepared = prepared if prepared is not None else prepare(cfg)
    return [evaluate(ckpt.graph, ckpt.params, prepared.split.test, k, ckpt.hyper) for k in cfg.k_list]


def write_reports(reports: list[MetricsReport], out_dir: str, prefix: str = "metrics") -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for rep in reports:
        base = os.path.join(out_dir, f"{prefix}@{rep.k}")
        with open(base + ".txt", "w", encoding="utf-8") as fh:
            fh.write("k, recall, urecall, ndcg, n_users\n" + rep.line() + "\n")
        with open(base + ".json", "w", encoding="utf-8") as fh:
            fh.write(rep.to_json() + "\n")
        paths += [base + ".txt", base + ".json"]
    return paths


def run_ablation(cfg: ExperimentConfig, variants=None) -> dict[str, list[MetricsReport]]:
    """Retrain every variant from the same split and seed and evaluate on test."""
    variants = variants or list(ABLATIONS)
    base = prepare(cfg.replace(disable_behavior_weighting=False))
    results = {}
    for name in variants:
        vcfg = cfg.replace(**ABLATIONS[name], output_dir=os.path.join(cfg.output_dir, "ablation", name.strip("-")))
        prepared = base
        if vcfg.disable_behavior_weighting:
            prepared = Prepared(base.records, base.split, base.graph.with_unit_weights())
        ckpt, _ = train(vcfg, prepared, write=False)
        results[name] = evaluate_checkpoint(ckpt, vcfg, prepared)
        log.info("%s: %s", name, results[name][0].line())
    return results


def format_ablation(results: dict[str, list[MetricsReport]]) -> str:
    lines = ["variant\tk\trecall\turecall\tndcg\tn_users"]
    for name, reports in results.items():
        for r in reports:
            lines.append(f"{name}\t{r.k}\t{r.recall:.6f}\t{r.urecall:.6f}\t{r.ndcg:.6f}\t{r.n_users_evaluated}")
    return "\n".join(lines) + "\n"


SWEEP_VALUES = (0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3)


def run_lambda_sweep(cfg: ExperimentConfig, values=SWEEP_VALUES, which=(1, 2, 3)) -> dict[int, list[tuple[float, MetricsReport]]]:
    """Vary one loss weight at a time, holding the other two at 1."""
    prepared = prepare(cfg)
    curves: dict[int, list[tuple[float, MetricsReport]]] = {}
    for i in which:
        curve = []
        for value in values:
            lams = {"lambda1": 1.0, "lambda2": 1.0, "lambda3": 1.0, f"lambda{i}": float(value)}
            vcfg = cfg.replace(hyper=cfg.hyper.replace(**lams))
            ckpt, _ = train(vcfg, prepared, write=False)
            curve.append((float(value), evaluate_checkpoint(ckpt, vcfg, prepared)[0]))
        curves[i] = curve
    return curves


def write_sweep(curves, out_dir: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, curve in curves.items():
        path = os.path.join(out_dir, f"sweep_lambda{i}.tsv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("lambda\tk\trecall\turecall\tndcg\n")
            for value, r in curve:
                fh.write(f"{value:.1f}\t{r.k}\t{r.recall:.6f}\t{r.urecall:.6f}\t{r.ndcg:.6f}\n")
        paths.append(path)
    return paths
