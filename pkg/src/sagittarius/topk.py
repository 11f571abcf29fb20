"""Batch top-k generation for every user with a local worker pool.

Item embeddings and ``Q1`` are projected once and shared read-only by all
workers (the broadcast step); users are mapped in contiguous blocks and the
per-block buffers are concatenated in user order.
"""

from __future__ import annotations

import contextlib
import csv
import gzip
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from sagittarius.data import BipartiteGraph
from sagittarius.evaluation import item_projection, top_k_from_scores, user_scores

CSV_HEADER = ["user_id", "rank", "item_id", "score"]


@dataclass
class RecommendationRow:
    user_id: str
    items: list[str]
    scores: list[float]


@dataclass
class RecommendationBatch:
    k: int
    rows: list[RecommendationRow]


def _recommend_block(users, z_u, item_proj, seen_sets, k):
    out = []
    for u in users:
        scores = user_scores(z_u[u], item_proj)
        top = top_k_from_scores(scores, seen_sets[u], k)
        out.append((top, scores[top]))
    return out


def generate_topk(
    z_u: np.ndarray,
    z_v: np.ndarray,
    Q1: np.ndarray,
    seen_sets: Sequence[np.ndarray],
    k: int,
    n_workers: int = 1,
    user_keys: Sequence[str] | None = None,
    item_keys: Sequence[str] | None = None,
    block_size: int = 256,
) -> RecommendationBatch:
    """Top-``k`` unseen items per user, identical for any ``n_workers``.

    Each user's scores come from the same matrix-vector product regardless
    of how users are partitioned, so worker count cannot change results.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    n_users = z_u.shape[0]
    user_keys = user_keys if user_keys is not None else [str(u) for u in range(n_users)]
    item_keys = item_keys if item_keys is not None else [str(v) for v in range(z_v.shape[0])]
    item_proj = item_projection(z_v, Q1)
    blocks = [range(lo, min(lo + block_size, n_users)) for lo in range(0, n_users, block_size)]
    if n_workers == 1:
        results = [_recommend_block(b, z_u, item_proj, seen_sets, k) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(lambda b: _recommend_block(b, z_u, item_proj, seen_sets, k), blocks))
    rows = []
    for block, res in zip(blocks, results):
        for u, (top, scores) in zip(block, res):
            rows.append(RecommendationRow(user_keys[u], [item_keys[i] for i in top], scores.tolist()))
    return RecommendationBatch(k, rows)


def recommend_for_graph(z_u, z_v, Q1, graph: BipartiteGraph, k: int, n_workers: int = 1) -> RecommendationBatch:
    return generate_topk(
        z_u, z_v, Q1, graph.seen_sets(), k, n_workers, graph.user_index.keys, graph.item_index.keys
    )


@contextlib.contextmanager
def _open_sink(path: str):
    if not path.endswith(".gz"):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            yield fh
        return
    # no embedded name or mtime, so identical batches give identical bytes
    with open(path, "wb") as raw, gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as gz:
        with io.TextIOWrapper(gz, encoding="utf-8", newline="") as fh:
            yield fh


def write_recommendations(batch: RecommendationBatch, sink) -> None:
    """Write ``user_id,rank,item_id,score`` CSV to a path or text stream."""
    if isinstance(sink, (str, os.PathLike)):
        path = os.fspath(sink)
        try:
            with _open_sink(path) as fh:
                write_recommendations(batch, fh)
        except OSError as exc:
            raise OSError(f"cannot write recommendations to {path}: {exc}") from exc
        return
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in batch.rows:
        for rank, (item, score) in enumerate(zip(row.items, row.scores), start=1):
            writer.writerow([row.user_id, rank, item, f"{score:.6f}"])


def read_recommendations(source) -> RecommendationBatch:
    if isinstance(source, (str, os.PathLike)):
        path = os.fspath(source)
        opener = gzip.open if path.endswith(".gz") else open
        with opener(path, "rt", encoding="utf-8", newline="") as fh:
            return read_recommendations(fh)
    reader = csv.reader(source)
    header = next(reader, None)
    if header != CSV_HEADER:
        raise ValueError(f"unexpected header {header}")
    rows: list[RecommendationRow] = []
    k = 0
    for user, rank, item, score in reader:
        if not rows or rows[-1].user_id != user:
            rows.append(RecommendationRow(user, [], []))
        rows[-1].items.append(item)
        rows[-1].scores.append(float(score))
        k = max(k, int(rank))
    return RecommendationBatch(k, rows)
