"""Offline ranking metrics: Recall@K, URecall@K (Hit@K) and NDCG@K."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from sagittarius.data import BipartiteGraph, InteractionRecord
from sagittarius.model import Hyperparams, ModelParams, forward


class EvaluationError(ValueError):
    pass


@dataclass
class MetricsReport:
    k: int
    recall: float
    urecall: float
    ndcg: float
    n_users_evaluated: int

    def line(self) -> str:
        return f"{self.k}, {self.recall:.6f}, {self.urecall:.6f}, {self.ndcg:.6f}, {self.n_users_evaluated}"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def item_projection(z_v, Q1) -> np.ndarray:
    """Rows ``Q1^T``-projected so that ``item_projection @ z_u`` gives all affinities."""
    return np.ascontiguousarray(np.asarray(z_v) @ np.asarray(Q1).T)


def user_scores(z_u_row, item_proj) -> np.ndarray:
    return item_proj @ np.asarray(z_u_row)


def top_k_from_scores(scores: np.ndarray, seen, k: int) -> np.ndarray:
    """Indices of the ``k`` best unseen items; ties go to the smaller id.

    Uses a threshold cut so only the candidates at or above the k-th best
    score are sorted.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.array(scores, dtype=np.float64)
    seen = np.asarray(seen, dtype=np.int64)
    avail = np.ones(len(scores), dtype=bool)
    avail[seen] = False
    cand = np.flatnonzero(avail)
    if len(cand) == 0:
        return cand
    vals = scores[cand]
    if len(cand) > k:
        kth = np.partition(vals, len(vals) - k)[len(vals) - k]
        keep = vals >= kth
        cand, vals = cand[keep], vals[keep]
    order = np.lexsort((cand, -vals))
    return cand[order[:k]]


def rank_items(z_u_row, z_v, Q1, seen, k: int, item_proj=None) -> list[int]:
    if item_proj is None:
        item_proj = item_projection(z_v, Q1)
    return top_k_from_scores(user_scores(z_u_row, item_proj), seen, k).tolist()


def urecall_at_k(topk: Sequence[int], positives) -> int:
    positives = set(positives)
    return int(any(i in positives for i in topk))


def recall_at_k(topk: Sequence[int], positives) -> float:
    positives = set(positives)
    if not positives:
        return 0.0
    return sum(1 for i in topk if i in positives) / len(positives)


def ndcg_at_k(topk: Sequence[int], positives, k: int | None = None) -> float:
    positives = set(positives)
    if not positives:
        return 0.0
    k = len(topk) if k is None else k
    dcg = sum(1.0 / math.log2(i + 2) for i, item in enumerate(topk[:k]) if item in positives)
    idcg = sum(1.0 / math.log2(i + 2) for i in range(min(k, len(positives))))
    return dcg / idcg


def positives_by_user(records: Iterable[InteractionRecord], graph: BipartiteGraph) -> dict[int, set[int]]:
    """Held-out positives keyed by dense user id; unknown keys are dropped."""
    out: dict[int, set[int]] = {}
    for rec in records:
        u = graph.user_index.get(rec.user_id)
        v = graph.item_index.get(rec.item_id)
        if u is None or v is None:
            continue
        out.setdefault(u, set()).add(v)
    return out


def evaluate_embeddings(
    z_u, z_v, Q1, seen: Sequence[np.ndarray], positives: Mapping[int, set[int]], k: int
) -> MetricsReport:
    """Average metrics over users with positives and at least one training edge."""
    item_proj = item_projection(z_v, Q1)
    recall = urecall = ndcg = 0.0
    n = 0
    for u in sorted(positives):
        pos = positives[u]
        if not pos or len(seen[u]) == 0:
            continue
        top = top_k_from_scores(user_scores(z_u[u], item_proj), seen[u], k).tolist()
        recall += recall_at_k(top, pos)
        urecall += urecall_at_k(top, pos)
        ndcg += ndcg_at_k(top, pos, k)
        n += 1
    if n == 0:
        raise EvaluationError("no evaluable users (need test positives and training edges)")
    return MetricsReport(k, recall / n, urecall / n, ndcg / n, n)


def evaluate(
    graph_train: BipartiteGraph,
    params: ModelParams,
    test_records: Iterable[InteractionRecord],
    k: int,
    hyper: Hyperparams | None = None,
) -> MetricsReport:
    emb = forward(graph_train, params, hyper)
    return evaluate_embeddings(
        emb.z_u, emb.z_v, params.Q1, graph_train.seen_sets(), positives_by_user(test_records, graph_train), k
    )
