"""Straight-from-definition reference implementations used by the tests."""

import math

import numpy as np


def brute_scores(z_u_row, z_v, Q1):
    d = len(z_u_row)
    return [
        sum(z_u_row[a] * Q1[a, b] * z_v[v, b] for a in range(d) for b in range(d)) for v in range(len(z_v))
    ]


def brute_topk(scores, seen, k):
    unseen = [i for i in range(len(scores)) if i not in set(seen)]
    return sorted(unseen, key=lambda i: (-scores[i], i))[:k]


def brute_metrics(topk, positives, k):
    hits = [i for i in topk if i in positives]
    recall = len(hits) / len(positives)
    urecall = 1 if hits else 0
    dcg = 0.0
    for rank, item in enumerate(topk):
        if item in positives:
            dcg += 1.0 / math.log2(rank + 2)
    idcg = 0.0
    for rank in range(min(k, len(positives))):
        idcg += 1.0 / math.log2(rank + 2)
    return recall, urecall, dcg / idcg


def random_metric_instance(rng: np.random.Generator):
    """Small integer embeddings so every score is exact and ties are common."""
    n_users, n_items, d = int(rng.integers(1, 8)), int(rng.integers(2, 15)), int(rng.integers(1, 4))
    z_u = rng.integers(-2, 3, size=(n_users, d)).astype(float)
    z_v = rng.integers(-2, 3, size=(n_items, d)).astype(float)
    Q1 = rng.integers(-1, 2, size=(d, d)).astype(float)
    seen, positives = [], {}
    for u in range(n_users):
        perm = rng.permutation(n_items)
        n_seen = int(rng.integers(0, n_items))
        seen.append(np.sort(perm[:n_seen]))
        rest = perm[n_seen:]
        n_pos = int(rng.integers(0, len(rest) + 1))
        if n_pos:
            positives[u] = set(rng.choice(rest, size=n_pos, replace=False).tolist())
    k = int(rng.integers(1, n_items + 2))
    return z_u, z_v, Q1, seen, positives, k


def brute_evaluate(z_u, z_v, Q1, seen, positives, k):
    totals, n = [0.0, 0.0, 0.0], 0
    for u in sorted(positives):
        if not positives[u] or len(seen[u]) == 0:
            continue
        top = brute_topk(brute_scores(z_u[u], z_v, Q1), seen[u].tolist(), k)
        for j, value in enumerate(brute_metrics(top, positives[u], k)):
            totals[j] += value
        n += 1
    if n == 0:
        return None
    return totals[0] / n, totals[1] / n, totals[2] / n, n
