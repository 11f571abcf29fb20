"""Parameters and forward pass of the behavior-aware graph convolution model.

All arrays are float64. Matrices follow the column-vector convention of the
model equations (``W1`` is ``embed_dim x 2*embed_dim`` and maps a
concatenated column ``[self; aggregate]``), so batched row-major code
multiplies by the transpose.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Iterator

import numpy as np
import scipy.sparse as sp

from sagittarius.data import BipartiteGraph

COS_EPS = 1e-12


@dataclass
class Hyperparams:
    embed_dim: int = 64
    final_dim: int = 64
    n_layers: int = 2
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    n_negatives: int = 10
    learning_rate: float = 0.01
    max_seq_len: int = 50
    epochs: int = 200
    seed: int = 0
    batch_size: int = 0  # quadruples per step; 0 = full batch
    patience: int = 10
    eval_k: int = 10
    seq_targets: str = "prefixes"  # or "last": one target per sequence

    def __post_init__(self):
        if self.embed_dim < 1 or self.final_dim < 1:
            raise ValueError("embedding dimensions must be >= 1")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.n_negatives < 1:
            raise ValueError("n_negatives must be >= 1")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be >= 2")
        if self.seq_targets not in ("last", "prefixes"):
            raise ValueError("seq_targets must be 'last' or 'prefixes'")
        if self.learning_rate < 0 or self.epochs < 0 or self.batch_size < 0 or self.patience < 1:
            raise ValueError("invalid optimizer settings")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def replace(self, **changes) -> "Hyperparams":
        return replace(self, **changes)


GRU_NAMES = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")


@dataclass
class GRUParams:
    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray


@dataclass
class ModelParams:
    E_u: np.ndarray
    E_v: np.ndarray
    W1: list[np.ndarray]
    W2: np.ndarray
    Q1: np.ndarray
    Q2: np.ndarray
    gru: GRUParams
    W_s: np.ndarray

    def named(self) -> Iterator[tuple[str, np.ndarray]]:
        """Every tensor with a stable name, in a fixed order."""
        yield "E_u", self.E_u
        yield "E_v", self.E_v
        for i, w in enumerate(self.W1):
            yield f"W1.{i}", w
        yield "W2", self.W2
        yield "Q1", self.Q1
        yield "Q2", self.Q2
        for name in GRU_NAMES:
            yield f"gru.{name}", getattr(self.gru, name)
        yield "W_s", self.W_s

    def names(self) -> list[str]:
        return [name for name, _ in self.named()]

    def get(self, name: str) -> np.ndarray:
        for key, arr in self.named():
            if key == name:
                return arr
        raise KeyError(name)

    def copy(self) -> "ModelParams":
        return self.map(np.copy)

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    def map(self, fn) -> "ModelParams":
        return ModelParams(
            E_u=fn(self.E_u),
            E_v=fn(self.E_v),
            W1=[fn(w) for w in self.W1],
            W2=fn(self.W2),
            Q1=fn(self.Q1),
            Q2=fn(self.Q2),
            gru=GRUParams(**{n: fn(getattr(self.gru, n)) for n in GRU_NAMES}),
            W_s=fn(self.W_s),
        )

    @classmethod
    def from_named(cls, tensors: dict[str, np.ndarray]) -> "ModelParams":
        n_layers = sum(1 for k in tensors if k.startswith("W1."))
        return cls(
            E_u=tensors["E_u"],
            E_v=tensors["E_v"],
            W1=[tensors[f"W1.{i}"] for i in range(n_layers)],
            W2=tensors["W2"],
            Q1=tensors["Q1"],
            Q2=tensors["Q2"],
            gru=GRUParams(**{n: tensors[f"gru.{n}"] for n in GRU_NAMES}),
            W_s=tensors["W_s"],
        )

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for _, a in self.named())


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape)


def init_params(graph: BipartiteGraph, hyper: Hyperparams) -> ModelParams:
    rng = np.random.default_rng(hyper.seed)
    db, d, n_layers = hyper.embed_dim, hyper.final_dim, hyper.n_layers
    E_u = glorot_uniform(rng, (graph.n_users, db))
    E_v = glorot_uniform(rng, (graph.n_items, db))
    W1 = [glorot_uniform(rng, (db, 2 * db)) for _ in range(n_layers)]
    W2 = glorot_uniform(rng, (d, max(n_layers, 1) * db))
    Q1 = glorot_uniform(rng, (d, d))
    Q2 = glorot_uniform(rng, (d, d))
    gates = {name: glorot_uniform(rng, (d, d)) for name in GRU_NAMES[:6]}
    biases = {name: np.zeros(d) for name in GRU_NAMES[6:]}
    W_s = glorot_uniform(rng, (graph.n_items, d))
    return ModelParams(E_u, E_v, W1, W2, Q1, Q2, GRUParams(**gates, **biases), W_s)


def scaling_factor(e_u, e_v, deg_u: int, deg_v: int, phi: float) -> float:
    e_u = np.asarray(e_u, dtype=np.float64)
    e_v = np.asarray(e_v, dtype=np.float64)
    norm_u = max(np.linalg.norm(e_u), COS_EPS)
    norm_v = max(np.linalg.norm(e_v), COS_EPS)
    return float(np.sqrt(phi / (deg_u * deg_v)) * (e_u @ e_v) / (norm_u * norm_v))


def edge_norms(graph: BipartiteGraph) -> np.ndarray:
    """Per-edge ``sqrt(phi / (deg_u * deg_v))``."""
    deg = graph.user_degrees[graph.edge_users] * graph.item_degrees[graph.edge_items]
    return np.sqrt(graph.edge_weights / deg)


@dataclass
class LayerCache:
    e_u_prev: np.ndarray
    e_v_prev: np.ndarray
    norm_u: np.ndarray
    norm_v: np.ndarray
    dots: np.ndarray
    coef: np.ndarray
    agg: sp.csr_matrix
    h_u: np.ndarray
    h_v: np.ndarray
    pre_u: np.ndarray
    pre_v: np.ndarray


def _convolve(graph: BipartiteGraph, e_u_prev, e_v_prev, W1, a=None) -> tuple[np.ndarray, np.ndarray, LayerCache]:
    if a is None:
        a = edge_norms(graph)
    eu_rows = e_u_prev[graph.edge_users]
    ev_rows = e_v_prev[graph.edge_items]
    norm_u = np.maximum(np.linalg.norm(e_u_prev, axis=1), COS_EPS)
    norm_v = np.maximum(np.linalg.norm(e_v_prev, axis=1), COS_EPS)
    dots = np.einsum("ij,ij->i", eu_rows, ev_rows)
    coef = a * dots / (norm_u[graph.edge_users] * norm_v[graph.edge_items])
    agg = sp.csr_matrix((coef, (graph.edge_users, graph.edge_items)), shape=(graph.n_users, graph.n_items))
    h_u = np.hstack([e_u_prev, agg @ e_v_prev])
    h_v = np.hstack([e_v_prev, agg.T @ e_u_prev])
    pre_u = h_u @ W1.T
    pre_v = h_v @ W1.T
    cache = LayerCache(e_u_prev, e_v_prev, norm_u, norm_v, dots, coef, agg, h_u, h_v, pre_u, pre_v)
    return np.maximum(pre_u, 0.0), np.maximum(pre_v, 0.0), cache


def convolve_layer(graph: BipartiteGraph, e_u_prev, e_v_prev, W1) -> tuple[np.ndarray, np.ndarray]:
    """One synchronous message-passing layer on both sides of the graph."""
    e_u, e_v, _ = _convolve(graph, np.asarray(e_u_prev, float), np.asarray(e_v_prev, float), W1)
    return e_u, e_v


def combine_layers(per_layer_user, per_layer_item, W2) -> tuple[np.ndarray, np.ndarray]:
    n_layers = W2.shape[1] // per_layer_user[0].shape[1]
    if len(per_layer_user) != n_layers or len(per_layer_item) != n_layers:
        raise ValueError(
            f"expected {n_layers} layer outputs per side, got {len(per_layer_user)} and {len(per_layer_item)}"
        )
    return np.hstack(per_layer_user) @ W2.T, np.hstack(per_layer_item) @ W2.T


@dataclass
class NodeEmbeddings:
    user_layers: list[np.ndarray]  # e_u^(0..L)
    item_layers: list[np.ndarray]
    z_u: np.ndarray
    z_v: np.ndarray
    caches: list[LayerCache] = field(default_factory=list, repr=False)


def forward(graph: BipartiteGraph, params: ModelParams, hyper: Hyperparams | None = None) -> NodeEmbeddings:
    a = edge_norms(graph)
    users, items, caches = [params.E_u], [params.E_v], []
    for W1 in params.W1:
        e_u, e_v, cache = _convolve(graph, users[-1], items[-1], W1, a)
        users.append(e_u)
        items.append(e_v)
        caches.append(cache)
    # with no convolution layers the model reduces to z = W2 e (a factorization baseline)
    z_u, z_v = combine_layers(users[1:] or users, items[1:] or items, params.W2)
    return NodeEmbeddings(users, items, z_u, z_v, caches)


def affinity(z_u_row, z_v_row, Q1) -> float:
    return float(np.asarray(z_u_row) @ np.asarray(Q1) @ np.asarray(z_v_row))


def ctr_logit(z_u_row, z_v_row, Q2) -> float:
    return float(np.asarray(z_u_row) @ np.asarray(Q2) @ np.asarray(z_v_row))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gru_cell(x, h, gru: GRUParams):
    """One GRU step on row-batched inputs; returns (h_next, z, r, candidate)."""
    z = sigmoid(x @ gru.W_z.T + h @ gru.U_z.T + gru.b_z)
    r = sigmoid(x @ gru.W_r.T + h @ gru.U_r.T + gru.b_r)
    cand = np.tanh(x @ gru.W_h.T + (r * h) @ gru.U_h.T + gru.b_h)
    return (1.0 - z) * h + z * cand, z, r, cand


def gru_forward(seq_item_embeddings, gru: GRUParams) -> np.ndarray:
    """Final hidden state of a single-layer GRU started from zeros."""
    xs = [np.asarray(x, dtype=np.float64) for x in seq_item_embeddings]
    if not xs:
        raise ValueError("gru_forward needs at least one input step")
    h = np.zeros(gru.b_z.shape[0])
    for x in xs:
        h = gru_cell(x, h, gru)[0]
    return h


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def next_item_distribution(q, W_s) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(W_s) @ np.asarray(q)))
