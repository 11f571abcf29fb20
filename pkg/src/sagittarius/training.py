"""Losses, exact gradients, Adam and the training loop."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from sagittarius.data import BipartiteGraph, DatasetSplit, InteractionSequence, build_sequences
from sagittarius.model import (
    COS_EPS,
    GRUParams,
    Hyperparams,
    ModelParams,
    NodeEmbeddings,
    edge_norms,
    forward,
    gru_cell,
    init_params,
    log_softmax,
    sigmoid,
)

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
_CHUNK = 1 << 16


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainQuadruple:
    u: int
    v: int
    phi: float
    w: int


@dataclass
class Quadruples:
    """Column-wise storage for a set of training quadruples."""

    users: np.ndarray
    pos: np.ndarray
    phi: np.ndarray
    neg: np.ndarray

    def __len__(self) -> int:
        return len(self.users)

    @classmethod
    def from_list(cls, quads: Iterable[TrainQuadruple]) -> "Quadruples":
        quads = list(quads)
        return cls(
            np.array([q.u for q in quads], dtype=np.int64),
            np.array([q.v for q in quads], dtype=np.int64),
            np.array([q.phi for q in quads], dtype=np.float64),
            np.array([q.w for q in quads], dtype=np.int64),
        )

    def to_list(self) -> list[TrainQuadruple]:
        return [
            TrainQuadruple(int(u), int(v), float(p), int(w))
            for u, v, p, w in zip(self.users, self.pos, self.phi, self.neg)
        ]

    def subset(self, idx) -> "Quadruples":
        return Quadruples(self.users[idx], self.pos[idx], self.phi[idx], self.neg[idx])


def _as_quads(quads) -> Quadruples:
    return quads if isinstance(quads, Quadruples) else Quadruples.from_list(quads)


def _edge_keys(graph: BipartiteGraph) -> np.ndarray:
    # edges are sorted by (user, item), so the keys are sorted too
    return graph.edge_users * graph.n_items + graph.edge_items


def _is_edge(keys_sorted: np.ndarray, users, items, n_items: int) -> np.ndarray:
    keys = users * n_items + items
    pos = np.searchsorted(keys_sorted, keys)
    pos = np.minimum(pos, len(keys_sorted) - 1)
    return keys_sorted[pos] == keys


def sample_negatives(graph: BipartiteGraph, u: int, n: int, rng: np.random.Generator) -> list[int]:
    """Draw ``n`` items uniformly (with replacement) among items ``u`` never touched."""
    if graph.user_degrees[u] >= graph.n_items:
        raise TrainingError(f"user {graph.user_index.key(u)!r} interacted with every item")
    seen = graph.user_items(u)
    out = []
    while len(out) < n:
        w = int(rng.integers(graph.n_items))
        pos = np.searchsorted(seen, w)
        if pos < len(seen) and seen[pos] == w:
            continue
        out.append(w)
    return out


def sample_quadruples(graph: BipartiteGraph, n_negatives: int, rng: np.random.Generator) -> Quadruples:
    """``n_negatives`` quadruples per training edge, ordered edge-major."""
    full = graph.user_degrees >= graph.n_items
    if np.any(full[graph.edge_users]):
        bad = graph.user_index.key(int(np.flatnonzero(full)[0]))
        raise TrainingError(f"user {bad!r} interacted with every item; no negatives available")
    users = np.repeat(graph.edge_users, n_negatives)
    pos = np.repeat(graph.edge_items, n_negatives)
    phi = np.repeat(graph.edge_weights, n_negatives)
    neg = rng.integers(graph.n_items, size=len(users))
    keys = _edge_keys(graph)
    redo = np.flatnonzero(_is_edge(keys, users, neg, graph.n_items))
    while len(redo):
        neg[redo] = rng.integers(graph.n_items, size=len(redo))
        redo = redo[_is_edge(keys, users[redo], neg[redo], graph.n_items)]
    return Quadruples(users, pos, phi, neg)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _bilinear_scores(z_u, z_v, Q, users, items) -> np.ndarray:
    proj = z_u @ Q
    out = np.empty(len(users))
    for lo in range(0, len(users), _CHUNK):
        hi = lo + _CHUNK
        out[lo:hi] = np.einsum("ij,ij->i", proj[users[lo:hi]], z_v[items[lo:hi]])
    return out


def bpr_loss(quads, z_u, z_v, Q1) -> float:
    q = _as_quads(quads)
    if len(q) == 0:
        raise ValueError("bpr_loss needs at least one quadruple")
    diff = _bilinear_scores(z_u, z_v, Q1, q.users, q.pos) - _bilinear_scores(z_u, z_v, Q1, q.users, q.neg)
    return float(np.sum(q.phi * _softplus(-diff)) / len(q))


def ctr_loss(quads, z_u, z_v, Q2) -> float:
    q = _as_quads(quads)
    if len(q) == 0:
        raise ValueError("ctr_loss needs at least one quadruple")
    s_pos = _bilinear_scores(z_u, z_v, Q2, q.users, q.pos)
    s_neg = _bilinear_scores(z_u, z_v, Q2, q.users, q.neg)
    return float((np.sum(q.phi * _softplus(-s_pos)) + np.sum(_softplus(s_neg))) / len(q))


@dataclass
class SequenceBatch:
    """Left-padded GRU inputs and per-step next-item targets.

    ``inputs[b, t]`` is -1 where padded; ``targets[b, t]`` is the item to be
    predicted from the hidden state after step ``t``, or -1 for no target.
    """

    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def n_targets(self) -> int:
        return int(np.count_nonzero(self.targets >= 0))

    @classmethod
    def from_sequences(cls, sequences: Sequence[InteractionSequence], prefixes: bool = False) -> "SequenceBatch":
        """Pack sequences; with ``prefixes`` every prefix ``v_1..v_t`` (t >= 1)
        also counts as a sequence whose target is ``v_{t+1}``.

        Prefixes share the GRU pass of their full sequence because the
        recurrence starts from a zero state.
        """
        if not sequences:
            empty = np.zeros((0, 1), dtype=np.int64)
            return cls(empty, empty.copy())
        if any(len(s.item_ids) < 2 for s in sequences):
            raise ValueError("every sequence needs at least 2 items")
        width = max(len(s.item_ids) for s in sequences) - 1
        inputs = np.full((len(sequences), width), -1, dtype=np.int64)
        targets = np.full((len(sequences), width), -1, dtype=np.int64)
        for b, s in enumerate(sequences):
            items = s.item_ids
            n = len(items) - 1
            inputs[b, width - n :] = items[:-1]
            if prefixes:
                targets[b, width - n :] = items[1:]
            else:
                targets[b, width - 1] = items[-1]
        return cls(inputs, targets)

    def subset(self, idx) -> "SequenceBatch":
        return SequenceBatch(self.inputs[idx], self.targets[idx])


def _as_seq_batch(sequences) -> SequenceBatch:
    return sequences if isinstance(sequences, SequenceBatch) else SequenceBatch.from_sequences(sequences)


@dataclass
class _GRUTrace:
    mask: list[np.ndarray]
    x: list[np.ndarray]
    h_prev: list[np.ndarray]
    z: list[np.ndarray]
    r: list[np.ndarray]
    cand: list[np.ndarray]
    h_out: list[np.ndarray]


def _gru_run(batch: SequenceBatch, z_v, gru: GRUParams) -> _GRUTrace:
    n, width = batch.inputs.shape
    h = np.zeros((n, gru.b_z.shape[0]))
    trace = _GRUTrace([], [], [], [], [], [], [])
    for t in range(width):
        col = batch.inputs[:, t]
        m = (col >= 0).astype(np.float64)[:, None]
        x = z_v[np.maximum(col, 0)] * m
        h_new, z, r, cand = gru_cell(x, h, gru)
        trace.mask.append(m)
        trace.x.append(x)
        trace.h_prev.append(h)
        trace.z.append(z)
        trace.r.append(r)
        trace.cand.append(cand)
        h = m * h_new + (1.0 - m) * h
        trace.h_out.append(h)
    return trace


def _seq_nll(trace: _GRUTrace, batch: SequenceBatch, W_s, want_grad: bool):
    """Mean next-item NLL; optionally the per-step hidden-state gradients."""
    n_targets = batch.n_targets
    total = 0.0
    g_out = [None] * len(trace.h_out)
    g_W_s = np.zeros_like(W_s) if want_grad else None
    for t, h in enumerate(trace.h_out):
        rows = np.flatnonzero(batch.targets[:, t] >= 0)
        if len(rows) == 0:
            continue
        tgt = batch.targets[rows, t]
        logp = log_softmax(h[rows] @ W_s.T)
        total -= logp[np.arange(len(rows)), tgt].sum()
        if want_grad:
            g_logits = np.exp(logp)
            g_logits[np.arange(len(rows)), tgt] -= 1.0
            g_logits /= n_targets
            g_W_s += g_logits.T @ h[rows]
            g = np.zeros_like(h)
            g[rows] = g_logits @ W_s
            g_out[t] = g
    return total / n_targets, g_out, g_W_s


def seq_loss(sequences, z_v, gru_params: GRUParams, W_s) -> float:
    batch = _as_seq_batch(sequences)
    if batch.n_targets == 0:
        return 0.0
    return float(_seq_nll(_gru_run(batch, z_v, gru_params), batch, W_s, False)[0])


def total_loss(l1, l2, l3, lambda1, lambda2, lambda3) -> float:
    return lambda1 * l1 + lambda2 * l2 + lambda3 * l3


@dataclass
class LossBreakdown:
    l1: float
    l2: float
    l3: float
    total: float


def _pair_matrix(users, items, coef, shape) -> sp.csr_matrix:
    return sp.coo_matrix((coef, (users, items)), shape=shape).tocsr()


def _conv_backward(graph, params, emb: NodeEmbeddings, a, g_z_u, g_z_v, grads: ModelParams):
    n_layers = len(params.W1)
    db = params.E_u.shape[1]
    h_u = np.hstack(emb.user_layers[1:] or emb.user_layers)
    h_v = np.hstack(emb.item_layers[1:] or emb.item_layers)
    grads.W2 += g_z_u.T @ h_u + g_z_v.T @ h_v
    g_h_u = g_z_u @ params.W2
    g_h_v = g_z_v @ params.W2
    if n_layers == 0:
        grads.E_u += g_h_u
        grads.E_v += g_h_v
        return
    carry_u = np.zeros_like(params.E_u)
    carry_v = np.zeros_like(params.E_v)
    eu_idx, ev_idx = graph.edge_users, graph.edge_items
    for layer in reversed(range(n_layers)):
        c = emb.caches[layer]
        W1 = params.W1[layer]
        g_pre_u = (g_h_u[:, layer * db : (layer + 1) * db] + carry_u) * (c.pre_u > 0)
        g_pre_v = (g_h_v[:, layer * db : (layer + 1) * db] + carry_v) * (c.pre_v > 0)
        grads.W1[layer] += g_pre_u.T @ c.h_u + g_pre_v.T @ c.h_v
        g_in_u = g_pre_u @ W1
        g_in_v = g_pre_v @ W1
        g_agg_u, g_agg_v = g_in_u[:, db:], g_in_v[:, db:]
        g_eu = g_in_u[:, :db] + c.agg @ g_agg_v
        g_ev = g_in_v[:, :db] + c.agg.T @ g_agg_u
        # gradient through the cosine inside each scaling factor
        g_coef = np.einsum("ij,ij->i", g_agg_u[eu_idx], c.e_v_prev[ev_idx]) + np.einsum(
            "ij,ij->i", g_agg_v[ev_idx], c.e_u_prev[eu_idx]
        )
        k = g_coef * a / (c.norm_u[eu_idx] * c.norm_v[ev_idx])
        kmat = sp.csr_matrix((k, (eu_idx, ev_idx)), shape=(graph.n_users, graph.n_items))
        g_eu += kmat @ c.e_v_prev
        g_ev += kmat.T @ c.e_u_prev
        kd = k * c.dots
        live_u = (np.linalg.norm(c.e_u_prev, axis=1) > COS_EPS) / c.norm_u**2
        live_v = (np.linalg.norm(c.e_v_prev, axis=1) > COS_EPS) / c.norm_v**2
        g_eu -= (np.bincount(eu_idx, kd, graph.n_users) * live_u)[:, None] * c.e_u_prev
        g_ev -= (np.bincount(ev_idx, kd, graph.n_items) * live_v)[:, None] * c.e_v_prev
        carry_u, carry_v = g_eu, g_ev
    grads.E_u += carry_u
    grads.E_v += carry_v


def _gru_backward(trace: _GRUTrace, batch: SequenceBatch, g_out, gru: GRUParams, g_gru: GRUParams, g_z_v):
    g_h = np.zeros_like(trace.h_out[-1])
    for t in reversed(range(len(trace.x))):
        if g_out[t] is not None:
            g_h = g_h + g_out[t]
        m, x, h_prev = trace.mask[t], trace.x[t], trace.h_prev[t]
        z, r, cand = trace.z[t], trace.r[t], trace.cand[t]
        g_new = m * g_h
        g_prev = (1.0 - m) * g_h + g_new * (1.0 - z)
        g_cand_pre = g_new * z * (1.0 - cand**2)
        g_z_pre = g_new * (cand - h_prev) * z * (1.0 - z)
        rh = r * h_prev
        g_rh = g_cand_pre @ gru.U_h
        g_r_pre = g_rh * h_prev * r * (1.0 - r)
        g_prev += g_rh * r + g_z_pre @ gru.U_z + g_r_pre @ gru.U_r
        g_gru.W_h += g_cand_pre.T @ x
        g_gru.U_h += g_cand_pre.T @ rh
        g_gru.b_h += g_cand_pre.sum(axis=0)
        g_gru.W_z += g_z_pre.T @ x
        g_gru.U_z += g_z_pre.T @ h_prev
        g_gru.b_z += g_z_pre.sum(axis=0)
        g_gru.W_r += g_r_pre.T @ x
        g_gru.U_r += g_r_pre.T @ h_prev
        g_gru.b_r += g_r_pre.sum(axis=0)
        g_x = (g_z_pre @ gru.W_z + g_r_pre @ gru.W_r + g_cand_pre @ gru.W_h) * m
        col = batch.inputs[:, t]
        valid = col >= 0
        np.add.at(g_z_v, col[valid], g_x[valid])
        g_h = g_prev


def compute_gradients(
    graph: BipartiteGraph,
    params: ModelParams,
    hyper: Hyperparams,
    quads,
    sequences,
    emb: NodeEmbeddings | None = None,
) -> tuple[LossBreakdown, ModelParams]:
    """Loss values and the exact gradient of the weighted total loss."""
    q = _as_quads(quads)
    batch = _as_seq_batch(sequences)
    if emb is None:
        emb = forward(graph, params, hyper)
    z_u, z_v = emb.z_u, emb.z_v
    grads = params.zeros_like()
    g_z_u = np.zeros_like(z_u)
    g_z_v = np.zeros_like(z_v)
    shape = (graph.n_users, graph.n_items)
    lam1, lam2, lam3 = hyper.lambda1, hyper.lambda2, hyper.lambda3

    l1 = l2 = 0.0
    if len(q):
        n = len(q)
        diff = _bilinear_scores(z_u, z_v, params.Q1, q.users, q.pos) - _bilinear_scores(
            z_u, z_v, params.Q1, q.users, q.neg
        )
        l1 = float(np.sum(q.phi * _softplus(-diff)) / n)
        g_diff = -lam1 * q.phi * sigmoid(-diff) / n
        G1 = _pair_matrix(
            np.concatenate([q.users, q.users]), np.concatenate([q.pos, q.neg]),
            np.concatenate([g_diff, -g_diff]), shape,
        )
        s_pos = _bilinear_scores(z_u, z_v, params.Q2, q.users, q.pos)
        s_neg = _bilinear_scores(z_u, z_v, params.Q2, q.users, q.neg)
        l2 = float((np.sum(q.phi * _softplus(-s_pos)) + np.sum(_softplus(s_neg))) / n)
        G2 = _pair_matrix(
            np.concatenate([q.users, q.users]), np.concatenate([q.pos, q.neg]),
            np.concatenate([-lam2 * q.phi * sigmoid(-s_pos) / n, lam2 * sigmoid(s_neg) / n]), shape,
        )
        for G, Q, gQ in ((G1, params.Q1, grads.Q1), (G2, params.Q2, grads.Q2)):
            Gz_v = G @ z_v
            gQ += z_u.T @ Gz_v
            g_z_u += Gz_v @ Q.T
            g_z_v += G.T @ (z_u @ Q)

    l3 = 0.0
    if batch.n_targets:
        trace = _gru_run(batch, z_v, params.gru)
        l3, g_out, g_W_s = _seq_nll(trace, batch, params.W_s, True)
        grads.W_s += lam3 * g_W_s
        g_out = [None if g is None else lam3 * g for g in g_out]
        _gru_backward(trace, batch, g_out, params.gru, grads.gru, g_z_v)

    _conv_backward(graph, params, emb, edge_norms(graph), g_z_u, g_z_v, grads)
    return LossBreakdown(l1, l2, l3, total_loss(l1, l2, l3, lam1, lam2, lam3)), grads


def loss_value(graph, params, hyper, quads, sequences) -> float:
    """Weighted total loss; forward-only path used by finite differences."""
    emb = forward(graph, params, hyper)
    q = _as_quads(quads)
    l1 = bpr_loss(q, emb.z_u, emb.z_v, params.Q1) if len(q) else 0.0
    l2 = ctr_loss(q, emb.z_u, emb.z_v, params.Q2) if len(q) else 0.0
    l3 = seq_loss(sequences, emb.z_v, params.gru, params.W_s)
    return total_loss(l1, l2, l3, hyper.lambda1, hyper.lambda2, hyper.lambda3)


@dataclass
class EpochRecord:
    epoch: int
    l1: float
    l2: float
    l3: float
    total: float
    val_urecall: float

    def line(self) -> str:
        return f"{self.epoch}, {self.l1:.10g}, {self.l2:.10g}, {self.l3:.10g}, {self.total:.10g}, {self.val_urecall:.10g}"


@dataclass
class TrainState:
    params: ModelParams
    m: ModelParams
    v: ModelParams
    step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    history: list[EpochRecord] = field(default_factory=list)
    best_params: ModelParams | None = None
    best_epoch: int = -1
    best_val: float = -np.inf

    @classmethod
    def fresh(cls, params: ModelParams, seed: int = 0) -> "TrainState":
        return cls(params, params.zeros_like(), params.zeros_like(), rng=np.random.default_rng(seed))


def adam_step(state: TrainState, grads: ModelParams, lr: float) -> TrainState:
    """In-place Adam update; also returns ``state`` for chaining."""
    for name, g in grads.named():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}")
    state.step += 1
    t = state.step
    corr1 = 1.0 - ADAM_BETA1**t
    corr2 = 1.0 - ADAM_BETA2**t
    for (name, p), (_, g), (_, m), (_, v) in zip(
        state.params.named(), grads.named(), state.m.named(), state.v.named()
    ):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p -= lr * (m / corr1) / (np.sqrt(v / corr2) + ADAM_EPS)
        if not np.all(np.isfinite(p)):
            raise TrainingError(f"parameter {name} became non-finite at step {t}")
    return state


Callback = Callable[[EpochRecord, TrainState], None]


def fit(
    graph: BipartiteGraph,
    split: DatasetSplit,
    hyper: Hyperparams,
    callbacks: Sequence[Callback] = (),
    params: ModelParams | None = None,
) -> TrainState:
    """Train on ``graph`` (the training-split graph), selecting by validation URecall.

    ``graph`` must be indexed over every user/item appearing in ``split`` so
    that validation records resolve to dense ids.
    """
    from sagittarius.evaluation import evaluate_embeddings, positives_by_user

    if not split.train:
        raise TrainingError("training split is empty")
    params = params if params is not None else init_params(graph, hyper)
    state = TrainState.fresh(params, hyper.seed)
    sequences = SequenceBatch.from_sequences(
        build_sequences(split.train, hyper.max_seq_len, graph.item_index), prefixes=hyper.seq_targets == "prefixes"
    )
    val_pos = positives_by_user(split.validation, graph)
    seen = graph.seen_sets()
    state.best_params = params.copy()
    since_best = 0

    for epoch in range(1, hyper.epochs + 1):
        quads = sample_quadruples(graph, hyper.n_negatives, state.rng)
        parts = _batches(len(quads), len(sequences), hyper.batch_size, state.rng)
        sums = np.zeros(4)
        for q_idx, s_idx in parts:
            losses, grads = compute_gradients(graph, state.params, hyper, quads.subset(q_idx), sequences.subset(s_idx))
            adam_step(state, grads, hyper.learning_rate)
            sums += np.array([losses.l1, losses.l2, losses.l3, losses.total]) * len(q_idx)
        sums /= len(quads)

        emb = forward(graph, state.params, hyper)
        val = np.nan
        if val_pos:
            val = evaluate_embeddings(emb.z_u, emb.z_v, state.params.Q1, seen, val_pos, hyper.eval_k).urecall
        record = EpochRecord(epoch, *sums.tolist(), val)
        state.history.append(record)
        log.info("epoch %s", record.line())
        for cb in callbacks:
            cb(record, state)

        if not val_pos or val > state.best_val:
            state.best_val = val if val_pos else state.best_val
            state.best_epoch = epoch
            state.best_params = state.params.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best >= hyper.patience:
                log.info("early stop at epoch %d (best %d)", epoch, state.best_epoch)
                break
    return state


def _batches(n_quads: int, n_seqs: int, batch_size: int, rng: np.random.Generator):
    if batch_size <= 0 or batch_size >= n_quads:
        return [(np.arange(n_quads), np.arange(n_seqs))]
    order = rng.permutation(n_quads)
    n_parts = -(-n_quads // batch_size)
    seq_order = rng.permutation(n_seqs)
    return [
        (np.sort(order[i * batch_size : (i + 1) * batch_size]), np.sort(seq_order[i::n_parts]))
        for i in range(n_parts)
    ]


def copy_state(state: TrainState) -> TrainState:
    return copy.deepcopy(state)
