"""Central finite-difference verification of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from sagittarius.data import BipartiteGraph, IdIndex, InteractionSequence
from sagittarius.model import Hyperparams, ModelParams, init_params
from sagittarius.training import Quadruples, SequenceBatch, compute_gradients, loss_value, sample_quadruples

FD_STEP = 1e-5
TOLERANCE = 1e-4
SCALE_FLOOR = 1e-12


@dataclass
class TensorCheck:
    name: str
    max_rel_error: float
    size: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= TOLERANCE


@dataclass
class GradcheckReport:
    checks: list[TensorCheck]

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    @property
    def worst(self) -> TensorCheck:
        return max(self.checks, key=lambda c: c.max_rel_error)

    def lines(self) -> list[str]:
        return [f"{c.name}\t{c.max_rel_error:.3e}\t{'ok' if c.ok else 'FAIL'}" for c in self.checks]


@dataclass
class Instance:
    graph: BipartiteGraph
    params: ModelParams
    hyper: Hyperparams
    quads: Quadruples
    sequences: SequenceBatch


def random_instance(
    seed: int,
    n_users: int = 5,
    n_items: int = 5,
    n_edges: int = 8,
    n_layers: int = 2,
    embed_dim: int = 4,
    final_dim: int = 3,
    seq_prefixes: bool = False,
) -> Instance:
    """Small random graph with weighted edges, negatives and sequences.

    Every user keeps at least one edge and one non-edge.
    """
    rng = np.random.default_rng(seed)
    n_edges = int(np.clip(n_edges, n_users, n_users * (n_items - 1)))
    pairs = {(u, int(rng.integers(n_items))) for u in range(n_users)}
    while len(pairs) < n_edges:
        u, v = int(rng.integers(n_users)), int(rng.integers(n_items))
        if sum(1 for p in pairs if p[0] == u) < n_items - 1:
            pairs.add((u, v))
    pairs = sorted(pairs)
    users = IdIndex(f"u{i}" for i in range(n_users))
    items = IdIndex(f"i{i}" for i in range(n_items))
    weights = rng.choice([0.5, 1.0, 2.0, 3.5, 5.0], size=len(pairs))
    graph = BipartiteGraph(users, items, [p[0] for p in pairs], [p[1] for p in pairs], weights)
    hyper = Hyperparams(
        embed_dim=embed_dim, final_dim=final_dim, n_layers=n_layers, n_negatives=2, seed=seed,
        lambda1=float(rng.uniform(0.5, 1.5)), lambda2=float(rng.uniform(0.5, 1.5)), lambda3=float(rng.uniform(0.5, 1.5)),
    )
    params = init_params(graph, hyper)
    # non-zero biases so their gradients are exercised away from the initial point
    params = params.map(lambda a: a if a.ndim == 2 else a + rng.normal(0, 0.3, a.shape))
    quads = sample_quadruples(graph, hyper.n_negatives, rng)
    seqs = []
    for u in range(n_users):
        # the reset gate only acts once the hidden state is non-zero; short
        # sequences leave its gradient at roundoff level
        length = int(rng.integers(4, 9))
        seqs.append(InteractionSequence(f"u{u}", tuple(int(x) for x in rng.integers(n_items, size=length))))
    return Instance(graph, params, hyper, quads, SequenceBatch.from_sequences(seqs, prefixes=seq_prefixes))


def finite_difference(loss_fn: Callable[[], float], arr: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error relative to the tensor's largest gradient entry.

    Per-coordinate ratios are meaningless for entries near zero, where the
    difference quotient's roundoff (~1e-9 at h=1e-5) dominates.
    """
    if analytic.size == 0:
        return 0.0
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), SCALE_FLOOR)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(inst: Instance, corrupt: str | None = None, h: float = FD_STEP) -> GradcheckReport:
    """Compare every parameter tensor's analytic gradient with central differences.

    ``corrupt`` names a tensor whose analytic gradient is deliberately
    perturbed, to confirm the detector fires.
    """
    _, grads = compute_gradients(inst.graph, inst.params, inst.hyper, inst.quads, inst.sequences)

    def loss() -> float:
        return loss_value(inst.graph, inst.params, inst.hyper, inst.quads, inst.sequences)

    checks = []
    for (name, arr), (_, g) in zip(inst.params.named(), grads.named()):
        g = g.copy()
        if name == corrupt:
            g.reshape(-1)[0] += 1e-2 + abs(g.reshape(-1)[0])
        numeric = finite_difference(loss, arr, h)
        checks.append(TensorCheck(name, relative_error(g, numeric), arr.size))
    return GradcheckReport(checks)
