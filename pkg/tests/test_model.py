import math

import numpy as np
import pytest

from sagittarius.data import InteractionRecord, build_graph
from sagittarius.model import (
    GRUParams,
    Hyperparams,
    affinity,
    combine_layers,
    convolve_layer,
    forward,
    gru_cell,
    gru_forward,
    init_params,
    next_item_distribution,
    scaling_factor,
)


def small_graph():
    recs = [
        InteractionRecord("a", "x", "r", 0, 1.0),
        InteractionRecord("a", "y", "r", 0, 4.0),
        InteractionRecord("b", "y", "r", 0, 2.5),
        InteractionRecord("c", "z", "r", 0, 0.5),
        InteractionRecord("c", "x", "r", 0, 3.0),
    ]
    return build_graph(recs)


def reference_layer(graph, e_u, e_v, W1):
    """Per-node loops written directly from the propagation rule."""
    out_u, out_v = [], []
    for u in range(graph.n_users):
        acc = np.zeros(e_u.shape[1])
        for v, phi in graph.user_adjacency(u):
            c = math.sqrt(phi / (graph.user_degrees[u] * graph.item_degrees[v]))
            c *= e_u[u] @ e_v[v] / (np.linalg.norm(e_u[u]) * np.linalg.norm(e_v[v]))
            acc += c * e_v[v]
        out_u.append(np.maximum(W1 @ np.concatenate([e_u[u], acc]), 0))
    for v in range(graph.n_items):
        acc = np.zeros(e_v.shape[1])
        for u, phi in graph.item_adjacency(v):
            c = math.sqrt(phi / (graph.user_degrees[u] * graph.item_degrees[v]))
            c *= e_u[u] @ e_v[v] / (np.linalg.norm(e_u[u]) * np.linalg.norm(e_v[v]))
            acc += c * e_u[u]
        out_v.append(np.maximum(W1 @ np.concatenate([e_v[v], acc]), 0))
    return np.array(out_u), np.array(out_v)


class TestHyperparams:
    def test_defaults(self):
        h = Hyperparams()
        assert (h.embed_dim, h.final_dim, h.n_layers, h.n_negatives) == (64, 64, 2, 10)
        assert h.learning_rate == 0.01
        assert (h.lambda1, h.lambda2, h.lambda3) == (1.0, 1.0, 1.0)

    @pytest.mark.parametrize("bad", [dict(embed_dim=0), dict(n_negatives=0), dict(lambda2=-1.0), dict(n_layers=-1)])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            Hyperparams(**bad)


class TestInit:
    def test_shapes(self):
        g = small_graph()
        p = init_params(g, Hyperparams(embed_dim=6, final_dim=4, n_layers=3))
        assert p.E_u.shape == (3, 6) and p.E_v.shape == (3, 6)
        assert [w.shape for w in p.W1] == [(6, 12)] * 3
        assert p.W2.shape == (4, 18)
        assert p.Q1.shape == p.Q2.shape == (4, 4)
        assert p.W_s.shape == (3, 4)
        assert p.gru.W_z.shape == (4, 4) and p.gru.b_h.shape == (4,)

    def test_glorot_bound(self):
        p = init_params(small_graph(), Hyperparams())
        # sqrt(6 / (64 + 128)) for the 64 x 128 convolution weights
        assert np.abs(p.W1[0]).max() <= 0.1767766952966369
        assert not np.any(p.gru.b_z)

    def test_seeded(self):
        g = small_graph()
        a = init_params(g, Hyperparams(seed=5))
        b = init_params(g, Hyperparams(seed=5))
        c = init_params(g, Hyperparams(seed=6))
        assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(a.named(), b.named()))
        assert not np.array_equal(a.E_u, c.E_u)


class TestScalingFactor:
    def test_hand_value(self):
        # cos = 1, sqrt(4 / (2 * 2)) = 1
        assert scaling_factor([1, 0], [3, 0], 2, 2, 4.0) == pytest.approx(1.0, abs=1e-15)
        # orthogonal vectors pass nothing
        assert scaling_factor([1, 0], [0, 1], 1, 1, 5.0) == 0.0
        # opposite vectors, sqrt(1 / (1 * 4)) = 0.5
        assert scaling_factor([1, 1], [-2, -2], 1, 4, 1.0) == pytest.approx(-0.5, abs=1e-15)

    def test_zero_vector_is_finite(self):
        assert scaling_factor([0, 0], [1, 1], 1, 1, 1.0) == 0.0


class TestConvolution:
    def test_matches_reference_loops(self):
        g = small_graph()
        rng = np.random.default_rng(0)
        e_u, e_v = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
        W1 = rng.normal(size=(5, 10))
        got_u, got_v = convolve_layer(g, e_u, e_v, W1)
        ref_u, ref_v = reference_layer(g, e_u, e_v, W1)
        np.testing.assert_allclose(got_u, ref_u, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(got_v, ref_v, rtol=1e-12, atol=1e-12)

    def test_isolated_node_keeps_self_term(self):
        g = build_graph([InteractionRecord("a", "x", "r", 0, 1.0)])
        W1 = np.hstack([np.eye(2), np.zeros((2, 2))])
        e_u, _ = convolve_layer(g, np.array([[1.0, -2.0]]), np.array([[3.0, 3.0]]), W1)
        assert e_u.tolist() == [[1.0, 0.0]]

    def test_combine_rejects_layer_mismatch(self):
        W2 = np.zeros((2, 4))
        with pytest.raises(ValueError):
            combine_layers([np.zeros((1, 2))], [np.zeros((1, 2))], W2)

    def test_forward_uses_every_layer(self):
        g = small_graph()
        h = Hyperparams(embed_dim=3, final_dim=2, n_layers=2)
        p = init_params(g, h)
        emb = forward(g, p, h)
        assert len(emb.user_layers) == 3
        expect = np.hstack(emb.user_layers[1:]) @ p.W2.T
        np.testing.assert_allclose(emb.z_u, expect)

    def test_zero_layers_is_linear_factorization(self):
        g = small_graph()
        h = Hyperparams(embed_dim=3, final_dim=2, n_layers=0)
        p = init_params(g, h)
        emb = forward(g, p, h)
        np.testing.assert_allclose(emb.z_v, p.E_v @ p.W2.T)


def test_affinity_is_bilinear():
    zu, zv, Q = np.array([1.0, 2.0]), np.array([3.0, -1.0]), np.array([[1.0, 0.5], [0.0, 2.0]])
    assert affinity(zu, zv, Q) == 1 * 3 + 1 * 0.5 * -1 + 2 * 2 * -1


class TestGRU:
    def gru(self, d, seed=0):
        rng = np.random.default_rng(seed)
        return GRUParams(*(rng.normal(size=(d, d)) for _ in range(6)), *(rng.normal(size=d) for _ in range(3)))

    def test_hand_cell_with_zero_weights(self):
        zero = GRUParams(*(np.zeros((1, 1)) for _ in range(6)), *(np.zeros(1) for _ in range(3)))
        # gates are 0.5, candidate is tanh(0) = 0: h' = 0.5 h
        h, z, r, cand = gru_cell(np.array([7.0]), np.array([2.0]), zero)
        assert h.tolist() == [1.0] and z.tolist() == [0.5] and cand.tolist() == [0.0]

    def test_forward_is_repeated_cell(self):
        gru = self.gru(3)
        xs = np.random.default_rng(1).normal(size=(4, 3))
        h = np.zeros(3)
        for x in xs:
            h = gru_cell(x, h, gru)[0]
        np.testing.assert_array_equal(gru_forward(list(xs), gru), h)

    def test_empty_sequence(self):
        with pytest.raises(ValueError):
            gru_forward([], self.gru(2))

    def test_hidden_state_bounded(self):
        h = gru_forward(list(np.random.default_rng(2).normal(scale=50, size=(20, 3))), self.gru(3))
        assert np.all(np.abs(h) <= 1.0)


def test_softmax_hand_values():
    p = next_item_distribution(np.array([1.0]), np.array([[1.0], [2.0], [3.0]]))
    np.testing.assert_allclose(p, [0.09003057317038046, 0.24472847105479764, 0.6652409557748219], rtol=1e-14)
