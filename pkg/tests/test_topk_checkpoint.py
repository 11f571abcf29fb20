import io

import numpy as np
import pytest

from sagittarius import checkpoint
from sagittarius.data import InteractionRecord, build_graph
from sagittarius.evaluation import rank_items
from sagittarius.model import Hyperparams, init_params
from sagittarius.topk import generate_topk, read_recommendations, recommend_for_graph, write_recommendations


def random_embeddings(n_users, n_items, d=4, seed=0):
    rng = np.random.default_rng(seed)
    seen = [np.sort(rng.choice(n_items, size=int(rng.integers(0, min(5, n_items))), replace=False)) for _ in range(n_users)]
    return rng.normal(size=(n_users, d)), rng.normal(size=(n_items, d)), rng.normal(size=(d, d)), seen


def as_bytes(batch):
    buf = io.StringIO()
    write_recommendations(batch, buf)
    return buf.getvalue().encode()


class TestGenerateTopK:
    def test_workers_agree(self):
        z_u, z_v, Q1, seen = random_embeddings(700, 30)
        outs = {as_bytes(generate_topk(z_u, z_v, Q1, seen, 5, n_workers=w)) for w in (1, 3)}
        assert len(outs) == 1

    def test_matches_rank_items(self):
        z_u, z_v, Q1, seen = random_embeddings(50, 12)
        batch = generate_topk(z_u, z_v, Q1, seen, 4, block_size=7)
        for u, row in enumerate(batch.rows):
            assert [int(i) for i in row.items] == rank_items(z_u[u], z_v, Q1, seen[u], 4)
            assert not set(row.items) & {str(i) for i in seen[u]}

    def test_scores_descend(self):
        z_u, z_v, Q1, seen = random_embeddings(20, 15)
        for row in generate_topk(z_u, z_v, Q1, seen, 6).rows:
            assert row.scores == sorted(row.scores, reverse=True)

    @pytest.mark.parametrize("kw", [dict(k=0), dict(n_workers=0)])
    def test_rejects(self, kw):
        z_u, z_v, Q1, seen = random_embeddings(2, 3)
        args = dict(k=1, n_workers=1) | kw
        with pytest.raises(ValueError):
            generate_topk(z_u, z_v, Q1, seen, **args)

    def test_graph_keys(self):
        g = build_graph([InteractionRecord("alice", "film", "r", 0, 1.0), InteractionRecord("bob", "song", "r", 0, 1.0)])
        batch = recommend_for_graph(np.eye(2), np.eye(2), np.eye(2), g, 3)
        assert [(r.user_id, r.items) for r in batch.rows] == [("alice", ["song"]), ("bob", ["film"])]


class TestRecommendationFile:
    def test_csv_layout(self):
        z_u, z_v, Q1 = np.array([[1.0]]), np.array([[2.0], [1.0], [3.0]]), np.eye(1)
        text = as_bytes(generate_topk(z_u, z_v, Q1, [np.array([0])], 2)).decode()
        assert text == "user_id,rank,item_id,score\n0,1,2,3.000000\n0,2,1,1.000000\n"

    @pytest.mark.parametrize("name", ["recs.csv", "recs.csv.gz"])
    def test_round_trip_and_stable_bytes(self, tmp_path, name):
        z_u, z_v, Q1, seen = random_embeddings(10, 8)
        batch = generate_topk(z_u, z_v, Q1, seen, 3)
        a, b = tmp_path / ("a_" + name), tmp_path / ("b_" + name)
        write_recommendations(batch, str(a))
        write_recommendations(batch, str(b))
        assert a.read_bytes() == b.read_bytes()
        back = read_recommendations(str(a))
        assert [r.items for r in back.rows] == [r.items for r in batch.rows]

    def test_unwritable_path_names_file(self, tmp_path):
        batch = generate_topk(*random_embeddings(1, 3)[:3], [np.array([], dtype=int)], 1)
        with pytest.raises(OSError, match="missing"):
            write_recommendations(batch, str(tmp_path / "missing" / "x.csv"))


def make_checkpoint(seed=0, n_layers=2):
    g = build_graph([InteractionRecord(f"u{i % 3}", f"i{i}", "r", i, 1.0 + i) for i in range(6)])
    h = Hyperparams(embed_dim=3, final_dim=2, n_layers=n_layers, seed=seed)
    return checkpoint.Checkpoint(h, g, init_params(g, h), {"best_epoch": 4})


class TestCheckpoint:
    @pytest.mark.parametrize("n_layers", [0, 1, 2])
    def test_round_trip(self, n_layers):
        ck = make_checkpoint(n_layers=n_layers)
        back = checkpoint.loads(checkpoint.dumps(ck))
        assert back.hyper == ck.hyper and back.meta == ck.meta
        assert back.graph.user_index.keys == ck.graph.user_index.keys
        np.testing.assert_array_equal(back.graph.edge_weights, ck.graph.edge_weights)
        for (na, a), (nb, b) in zip(ck.params.named(), back.params.named()):
            assert na == nb
            np.testing.assert_array_equal(a, b)
        assert checkpoint.dumps(back) == checkpoint.dumps(ck)

    def test_bytes_deterministic(self):
        assert checkpoint.dumps(make_checkpoint()) == checkpoint.dumps(make_checkpoint())

    def test_file_round_trip(self, tmp_path):
        path = str(tmp_path / "ck.bin")
        checkpoint.save(make_checkpoint(), path)
        assert checkpoint.load(path).meta == {"best_epoch": 4}

    @pytest.mark.parametrize(
        "mangle", [lambda b: b"NOTACKPT" + b[8:], lambda b: b[:-3], lambda b: b + b"\0", lambda b: b[:12]]
    )
    def test_corruption_detected(self, mangle):
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(mangle(checkpoint.dumps(make_checkpoint())))
