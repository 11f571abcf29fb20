import io

import pytest

from sagittarius.data import (
    BehaviorScoreMap,
    DataError,
    IdIndex,
    InteractionRecord,
    build_graph,
    build_sequences,
    parse_interactions,
    split_dataset,
)


def rec(u, i, score=1.0, ts=0, behavior=None):
    return InteractionRecord(u, i, behavior or str(score), ts, score)


class TestParse:
    def test_movielens_line(self):
        out = parse_interactions(b"196\t242\t3\t881250949\n", "movielens_tab", BehaviorScoreMap.rating_levels())
        assert out == [InteractionRecord("196", "242", "3", 881250949, 3.0)]

    def test_half_star_rating(self):
        out = parse_interactions("1\t2\t3.5\t10\n", "movielens_tab", BehaviorScoreMap.rating_levels())
        assert out[0].score == 3.5

    def test_empty_stream(self):
        assert parse_interactions(io.BytesIO(b""), "movielens_tab", BehaviorScoreMap.rating_levels()) == []
        assert parse_interactions(io.BytesIO(b""), "generic_csv", BehaviorScoreMap({"x": 1})) == []

    def test_csv_share(self):
        text = "user_id,item_id,behavior,timestamp\nu1,v9,share,17\n"
        out = parse_interactions(io.StringIO(text), "generic_csv", BehaviorScoreMap({"share": 4.0}))
        assert out == [InteractionRecord("u1", "v9", "share", 17, 4.0)]

    def test_malformed_line_reports_line_number(self):
        with pytest.raises(DataError, match="line 2"):
            parse_interactions(b"1\t2\t3\t4\n1\t2\t3\n", "movielens_tab", BehaviorScoreMap.rating_levels())

    def test_unknown_behavior_named(self):
        text = "user_id,item_id,behavior,timestamp\nu1,v1,like,1\n"
        with pytest.raises(DataError, match="'like'"):
            parse_interactions(text, "generic_csv", BehaviorScoreMap({"share": 4.0}))

    def test_bad_header(self):
        with pytest.raises(DataError, match="header"):
            parse_interactions("user,item,behavior,ts\n", "generic_csv", BehaviorScoreMap({"a": 1}))

    def test_negative_timestamp(self):
        with pytest.raises(DataError, match="negative"):
            parse_interactions("1\t2\t3\t-5\n", "movielens_tab", BehaviorScoreMap.rating_levels())


class TestScoreMap:
    def test_rejects_non_positive(self):
        with pytest.raises(DataError):
            BehaviorScoreMap({"skip": 0.0})

    def test_unknown_lookup_is_error(self):
        with pytest.raises(DataError):
            BehaviorScoreMap({"a": 1.0})["b"]


class TestBuildGraph:
    def test_single_record(self):
        g = build_graph([rec("u1", "i1", 2.5)])
        assert (g.n_users, g.n_items, g.n_edges) == (1, 1, 1)
        assert g.edge_weights.tolist() == [2.5]
        assert g.user_degrees.tolist() == [1] and g.item_degrees.tolist() == [1]

    def test_duplicate_pair_keeps_max(self):
        g = build_graph([rec("u1", "i1", 1.0), rec("u1", "i1", 4.0)])
        assert g.n_edges == 1
        assert g.edge_weights.tolist() == [4.0]

    def test_degrees(self):
        g = build_graph([rec("u1", "i1"), rec("u1", "i2"), rec("u2", "i1")])
        assert g.user_degrees.tolist() == [2, 1]
        assert g.item_degrees.tolist() == [2, 1]

    def test_first_appearance_ids(self):
        g = build_graph([rec("b", "y"), rec("a", "x"), rec("b", "x")])
        assert g.user_index.keys == ["b", "a"]
        assert g.item_index.keys == ["y", "x"]

    def test_adjacency_views_agree(self):
        g = build_graph([rec("u1", "i1", 2.0), rec("u1", "i2", 3.0), rec("u2", "i1", 5.0)])
        from_users = {(u, v, w) for u in range(g.n_users) for v, w in g.user_adjacency(u)}
        from_items = {(u, v, w) for v in range(g.n_items) for u, w in g.item_adjacency(v)}
        assert from_users == from_items

    def test_preset_index_keeps_cold_items(self):
        items = IdIndex(["cold", "i1"])
        g = build_graph([rec("u1", "i1")], item_index=items)
        assert g.n_items == 2 and g.item_degrees.tolist() == [0, 1]

    def test_empty_is_error(self):
        with pytest.raises(DataError):
            build_graph([])


class TestSplit:
    records = [rec(f"u{i}", f"i{i}", ts=i) for i in range(10)]

    def test_sizes(self):
        s = split_dataset(self.records, (0.7, 0.1, 0.2), seed=3)
        assert (len(s.train), len(s.validation), len(s.test)) == (7, 1, 2)

    def test_deterministic(self):
        a = split_dataset(self.records, seed=11)
        b = split_dataset(self.records, seed=11)
        assert repr(a) == repr(b)

    def test_seed_changes_partition(self):
        many = [rec(f"u{i}", "x", ts=i) for i in range(100)]
        assert split_dataset(many, seed=1).train != split_dataset(many, seed=2).train

    def test_too_few(self):
        with pytest.raises(DataError):
            split_dataset(self.records[:2])

    def test_bad_ratios(self):
        with pytest.raises(DataError):
            split_dataset(self.records, (0.5, 0.1, 0.2))


class TestSequences:
    def test_sorted_by_time(self):
        recs = [rec("u", "a", ts=5), rec("u", "b", ts=1), rec("u", "c", ts=3)]
        items = IdIndex(["a", "b", "c"])
        (seq,) = build_sequences(recs, 10, items)
        assert [items.key(i) for i in seq.item_ids] == ["b", "c", "a"]

    def test_single_interaction_dropped(self):
        assert build_sequences([rec("u", "a")], 5) == []

    def test_truncation_keeps_latest(self):
        recs = [rec("u", f"i{t}", ts=t) for t in (6, 0, 5, 1, 4, 2, 3)]
        items = IdIndex(f"i{t}" for t in range(7))
        (seq,) = build_sequences(recs, 5, items)
        assert [items.key(i) for i in seq.item_ids] == ["i2", "i3", "i4", "i5", "i6"]

    def test_ties_keep_input_order(self):
        recs = [rec("u", "x", ts=1), rec("u", "y", ts=1)]
        items = IdIndex(["y", "x"])
        (seq,) = build_sequences(recs, 5, items)
        assert seq.item_ids == (1, 0)
