"""Interaction ingestion, behavior scoring, graph construction and splits."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

FORMATS = ("movielens_tab", "generic_csv")
CSV_HEADER = ["user_id", "item_id", "behavior", "timestamp"]


class DataError(ValueError):
    """Raised for malformed interaction data or inconsistent inputs."""


class BehaviorScoreMap:
    """Strict mapping from behavior label to a positive preference score."""

    def __init__(self, entries: Mapping[str, float]):
        clean = {}
        for label, score in entries.items():
            score = float(score)
            if not np.isfinite(score) or score <= 0:
                raise DataError(f"behavior {label!r} has non-positive score {score}")
            clean[str(label)] = score
        self.entries: dict[str, float] = clean

    @classmethod
    def rating_levels(cls, levels: Iterable[float] | None = None) -> "BehaviorScoreMap":
        """Identity map over rating strings, e.g. ``"3" -> 3.0``.

        Both integer ("4") and half-step ("3.5") spellings are registered.
        """
        if levels is None:
            levels = np.arange(1, 11) / 2.0
        entries = {}
        for lv in levels:
            lv = float(lv)
            entries[repr(lv)] = lv
            if lv.is_integer():
                entries[str(int(lv))] = lv
        return cls(entries)

    def __getitem__(self, label: str) -> float:
        try:
            return self.entries[label]
        except KeyError:
            raise DataError(f"unknown behavior label {label!r}") from None

    def __contains__(self, label: str) -> bool:
        return label in self.entries

    def __eq__(self, other) -> bool:
        return isinstance(other, BehaviorScoreMap) and other.entries == self.entries

    def __repr__(self) -> str:
        return f"BehaviorScoreMap({self.entries!r})"


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    behavior: str
    timestamp: int
    score: float


def _parse_timestamp(raw: str, lineno: int) -> int:
    try:
        ts = int(float(raw))
    except ValueError:
        raise DataError(f"line {lineno}: bad timestamp {raw!r}") from None
    if ts < 0:
        raise DataError(f"line {lineno}: negative timestamp {ts}")
    return ts


def parse_interactions(
    source: IO[bytes] | IO[str] | bytes | str,
    format: str,
    score_map: BehaviorScoreMap,
) -> list[InteractionRecord]:
    """Parse an interaction log.

    ``movielens_tab`` lines are ``user<TAB>item<TAB>rating<TAB>timestamp`` with
    the rating string used as the behavior label. ``generic_csv`` requires the
    header ``user_id,item_id,behavior,timestamp``.
    """
    if format not in FORMATS:
        raise DataError(f"unknown format {format!r}; expected one of {FORMATS}")
    if isinstance(source, (bytes, str)):
        text = source.decode("utf-8") if isinstance(source, bytes) else source
    else:
        raw = source.read()
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    lines = text.splitlines()

    records: list[InteractionRecord] = []
    if format == "movielens_tab":
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\r\n").split("\t")
            if len(parts) != 4 or not all(parts):
                raise DataError(f"line {lineno}: expected 4 tab-separated fields, got {line!r}")
            user, item, behavior, ts = parts
            records.append(
                InteractionRecord(user, item, behavior, _parse_timestamp(ts, lineno), score_map[behavior])
            )
        return records

    if not lines:
        return records
    reader = csv.reader(io.StringIO("\n".join(lines)))
    header = [h.strip() for h in next(reader)]
    if header != CSV_HEADER:
        raise DataError(f"line 1: expected header {','.join(CSV_HEADER)}, got {','.join(header)}")
    for lineno, row in enumerate(reader, start=2):
        if not row or not any(cell.strip() for cell in row):
            continue
        if len(row) != 4:
            raise DataError(f"line {lineno}: expected 4 comma-separated fields, got {len(row)}")
        user, item, behavior, ts = (cell.strip() for cell in row)
        if not user or not item or not behavior:
            raise DataError(f"line {lineno}: empty field")
        records.append(
            InteractionRecord(user, item, behavior, _parse_timestamp(ts, lineno), score_map[behavior])
        )
    return records


def read_interactions(path: str, format: str, score_map: BehaviorScoreMap) -> list[InteractionRecord]:
    with open(path, "rb") as fh:
        return parse_interactions(fh, format, score_map)


class IdIndex:
    """Bidirectional map between external string keys and dense integer ids."""

    def __init__(self, keys: Iterable[str] = ()):
        self.keys: list[str] = []
        self.ids: dict[str, int] = {}
        for key in keys:
            self.add(key)

    def add(self, key: str) -> int:
        idx = self.ids.get(key)
        if idx is None:
            idx = len(self.keys)
            self.ids[key] = idx
            self.keys.append(key)
        return idx

    def __len__(self) -> int:
        return len(self.keys)

    def __getitem__(self, key: str) -> int:
        return self.ids[key]

    def get(self, key: str, default=None):
        return self.ids.get(key, default)

    def key(self, idx: int) -> str:
        return self.keys[idx]


@dataclass
class BipartiteGraph:
    """Deduplicated weighted user-item graph.

    Edges are stored once, sorted by (user, item), as parallel arrays
    ``edge_users``, ``edge_items`` and ``edge_weights``; the per-user and
    per-item adjacency lists are views derived from them.
    """

    user_index: IdIndex
    item_index: IdIndex
    edge_users: np.ndarray
    edge_items: np.ndarray
    edge_weights: np.ndarray
    user_degrees: np.ndarray = field(init=False)
    item_degrees: np.ndarray = field(init=False)

    def __post_init__(self):
        self.edge_users = np.asarray(self.edge_users, dtype=np.int64)
        self.edge_items = np.asarray(self.edge_items, dtype=np.int64)
        self.edge_weights = np.asarray(self.edge_weights, dtype=np.float64)
        order = np.lexsort((self.edge_items, self.edge_users))
        self.edge_users = self.edge_users[order]
        self.edge_items = self.edge_items[order]
        self.edge_weights = self.edge_weights[order]
        if np.any(self.edge_weights <= 0):
            raise DataError("edge weights must be positive")
        self.user_degrees = np.bincount(self.edge_users, minlength=self.n_users).astype(np.int64)
        self.item_degrees = np.bincount(self.edge_items, minlength=self.n_items).astype(np.int64)
        self._user_ptr = np.concatenate([[0], np.cumsum(self.user_degrees)])
        self._edge_set = None

    @property
    def n_users(self) -> int:
        return len(self.user_index)

    @property
    def n_items(self) -> int:
        return len(self.item_index)

    @property
    def n_edges(self) -> int:
        return len(self.edge_users)

    def user_items(self, u: int) -> np.ndarray:
        lo, hi = self._user_ptr[u], self._user_ptr[u + 1]
        return self.edge_items[lo:hi]

    def user_adjacency(self, u: int) -> list[tuple[int, float]]:
        lo, hi = self._user_ptr[u], self._user_ptr[u + 1]
        return list(zip(self.edge_items[lo:hi].tolist(), self.edge_weights[lo:hi].tolist()))

    def item_adjacency(self, v: int) -> list[tuple[int, float]]:
        mask = self.edge_items == v
        return list(zip(self.edge_users[mask].tolist(), self.edge_weights[mask].tolist()))

    def has_edge(self, u: int, v: int) -> bool:
        items = self.user_items(u)
        pos = np.searchsorted(items, v)
        return bool(pos < len(items) and items[pos] == v)

    def seen_sets(self) -> list[np.ndarray]:
        return [self.user_items(u) for u in range(self.n_users)]

    def edges(self):
        """Yield ``(user_key, item_key, weight)`` triples in edge order."""
        for u, v, w in zip(self.edge_users.tolist(), self.edge_items.tolist(), self.edge_weights.tolist()):
            yield self.user_index.key(u), self.item_index.key(v), w

    def with_unit_weights(self) -> "BipartiteGraph":
        return BipartiteGraph(
            self.user_index, self.item_index, self.edge_users, self.edge_items, np.ones(self.n_edges)
        )


def build_graph(
    records: Sequence[InteractionRecord],
    user_index: IdIndex | None = None,
    item_index: IdIndex | None = None,
) -> BipartiteGraph:
    """Build the weighted bipartite graph; duplicate pairs keep the max score.

    Pre-built indexes may be passed so that users/items unseen in ``records``
    still own a dense id (e.g. training graphs indexed over the whole log).
    """
    if not records:
        raise DataError("cannot build a graph from zero records")
    user_index = user_index if user_index is not None else IdIndex()
    item_index = item_index if item_index is not None else IdIndex()
    weights: dict[tuple[int, int], float] = {}
    for rec in records:
        key = (user_index.add(rec.user_id), item_index.add(rec.item_id))
        prev = weights.get(key)
        if prev is None or rec.score > prev:
            weights[key] = rec.score
    pairs = np.array(list(weights.keys()), dtype=np.int64).reshape(-1, 2)
    return BipartiteGraph(user_index, item_index, pairs[:, 0], pairs[:, 1], np.fromiter(weights.values(), float))


@dataclass
class DatasetSplit:
    train: list[InteractionRecord]
    validation: list[InteractionRecord]
    test: list[InteractionRecord]
    seed: int


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def split_dataset(
    records: Sequence[InteractionRecord],
    ratios: Sequence[float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> DatasetSplit:
    """Uniform random partition of records into train/validation/test."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must be three positive numbers summing to 1, got {tuple(ratios)}")
    if len(records) < 3:
        raise DataError(f"need at least 3 records to split, got {len(records)}")
    n_train, n_val, _ = split_sizes(len(records), ratios)
    perm = np.random.default_rng(seed).permutation(len(records))
    train = [records[i] for i in np.sort(perm[:n_train])]
    val = [records[i] for i in np.sort(perm[n_train : n_train + n_val])]
    test = [records[i] for i in np.sort(perm[n_train + n_val :])]
    return DatasetSplit(train, val, test, seed)


@dataclass(frozen=True)
class InteractionSequence:
    user_id: str
    item_ids: tuple[int, ...]


def build_sequences(
    records: Sequence[InteractionRecord],
    max_seq_len: int,
    item_index: IdIndex | None = None,
) -> list[InteractionSequence]:
    """Per-user time-ordered item sequences, keeping the most recent items.

    Ties in timestamp keep input order. Users are emitted in first-appearance
    order. Items missing from ``item_index`` are added to it.
    """
    if max_seq_len < 2:
        raise DataError("max_seq_len must be at least 2")
    item_index = item_index if item_index is not None else IdIndex()
    per_user: dict[str, list[tuple[int, int, int]]] = {}
    for pos, rec in enumerate(records):
        per_user.setdefault(rec.user_id, []).append((rec.timestamp, pos, item_index.add(rec.item_id)))
    out = []
    for user, events in per_user.items():
        if len(events) < 2:
            continue
        events.sort()
        items = tuple(e[2] for e in events[-max_seq_len:])
        out.append(InteractionSequence(user, items))
    return out
