"""Self-contained binary checkpoints.

Layout::

    b"SAGCKPT1"                      magic
    uint64 little-endian             header length N
    N bytes                          UTF-8 JSON header (sorted keys)
    raw little-endian arrays         in header order, no padding

The header carries hyperparameters, the user/item key maps, and for every
array its name, dtype and shape. The training graph's edges are stored so
that evaluation and recommendation can rebuild seen-item sets. Writing the
same state twice gives identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from sagittarius.data import BipartiteGraph, IdIndex
from sagittarius.model import Hyperparams, ModelParams

MAGIC = b"SAGCKPT1"
_DTYPES = {"f8": "<f8", "i8": "<i8"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    hyper: Hyperparams
    graph: BipartiteGraph
    params: ModelParams
    meta: dict = field(default_factory=dict)


def _arrays(ckpt: Checkpoint):
    for name, arr in ckpt.params.named():
        yield name, np.ascontiguousarray(arr, dtype="<f8"), "f8"
    yield "graph.edge_users", np.ascontiguousarray(ckpt.graph.edge_users, dtype="<i8"), "i8"
    yield "graph.edge_items", np.ascontiguousarray(ckpt.graph.edge_items, dtype="<i8"), "i8"
    yield "graph.edge_weights", np.ascontiguousarray(ckpt.graph.edge_weights, dtype="<f8"), "f8"


def dumps(ckpt: Checkpoint) -> bytes:
    arrays = list(_arrays(ckpt))
    header = {
        "format": 1,
        "hyperparams": ckpt.hyper.to_dict(),
        "user_keys": ckpt.graph.user_index.keys,
        "item_keys": ckpt.graph.item_index.keys,
        "meta": ckpt.meta,
        "arrays": [{"name": n, "dtype": dt, "shape": list(a.shape)} for n, a, dt in arrays],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<Q", len(head)), head] + [a.tobytes() for _, a, _ in arrays])


def loads(blob: bytes) -> Checkpoint:
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(blob) < len(MAGIC) + 8:
        raise CheckpointError("truncated checkpoint header")
    try:
        return _decode(blob)
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc!r}") from None


def _decode(blob: bytes) -> Checkpoint:
    pos = len(MAGIC)
    (n,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    try:
        header = json.loads(blob[pos : pos + n].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    pos += n
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = pos + count * dtype.itemsize
        if end > len(blob):
            raise CheckpointError(f"truncated checkpoint while reading {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(blob[pos:end], dtype=dtype).reshape(entry["shape"]).astype(dtype.newbyteorder("="))
        pos = end
    if pos != len(blob):
        raise CheckpointError("trailing bytes after checkpoint arrays")
    graph = BipartiteGraph(
        IdIndex(header["user_keys"]),
        IdIndex(header["item_keys"]),
        arrays.pop("graph.edge_users"),
        arrays.pop("graph.edge_items"),
        arrays.pop("graph.edge_weights"),
    )
    return Checkpoint(Hyperparams(**header["hyperparams"]), graph, ModelParams.from_named(arrays), header["meta"])


def save(ckpt: Checkpoint, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(ckpt))


def load(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads(fh.read())
