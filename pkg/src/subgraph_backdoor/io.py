"""Dataset bundles and binary feature blobs.

A bundle is a directory holding ``edges.tsv``, ``features.bin``,
``labels.tsv`` and optionally ``split.tsv`` and ``origin.tsv``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import GraphFormatError
from .graph import Graph, NodeSplit

FEATURE_MAGIC = b"GDFM"
_HEADER = struct.Struct("<4sII")


def write_matrix(path, matrix) -> None:
    matrix = np.asarray(matrix)
    rows, cols = matrix.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, rows, cols))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise GraphFormatError(f"{path}: unexpected EOF")
    magic, rows, cols = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise GraphFormatError(f"{path}: bad magic {magic!r}")
    need = _HEADER.size + 4 * rows * cols
    if len(raw) < need:
        raise GraphFormatError(f"{path}: unexpected EOF")
    if len(raw) > need:
        raise GraphFormatError(f"{path}: trailing bytes after {rows}x{cols} matrix")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size, count=rows * cols)
    out = data.reshape(rows, cols).astype(np.float64)
    if not np.all(np.isfinite(out)):
        raise GraphFormatError(f"{path}: non-finite feature")
    return out


def _read_pairs(path, dtype=int):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise GraphFormatError(f"{path}:{lineno}: expected two tab-separated fields")
            try:
                rows.append((int(parts[0]), dtype(parts[1])))
            except ValueError as exc:
                raise GraphFormatError(f"{path}:{lineno}: {exc}") from None
    return rows


def save_graph(g: Graph, path, split: NodeSplit | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "edges.tsv", "w") as fh:
        for u, v in g.edges:
            fh.write(f"{u}\t{v}\n")
    write_matrix(path / "features.bin", g.features)
    if g.labels is not None:
        with open(path / "labels.tsv", "w") as fh:
            for v, y in enumerate(g.labels):
                if y >= 0:
                    fh.write(f"{v}\t{y}\n")
    if g.origin is not None and g.trigger_mask.any():
        with open(path / "origin.tsv", "w") as fh:
            for v in np.flatnonzero(g.trigger_mask):
                c, j, inst = g.origin[v]
                fh.write(f"{v}\t{c}\t{j}\t{inst}\n")
    if split is not None:
        save_split(split, path / "split.tsv")


def save_split(split: NodeSplit, path) -> None:
    rows = sorted((int(v), role) for role, nodes in split.sets().items() for v in nodes)
    with open(path, "w") as fh:
        for v, role in rows:
            fh.write(f"{v}\t{role}\n")


def load_split(path, num_nodes=None) -> NodeSplit:
    buckets = {role: [] for role in NodeSplit.ROLES}
    for v, role in _read_pairs(path, str):
        if role not in buckets:
            raise GraphFormatError(f"{path}: unknown role {role!r}")
        buckets[role].append(v)
    split = NodeSplit(*(np.array(sorted(buckets[r]), dtype=np.int64) for r in NodeSplit.ROLES))
    try:
        split.validate(num_nodes)
    except ValueError as exc:
        raise GraphFormatError(f"{path}: {exc}") from None
    return split


def load_dataset(path):
    """Load a bundle; returns ``(graph, split_or_None)``."""
    path = Path(path)
    if not (path / "features.bin").exists():
        raise GraphFormatError(f"{path}: missing features.bin")
    features = read_matrix(path / "features.bin")
    n = features.shape[0]

    edges = np.array(_read_pairs(path / "edges.tsv"), dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise GraphFormatError(f"{path}: edge endpoint outside 0..{n - 1} (dimension mismatch)")

    labels = None
    if (path / "labels.tsv").exists():
        labels = np.full(n, -1, dtype=np.int64)
        for v, y in _read_pairs(path / "labels.tsv"):
            if not 0 <= v < n:
                raise GraphFormatError(f"{path}: label for node {v} outside 0..{n - 1} (dimension mismatch)")
            labels[v] = y

    origin = None
    if (path / "origin.tsv").exists():
        origin = np.full((n, 3), -1, dtype=np.int64)
        with open(path / "origin.tsv") as fh:
            for line in fh:
                if line.strip():
                    v, c, j, inst = map(int, line.split("\t"))
                    origin[v] = (c, j, inst)

    g = Graph.from_edges(n, edges, features, labels, origin)
    split = load_split(path / "split.tsv", n) if (path / "split.tsv").exists() else None
    return g, split
