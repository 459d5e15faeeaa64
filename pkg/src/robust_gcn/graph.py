"""Graph containers, dataset bundles and per-node statistics.

A dataset bundle is a directory with ``meta.json``, ``edges.tsv``,
``features.tsv``, ``labels.tsv`` and an optional ``splits.json``. Edge files
list each undirected edge once and never contain self-loops; self-loops are
added explicitly with :func:`add_self_loops` before a model sees the graph.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

__all__ = [
    "BundleError",
    "GraphError",
    "Graph",
    "FeatureMatrix",
    "LabelVector",
    "Split",
    "load_bundle",
    "write_bundle",
    "largest_connected_component",
    "add_self_loops",
    "gcn_edge_weights",
    "purity",
    "purity_all",
    "random_split",
    "row_normalize",
]


class GraphError(ValueError):
    """Invalid graph structure or graph operation."""


class BundleError(ValueError):
    """Malformed dataset bundle. The message names the file and line."""


def _canonical_edges(num_nodes, edges):
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if arr.size and (arr.min() < 0 or arr.max() >= num_nodes):
        raise GraphError(f"node id out of range [0, {num_nodes})")
    if np.any(arr[:, 0] == arr[:, 1]):
        raise GraphError("edge list contains a self-loop")
    arr = np.sort(arr, axis=1)
    order = np.lexsort((arr[:, 1], arr[:, 0]))
    arr = arr[order]
    if len(arr) > 1 and np.any(np.all(arr[1:] == arr[:-1], axis=1)):
        raise GraphError("edge list contains a duplicate edge")
    return arr


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph in compressed sparse row form.

    ``edges`` holds each non-self edge once as ``(u, v)`` with ``u < v``.
    When ``self_loops_included`` is set, every node's CSR row also lists the
    node itself, so ``degrees()`` returns ``|N_v|`` as used by GCN layers.
    """

    num_nodes: int
    edges: np.ndarray
    self_loops_included: bool = False
    csr_offsets: np.ndarray = field(init=False, repr=False, compare=False)
    csr_targets: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.num_nodes < 0:
            raise GraphError("num_nodes must be non-negative")
        edges = _canonical_edges(self.num_nodes, self.edges)
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        n = self.num_nodes
        src = np.concatenate([edges[:, 0], edges[:, 1]])
        dst = np.concatenate([edges[:, 1], edges[:, 0]])
        if self.self_loops_included:
            loop = np.arange(n, dtype=np.int64)
            src = np.concatenate([src, loop])
            dst = np.concatenate([dst, loop])
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=n), out=offsets[1:])
        offsets.setflags(write=False)
        dst.setflags(write=False)
        object.__setattr__(self, "csr_offsets", offsets)
        object.__setattr__(self, "csr_targets", dst)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.num_nodes == other.num_nodes
            and self.self_loops_included == other.self_loops_included
            and np.array_equal(self.edges, other.edges)
        )

    def __hash__(self):
        return hash((self.num_nodes, self.self_loops_included, self.edges.tobytes()))

    @property
    def num_edges(self) -> int:
        """Number of undirected non-self edges."""
        return int(len(self.edges))

    def degrees(self) -> np.ndarray:
        return np.diff(self.csr_offsets)

    def neighbors(self, v: int) -> np.ndarray:
        return self.csr_targets[self.csr_offsets[v] : self.csr_offsets[v + 1]]

    def has_edge(self, u: int, v: int) -> bool:
        row = self.neighbors(u)
        i = np.searchsorted(row, v)
        return bool(i < len(row) and row[i] == v)

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(u), int(v)) for u, v in self.edges}

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency matching the CSR arrays."""
        n = self.num_nodes
        data = np.ones(len(self.csr_targets))
        return sp.csr_matrix((data, self.csr_targets, self.csr_offsets), shape=(n, n))

    def without_self_loops(self) -> "Graph":
        if not self.self_loops_included:
            return self
        return Graph(self.num_nodes, self.edges, self_loops_included=False)

    def with_edges(self, edges) -> "Graph":
        return Graph(self.num_nodes, edges, self_loops_included=self.self_loops_included)


@dataclass(frozen=True)
class FeatureMatrix:
    """Per-node feature rows stored as a CSR matrix."""

    matrix: sp.csr_matrix

    def __post_init__(self):
        m = sp.csr_matrix(self.matrix, dtype=np.float64)
        m.sum_duplicates()
        m.sort_indices()
        if not np.all(np.isfinite(m.data)):
            raise GraphError("feature matrix contains non-finite entries")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_dense(cls, rows) -> "FeatureMatrix":
        return cls(sp.csr_matrix(np.asarray(rows, dtype=np.float64)))

    @property
    def num_nodes(self) -> int:
        return self.matrix.shape[0]

    @property
    def num_features(self) -> int:
        return self.matrix.shape[1]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def row(self, v: int) -> np.ndarray:
        return self.matrix[v].toarray().ravel()

    def take(self, ids) -> "FeatureMatrix":
        return FeatureMatrix(self.matrix[np.asarray(ids)])


@dataclass(frozen=True)
class LabelVector:
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise GraphError(f"label outside [0, {self.num_classes})")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    def take(self, ids) -> "LabelVector":
        return LabelVector(self.labels[np.asarray(ids)], self.num_classes)


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        parts = []
        for name in ("train", "val", "test"):
            ids = np.sort(np.asarray(getattr(self, name), dtype=np.int64).ravel())
            ids.setflags(write=False)
            object.__setattr__(self, name, ids)
            parts.append(ids)
        allids = np.concatenate(parts)
        if len(np.unique(allids)) != len(allids):
            raise GraphError("train/val/test sets overlap")

    def check(self, num_nodes: int) -> None:
        for ids in (self.train, self.val, self.test):
            if ids.size and (ids.min() < 0 or ids.max() >= num_nodes):
                raise GraphError("split references a node outside the graph")


# ---------------------------------------------------------------- bundles


def _lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if line.strip():
                yield lineno, line


def _ints(fields, where):
    try:
        return [int(f) for f in fields]
    except ValueError:
        raise BundleError(f"{where}: expected integers, got {fields!r}") from None


def load_bundle(path) -> tuple[Graph, FeatureMatrix, LabelVector, Split | None]:
    """Read a dataset bundle directory.

    Raises :class:`BundleError` with ``file:line`` context on missing files,
    out-of-range ids, duplicate or self-loop edges, and non-finite features.
    """
    root = Path(path)
    required = ["meta.json", "edges.tsv", "features.tsv", "labels.tsv"]
    for name in required:
        if not (root / name).is_file():
            raise BundleError(f"{root / name}: missing bundle file")
    try:
        meta = json.loads((root / "meta.json").read_text(encoding="utf-8"))
        n = int(meta["num_nodes"])
        n_feat = int(meta["num_features"])
        n_cls = int(meta["num_classes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise BundleError(f"{root / 'meta.json'}: invalid metadata ({exc})") from None

    seen: set[tuple[int, int]] = set()
    edges = []
    for lineno, line in _lines(root / "edges.tsv"):
        where = f"edges.tsv:{lineno}"
        fields = line.split("\t") if "\t" in line else line.split()
        if len(fields) != 2:
            raise BundleError(f"{where}: expected 2 fields, got {len(fields)}")
        u, v = _ints(fields, where)
        if not (0 <= u < n and 0 <= v < n):
            raise BundleError(f"{where}: node id out of range [0, {n})")
        if u == v:
            raise BundleError(f"{where}: self-loop-in-input ({u} {v})")
        key = (min(u, v), max(u, v))
        if key in seen:
            raise BundleError(f"{where}: duplicate edge {key}")
        seen.add(key)
        edges.append(key)

    rows, cols, vals = [], [], []
    seen_feat: set[tuple[int, int]] = set()
    for lineno, line in _lines(root / "features.tsv"):
        where = f"features.tsv:{lineno}"
        fields = line.split("\t")
        if len(fields) != 3:
            raise BundleError(f"{where}: expected 3 fields, got {len(fields)}")
        node, j = _ints(fields[:2], where)
        try:
            val = float(fields[2])
        except ValueError:
            raise BundleError(f"{where}: bad feature value {fields[2]!r}") from None
        if not math.isfinite(val):
            raise BundleError(f"{where}: non-finite feature value")
        if not (0 <= node < n):
            raise BundleError(f"{where}: node id out of range [0, {n})")
        if not (0 <= j < n_feat):
            raise BundleError(f"{where}: feature index out of range [0, {n_feat})")
        if (node, j) in seen_feat:
            raise BundleError(f"{where}: duplicate feature entry ({node}, {j})")
        seen_feat.add((node, j))
        rows.append(node)
        cols.append(j)
        vals.append(val)

    labels = np.full(n, -1, dtype=np.int64)
    for lineno, line in _lines(root / "labels.tsv"):
        where = f"labels.tsv:{lineno}"
        fields = line.split("\t")
        if len(fields) != 2:
            raise BundleError(f"{where}: expected 2 fields, got {len(fields)}")
        node, c = _ints(fields, where)
        if not (0 <= node < n):
            raise BundleError(f"{where}: node id out of range [0, {n})")
        if not (0 <= c < n_cls):
            raise BundleError(f"{where}: class out of range [0, {n_cls})")
        if labels[node] != -1:
            raise BundleError(f"{where}: duplicate label for node {node}")
        labels[node] = c
    missing = np.flatnonzero(labels < 0)
    if missing.size:
        raise BundleError(f"labels.tsv: no label for node {int(missing[0])}")

    split = None
    if (root / "splits.json").is_file():
        try:
            raw = json.loads((root / "splits.json").read_text(encoding="utf-8"))
            split = Split(raw["train"], raw["val"], raw["test"], raw.get("seed"))
            split.check(n)
        except (KeyError, TypeError, ValueError) as exc:
            raise BundleError(f"{root / 'splits.json'}: invalid split ({exc})") from None

    graph = Graph(n, np.array(edges, dtype=np.int64).reshape(-1, 2))
    feats = FeatureMatrix(sp.csr_matrix((vals, (rows, cols)), shape=(n, n_feat)))
    return graph, feats, LabelVector(labels, n_cls), split


def write_bundle(path, name: str, graph: Graph, x: FeatureMatrix, y: LabelVector,
                 split: Split | None = None) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "name": name,
        "num_nodes": graph.num_nodes,
        "num_features": x.num_features,
        "num_classes": y.num_classes,
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    with open(root / "edges.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for u, v in graph.edges:
            fh.write(f"{u}\t{v}\n")
    coo = x.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(root / "features.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for i in order:
            fh.write(f"{coo.row[i]}\t{coo.col[i]}\t{float(coo.data[i])!r}\n")
    with open(root / "labels.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for v, c in enumerate(y.labels):
            fh.write(f"{v}\t{c}\n")
    if split is not None:
        doc = {k: getattr(split, k).tolist() for k in ("train", "val", "test")}
        (root / "splits.json").write_text(json.dumps(doc) + "\n", encoding="utf-8")
    return root


# ------------------------------------------------------------- structure ops


def largest_connected_component(g: Graph, x: FeatureMatrix, y: LabelVector):
    """Restrict graph, features and labels to the largest connected component.

    Ties between equally large components go to the one containing the
    smallest original node id. Returns ``(graph, features, labels, id_map)``
    where ``id_map[new_id] == original_id``; ids keep their relative order.
    """
    if g.num_nodes == 0:
        raise GraphError("empty graph has no connected component")
    _, comp = connected_components(g.without_self_loops().adjacency(), directed=False)
    sizes = np.bincount(comp)
    first = np.full(len(sizes), g.num_nodes, dtype=np.int64)
    np.minimum.at(first, comp, np.arange(g.num_nodes))
    largest = np.flatnonzero(sizes == sizes.max())
    keep = int(largest[np.argmin(first[largest])])
    id_map = np.flatnonzero(comp == keep)
    remap = np.full(g.num_nodes, -1, dtype=np.int64)
    remap[id_map] = np.arange(len(id_map))
    mask = (remap[g.edges[:, 0]] >= 0) & (remap[g.edges[:, 1]] >= 0)
    edges = remap[g.edges[mask]]
    sub = Graph(len(id_map), edges, self_loops_included=g.self_loops_included)
    id_map.setflags(write=False)
    return sub, x.take(id_map), y.take(id_map), id_map


def add_self_loops(g: Graph) -> Graph:
    if g.self_loops_included:
        raise GraphError("graph already has self-loops")
    return Graph(g.num_nodes, g.edges, self_loops_included=True)


def gcn_edge_weights(g: Graph) -> sp.csr_matrix:
    """Symmetric normalisation weights ``1 / sqrt(|N_u| |N_v|)``.

    Returned as a CSR matrix aligned with ``g``'s adjacency, so
    ``W @ H`` is the weighted-mean aggregation of every node.
    """
    if not g.self_loops_included:
        raise GraphError("gcn_edge_weights requires self-loops")
    deg = g.degrees().astype(np.float64)
    inv = 1.0 / np.sqrt(deg)
    rows = np.repeat(np.arange(g.num_nodes), np.diff(g.csr_offsets))
    data = inv[rows] * inv[g.csr_targets]
    n = g.num_nodes
    return sp.csr_matrix((data, g.csr_targets.copy(), g.csr_offsets.copy()), shape=(n, n))


def _two_hop_ball(g: Graph, v: int) -> np.ndarray:
    dist = {v: 0}
    queue = deque([v])
    while queue:
        u = queue.popleft()
        if dist[u] == 2:
            continue
        for w in g.neighbors(u):
            w = int(w)
            if w not in dist:
                dist[w] = dist[u] + 1
                queue.append(w)
    return np.fromiter(dist.keys(), dtype=np.int64)


def purity(g: Graph, y: LabelVector, v: int) -> float:
    """Share of nodes within two hops of ``v`` (``v`` included) sharing its label."""
    if not 0 <= v < g.num_nodes:
        raise GraphError(f"node {v} not in graph")
    ball = _two_hop_ball(g.without_self_loops(), v)
    labels = y.labels
    return float(np.mean(labels[ball] == labels[v]))


def purity_all(g: Graph, y: LabelVector) -> np.ndarray:
    """Vectorised :func:`purity` for every node."""
    a = g.without_self_loops().adjacency() + sp.identity(g.num_nodes, format="csr")
    ball = (a @ a).astype(bool).astype(np.float64).tocsr()
    onehot = sp.csr_matrix(
        (np.ones(len(y)), (np.arange(len(y)), y.labels)), shape=(len(y), y.num_classes)
    )
    same = np.asarray((ball @ onehot)[np.arange(len(y)), y.labels]).ravel()
    size = np.asarray(ball.sum(axis=1)).ravel()
    return same / size


def random_split(num_nodes: int, ratios=(0.1, 0.1, 0.8), seed: int = 0) -> Split:
    """Seeded random train/val/test split.

    Train and validation sizes are ``floor(n * ratio)``; the remainder goes
    to the test set.
    """
    if num_nodes < 3:
        raise GraphError("random_split needs at least 3 nodes")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or not math.isclose(sum(ratios), 1.0):
        raise GraphError(f"ratios must be three non-negative fractions summing to 1, got {ratios}")
    n_train = math.floor(num_nodes * ratios[0] + 1e-9)
    n_val = math.floor(num_nodes * ratios[1] + 1e-9)
    perm = np.random.default_rng(seed).permutation(num_nodes)
    return Split(perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :], seed)


def row_normalize(x: FeatureMatrix) -> FeatureMatrix:
    """Scale every row to unit L1 norm; all-zero rows stay zero."""
    m = x.matrix.copy()
    norms = np.asarray(abs(m).sum(axis=1)).ravel()
    scale = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    return FeatureMatrix(sp.diags(scale) @ m)
