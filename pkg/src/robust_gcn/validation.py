"""Input checks shared by the estimator API, the harness and the CLI."""
from __future__ import annotations

import numbers

import numpy as np
import scipy.sparse as sp

from .aggregators import AggregationKind
from .graph import FeatureMatrix, Graph, GraphError, LabelVector


def check_graph(graph, num_nodes: int | None = None, self_loops: bool | None = None) -> Graph:
    """Return ``graph`` as a :class:`Graph`; accepts an ``(m, 2)`` edge array with ``num_nodes``."""
    if not isinstance(graph, Graph):
        if num_nodes is None:
            raise GraphError("num_nodes is required when passing a raw edge array")
        graph = Graph(int(num_nodes), np.asarray(graph, dtype=np.int64).reshape(-1, 2))
    if num_nodes is not None and graph.num_nodes != num_nodes:
        raise GraphError(f"graph has {graph.num_nodes} nodes, expected {num_nodes}")
    if self_loops is True and not graph.self_loops_included:
        raise GraphError("graph must include self-loops")
    if self_loops is False and graph.self_loops_included:
        raise GraphError("graph must not include self-loops")
    return graph


def check_features(x, num_nodes: int | None = None) -> FeatureMatrix:
    """Coerce dense or sparse 2-D input into a finite :class:`FeatureMatrix`."""
    if isinstance(x, FeatureMatrix):
        fm = x
    elif sp.issparse(x):
        fm = FeatureMatrix(sp.csr_matrix(x, dtype=np.float64))
    else:
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {arr.shape}")
        fm = FeatureMatrix.from_dense(arr)
    if not np.all(np.isfinite(fm.matrix.data)):
        raise ValueError("features contain non-finite values")
    if num_nodes is not None and fm.num_nodes != num_nodes:
        raise ValueError(f"features have {fm.num_nodes} rows, expected {num_nodes}")
    return fm


def check_labels(y, num_nodes: int | None = None, num_classes: int | None = None) -> LabelVector:
    if isinstance(y, LabelVector):
        lv = y
    else:
        arr = np.asarray(y)
        if arr.ndim != 1:
            raise ValueError("labels must be 1-D")
        if arr.size and not np.issubdtype(arr.dtype, np.integer):
            if not np.all(np.equal(np.mod(arr, 1), 0)):
                raise ValueError("labels must be integer class ids")
        arr = arr.astype(np.int64)
        k = int(arr.max()) + 1 if num_classes is None and arr.size else num_classes
        lv = LabelVector(arr, k)
    if num_nodes is not None and len(lv.labels) != num_nodes:
        raise ValueError(f"labels have length {len(lv.labels)}, expected {num_nodes}")
    return lv


def check_node_ids(ids, num_nodes: int, name: str = "node ids", allow_empty: bool = False) -> np.ndarray:
    """Sorted unique int64 array of in-range node ids."""
    arr = np.asarray(ids, dtype=np.int64).ravel()
    if arr.size == 0 and not allow_empty:
        raise ValueError(f"{name} is empty")
    if arr.size and (arr.min() < 0 or arr.max() >= num_nodes):
        raise ValueError(f"{name} out of range [0, {num_nodes})")
    uniq = np.unique(arr)
    if uniq.size != arr.size:
        raise ValueError(f"{name} contain duplicates")
    return uniq


def check_alpha(alpha) -> float:
    if not isinstance(alpha, numbers.Real) or isinstance(alpha, bool):
        raise ValueError(f"alpha must be a real number, got {alpha!r}")
    alpha = float(alpha)
    if not 0.0 < alpha < 0.5:
        raise ValueError(f"alpha must lie in (0, 0.5), got {alpha}")
    return alpha


def check_aggregation(agg, alpha=None) -> AggregationKind:
    if isinstance(agg, AggregationKind):
        return agg
    if alpha is not None:
        check_alpha(alpha)
    return AggregationKind.parse(agg, alpha)


def check_budget(budget) -> int:
    if isinstance(budget, bool) or not isinstance(budget, numbers.Integral):
        raise ValueError(f"budget must be an integer, got {budget!r}")
    if not 1 <= int(budget) <= 5:
        raise ValueError(f"budget must be in 1..5, got {budget}")
    return int(budget)


def check_random_state(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
