"""Element-wise neighbourhood aggregators and breakdown-point analysis.

Three aggregators are supported:

* weighted mean ``sum_u w_u h_u`` (no renormalisation),
* element-wise median,
* element-wise trimmed mean dropping ``floor(n * alpha)`` values per side.

Median and trimmed mean both average a contiguous window of order
statistics, so they share one implementation driven by
:func:`order_window`. Ties are broken by a stable sort on
``(value, row index)``; gradients are routed to the rows occupying the
window positions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = [
    "AggregationKind",
    "AggregationInput",
    "BreakdownReport",
    "DEFAULT_SCHEDULE",
    "order_window",
    "trim_count",
    "weighted_mean_forward",
    "weighted_mean_backward",
    "median_forward",
    "median_backward",
    "trimmed_mean_forward",
    "trimmed_mean_backward",
    "aggregate",
    "aggregate_backward",
    "SegmentAggregator",
    "theoretical_breakdown",
    "empirical_breakdown",
]

_KINDS = ("mean", "median", "tmean")
_ALIASES = {
    "mean": "mean", "weighted_mean": "mean", "weightedmean": "mean", "gcn": "mean",
    "median": "median",
    "tmean": "tmean", "trimmed_mean": "tmean", "trimmedmean": "tmean",
}
# floor(n * alpha) with decimal alphas such as 0.3 must not lose a unit to
# binary rounding (10 * 0.3 == 2.9999999999999996)
_FLOOR_EPS = 1e-9


@dataclass(frozen=True)
class AggregationKind:
    """Which aggregator a layer uses; ``alpha`` only for the trimmed mean."""

    name: str
    alpha: float | None = None

    def __post_init__(self):
        name = _ALIASES.get(str(self.name).lower())
        if name is None:
            raise ValueError(f"unknown aggregation {self.name!r}; expected one of {_KINDS}")
        object.__setattr__(self, "name", name)
        if name == "tmean":
            if self.alpha is None:
                raise ValueError("trimmed mean requires alpha")
            alpha = float(self.alpha)
            if not 0.0 < alpha < 0.5:
                raise ValueError(f"trimmed-mean alpha must satisfy 0 < alpha < 0.5, got {alpha}")
            object.__setattr__(self, "alpha", alpha)
        else:
            object.__setattr__(self, "alpha", None)

    @classmethod
    def weighted_mean(cls) -> "AggregationKind":
        return cls("mean")

    @classmethod
    def median(cls) -> "AggregationKind":
        return cls("median")

    @classmethod
    def trimmed_mean(cls, alpha: float) -> "AggregationKind":
        return cls("tmean", alpha)

    @classmethod
    def parse(cls, value, alpha: float | None = None) -> "AggregationKind":
        if isinstance(value, AggregationKind):
            return value
        if isinstance(value, dict):
            return cls(value["kind"], value.get("alpha"))
        return cls(value, alpha)

    @property
    def is_order_statistic(self) -> bool:
        return self.name != "mean"

    def to_dict(self) -> dict:
        return {"kind": self.name, "alpha": self.alpha}

    def __str__(self):
        return f"tmean(alpha={self.alpha})" if self.name == "tmean" else self.name


@dataclass(frozen=True)
class AggregationInput:
    """A multiset of row vectors, with optional positive per-row weights."""

    values: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if values.shape[0] == 0:
            raise ValueError("aggregation input must be non-empty")
        object.__setattr__(self, "values", values)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64).ravel()
            if w.shape[0] != values.shape[0]:
                raise ValueError("weights must align 1:1 with rows")
            if np.any(w <= 0):
                raise ValueError("weights must be positive")
            object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.values.shape[0]


def trim_count(n: int, alpha: float) -> int:
    return int(math.floor(n * alpha + _FLOOR_EPS))


def order_window(kind: AggregationKind, n: int) -> tuple[int, int]:
    """0-based inclusive range of sorted positions averaged over ``n`` values."""
    if n < 1:
        raise ValueError("empty aggregation input")
    if kind.name == "median":
        if n % 2:
            return (n - 1) // 2, (n - 1) // 2
        return n // 2 - 1, n // 2
    if kind.name == "tmean":
        g = trim_count(n, kind.alpha)
        return g, n - 1 - g
    raise ValueError("weighted mean has no order window")


def _values(values):
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    if v.ndim != 2 or v.shape[0] == 0:
        raise ValueError("aggregation input must be a non-empty 2-D array")
    return v


def _check_upstream(values, upstream):
    g = np.asarray(upstream, dtype=np.float64).reshape(-1)
    if g.shape[0] != values.shape[1]:
        raise ValueError(f"upstream gradient has length {g.shape[0]}, expected {values.shape[1]}")
    return g


def weighted_mean_forward(values, weights) -> np.ndarray:
    v = _values(values)
    if weights is None:
        raise ValueError("weighted mean requires weights")
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.shape[0] != v.shape[0]:
        raise ValueError("weights must align 1:1 with rows")
    return w @ v


def weighted_mean_backward(values, weights, upstream) -> np.ndarray:
    v = _values(values)
    g = _check_upstream(v, upstream)
    w = np.asarray(weights, dtype=np.float64).ravel()
    return np.outer(w, g)


def _window_forward(kind, values):
    v = _values(values)
    lo, hi = order_window(kind, v.shape[0])
    order = np.argsort(v, axis=0, kind="stable")
    picked = np.take_along_axis(v, order[lo : hi + 1], axis=0)
    return picked.mean(axis=0)


def _window_backward(kind, values, upstream):
    v = _values(values)
    g = _check_upstream(v, upstream)
    lo, hi = order_window(kind, v.shape[0])
    order = np.argsort(v, axis=0, kind="stable")
    grad = np.zeros_like(v)
    cols = np.arange(v.shape[1])
    share = g / (hi - lo + 1)
    for pos in range(lo, hi + 1):
        grad[order[pos], cols] += share
    return grad


def median_forward(values) -> np.ndarray:
    return _window_forward(AggregationKind.median(), values)


def median_backward(values, upstream) -> np.ndarray:
    return _window_backward(AggregationKind.median(), values, upstream)


def trimmed_mean_forward(values, alpha: float) -> np.ndarray:
    return _window_forward(AggregationKind.trimmed_mean(alpha), values)


def trimmed_mean_backward(values, alpha: float, upstream) -> np.ndarray:
    return _window_backward(AggregationKind.trimmed_mean(alpha), values, upstream)


def aggregate(kind: AggregationKind, values, weights=None) -> np.ndarray:
    """Aggregate one neighbourhood. ``weights`` are ignored unless ``kind`` is the mean."""
    if kind.name == "mean":
        return weighted_mean_forward(values, weights)
    return _window_forward(kind, values)


def aggregate_backward(kind: AggregationKind, values, upstream, weights=None) -> np.ndarray:
    if kind.name == "mean":
        return weighted_mean_backward(values, weights, upstream)
    return _window_backward(kind, values, upstream)


# ------------------------------------------------------ graph-wide version


class SegmentAggregator:
    """Aggregate every node's neighbourhood of a CSR graph at once.

    Parameters
    ----------
    offsets, targets : CSR arrays; row ``v`` lists the members of ``N_v``.
    kind : the aggregator.
    weights : CSR-aligned edge weights, required for the weighted mean.

    Order-statistic aggregators bucket destination nodes by degree so each
    bucket is a dense ``(nodes, degree, dim)`` sort.
    """

    # elements per sort chunk; bounds peak memory of the gathered tensor
    chunk_elements = 1 << 22

    def __init__(self, offsets, targets, kind: AggregationKind, weights=None):
        self.kind = kind
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.targets = np.asarray(targets, dtype=np.int64)
        self.num_nodes = len(self.offsets) - 1
        deg = np.diff(self.offsets)
        if np.any(deg == 0):
            raise ValueError("every node needs a non-empty neighbourhood (add self-loops)")
        if kind.name == "mean":
            if weights is None:
                raise ValueError("weighted mean requires edge weights")
            n = self.num_nodes
            self.matrix = sp.csr_matrix((np.asarray(weights, dtype=np.float64),
                                         self.targets, self.offsets), shape=(n, n))
            self.matrix_t = self.matrix.T.tocsr()
        else:
            self.buckets = []
            for d in np.unique(deg):
                rows = np.flatnonzero(deg == d)
                nbr = self.targets[self.offsets[rows][:, None] + np.arange(d)]
                lo, hi = order_window(kind, int(d))
                self.buckets.append((rows, nbr, lo, hi))

    @classmethod
    def from_graph(cls, graph, kind: AggregationKind) -> "SegmentAggregator":
        weights = None
        if kind.name == "mean":
            if not graph.self_loops_included:
                raise ValueError("weighted mean requires a graph with self-loops")
            inv = 1.0 / np.sqrt(graph.degrees().astype(np.float64))
            rows = np.repeat(np.arange(graph.num_nodes), graph.degrees())
            weights = inv[rows] * inv[graph.csr_targets]
        return cls(graph.csr_offsets, graph.csr_targets, kind, weights)

    def forward(self, h, need_grad: bool = False):
        """Return ``(out, cache)``; ``cache`` feeds :meth:`backward`."""
        if self.kind.name == "mean":
            return self.matrix @ h, None
        h = np.asarray(h, dtype=np.float64)
        dim = h.shape[1]
        out = np.empty((self.num_nodes, dim))
        cache = []
        for rows, nbr, lo, hi in self.buckets:
            d = nbr.shape[1]
            step = max(1, self.chunk_elements // max(1, d * dim))
            for s in range(0, len(rows), step):
                r, nb = rows[s : s + step], nbr[s : s + step]
                block = h[nb]
                order = np.argsort(block, axis=1, kind="stable")
                win = order[:, lo : hi + 1, :]
                out[r] = np.take_along_axis(block, win, axis=1).mean(axis=1)
                if need_grad:
                    src = np.take_along_axis(np.broadcast_to(nb[:, :, None], block.shape), win, axis=1)
                    cache.append((r, src, hi - lo + 1))
        return out, cache

    def backward(self, cache, upstream, num_sources: int | None = None):
        """Gradient w.r.t. the aggregated rows given the output gradient."""
        if self.kind.name == "mean":
            return self.matrix_t @ upstream
        upstream = np.asarray(upstream, dtype=np.float64)
        n_src = self.num_nodes if num_sources is None else num_sources
        dim = upstream.shape[1]
        grad = np.zeros(n_src * dim)
        cols = np.arange(dim)
        for rows, src, count in cache:
            share = upstream[rows] / count
            flat = src * dim + cols
            np.add.at(grad, flat.ravel(),
                      np.broadcast_to(share[:, None, :], src.shape).ravel())
        return grad.reshape(n_src, dim)


# -------------------------------------------------------- breakdown points


DEFAULT_SCHEDULE = tuple(10.0 ** k for k in range(2, 9))


@dataclass(frozen=True)
class BreakdownReport:
    """Outcome of :func:`empirical_breakdown`.

    ``m_break`` is ``None`` when no contamination up to ``m_max`` diverged.
    """

    kind: AggregationKind
    n_clean: int
    m_break: int | None
    empirical_fraction: float | None
    theoretical_fraction: float
    total_size: int | None = None

    @property
    def broke(self) -> bool:
        return self.m_break is not None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.to_dict(),
            "n_clean": self.n_clean,
            "m_break": self.m_break,
            "empirical_fraction": self.empirical_fraction,
            "theoretical_fraction": self.theoretical_fraction,
            "total_size": self.total_size,
        }


def theoretical_breakdown(kind: AggregationKind, n: int) -> float:
    """Closed-form breakdown point.

    ``n`` is the clean neighbourhood size for the weighted mean and the total
    (clean plus injected) size for the trimmed mean; the median is 1/2.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if kind.name == "mean":
        return 1.0 / (n + 1)
    if kind.name == "median":
        return 0.5
    return (trim_count(n, kind.alpha) + 1) / n


def _diverges(deltas, magnitudes, consecutive=3, slack=0.9):
    # linear growth in the injected magnitude, sustained over `consecutive` steps
    run = 0
    for k in range(1, len(deltas)):
        prev, cur = deltas[k - 1], deltas[k]
        grow = magnitudes[k] / magnitudes[k - 1]
        if prev > 0 and cur >= slack * grow * prev:
            run += 1
            if run >= consecutive:
                return True
        else:
            run = 0
    return False


def empirical_breakdown(kind: AggregationKind, clean, magnitude_schedule=DEFAULT_SCHEDULE,
                        m_max: int | None = None, total_size: int | None = None) -> BreakdownReport:
    """Smallest number of injected outliers that drives the output to infinity.

    For ``m = 1, 2, ...`` inject ``m`` rows of constant magnitude ``M`` taken
    from ``magnitude_schedule`` and watch ``max |f(clean + inj) - f(clean)|``.
    The aggregator breaks at ``m`` when that delta grows in proportion to
    ``M`` for three consecutive schedule steps.

    With ``total_size=N`` the contaminated set always has ``N`` rows: the
    clean part is the first ``N - m`` rows of ``clean``. Otherwise the whole
    ``clean`` set is kept and the total grows with ``m``.

    For the weighted mean each injected row gets weight ``1/sqrt(2 (n + m))``,
    the GCN weight of a degree-2 attacker node.
    """
    if not isinstance(clean, AggregationInput):
        clean = AggregationInput(clean)
    sched = np.asarray(magnitude_schedule, dtype=np.float64)
    if sched.ndim != 1 or len(sched) < 2 or np.any(np.diff(sched) <= 0) or sched[0] <= 0:
        raise ValueError("magnitude schedule must be positive and strictly increasing")
    if kind.name == "mean" and clean.weights is None:
        raise ValueError("weighted-mean breakdown needs clean weights")
    pool = len(clean)
    if total_size is not None:
        if total_size < 2 or total_size - 1 > pool:
            raise ValueError("total_size must be in [2, len(clean) + 1]")
        limit = total_size - 1
    else:
        limit = pool
    m_max = limit if m_max is None else int(m_max)
    if not 1 <= m_max <= limit:
        raise ValueError(f"m_max must be in [1, {limit}]")

    dim = clean.values.shape[1]
    for m in range(1, m_max + 1):
        n_c = total_size - m if total_size is not None else pool
        base = clean.values[:n_c]
        bw = None if clean.weights is None else clean.weights[:n_c]
        ref = aggregate(kind, base, bw)
        deltas = []
        for mag in sched:
            inj = np.full((m, dim), mag)
            vals = np.vstack([base, inj])
            w = None
            if kind.name == "mean":
                w = np.concatenate([bw, np.full(m, 1.0 / math.sqrt(2.0 * (n_c + m)))])
            deltas.append(float(np.max(np.abs(aggregate(kind, vals, w) - ref))))
        if _diverges(deltas, sched):
            total = n_c + m
            theory_n = n_c if kind.name == "mean" else total
            return BreakdownReport(kind, n_c, m, m / total,
                                   theoretical_breakdown(kind, theory_n), total_size)
    n_c = total_size - m_max if total_size is not None else pool
    theory_n = n_c if kind.name == "mean" else (total_size or pool + m_max)
    return BreakdownReport(kind, n_c, None, None, theoretical_breakdown(kind, theory_n), total_size)
