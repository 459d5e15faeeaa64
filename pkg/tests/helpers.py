"""Small graph fixtures shared by the test modules."""
import numpy as np

from robust_gcn.aggregators import AggregationKind
from robust_gcn.graph import FeatureMatrix, Graph, LabelVector, add_self_loops
from robust_gcn.model import GcnConfig, init_model, loss_and_grads

KINDS = [AggregationKind.weighted_mean(), AggregationKind.median(), AggregationKind.trimmed_mean(0.3)]


def random_graph(n, m, seed=0, loops=True):
    rng = np.random.default_rng(seed)
    edges = set()
    # spanning path keeps every node connected
    perm = rng.permutation(n)
    for a, b in zip(perm[:-1], perm[1:]):
        edges.add((min(a, b), max(a, b)))
    while len(edges) < m:
        u, v = rng.integers(0, n, 2)
        if u != v:
            edges.add((min(u, v), max(u, v)))
    g = Graph(n, np.array(sorted(edges), dtype=np.int64))
    return add_self_loops(g) if loops else g


def random_problem(n=20, m=40, f=6, c=3, seed=0, kind=None, hidden=8, transform_first=True):
    rng = np.random.default_rng(seed + 100)
    g = random_graph(n, m, seed)
    x = FeatureMatrix.from_dense(rng.standard_normal((n, f)))
    y = LabelVector(rng.integers(0, c, n), c)
    cfg = GcnConfig(hidden_units=hidden, aggregation=kind or AggregationKind.weighted_mean(),
                    seed=seed, transform_first=transform_first)
    model = init_model(cfg, {"num_features": f, "num_classes": c})
    return g, x, y, model


def fd_check(m, g, x, y, mask, eps=1e-6):
    """Worst relative gap between analytic and central-difference gradients."""
    _, grads = loss_and_grads(m, g, x, y, mask)
    worst = 0.0
    for name in ("W1", "W2"):
        p = m.params[name]
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            for sign in (1, -1):
                q = p.copy()
                q[idx] += sign * eps
                lo, _ = loss_and_grads(m.with_params({**m.params, name: q}), g, x, y, mask)
                num[idx] += sign * lo / (2 * eps)
        scale = np.maximum(np.abs(num), np.abs(grads[name])).max()
        worst = max(worst, np.abs(num - grads[name]).max() / max(scale, 1e-12))
    return worst


def planted_bundle(path, n=150, classes=3, seed=0):
    """Write a small homophilous bundle (planted partition plus noisy one-hot features)."""
    from robust_gcn.graph import write_bundle

    rng = np.random.default_rng(seed)
    y = np.arange(n) % classes
    edges = set()
    for u in range(n):
        for v in range(u + 1, n):
            p = 0.15 if y[u] == y[v] else 0.01
            if rng.random() < p:
                edges.add((u, v))
    for u in range(n - 1):  # keep it connected
        edges.add((u, u + 1))
    x = (rng.random((n, 12)) < 0.05).astype(float)
    x[np.repeat(np.arange(n), 4), (y[:, None] * 4 + np.arange(4)).ravel()] = 1.0
    g = Graph(n, np.array(sorted(edges), dtype=np.int64))
    return write_bundle(path, "planted", g, FeatureMatrix.from_dense(x), LabelVector(y, classes))
