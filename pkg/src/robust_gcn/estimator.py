"""scikit-learn style wrappers around the functional model API.

GCN node classification is transductive: the estimator is fitted on the
whole graph and ``predict`` takes node ids, not feature rows.

>>> clf = GCNClassifier(aggregation="median").fit(X, y, graph=g, train_idx=tr, val_idx=va)
>>> clf.predict(test_ids)
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .aggregators import SegmentAggregator
from .graph import Split, add_self_loops, random_split
from .model import GcnConfig, Propagation, forward, train
from .validation import (
    check_aggregation,
    check_features,
    check_graph,
    check_labels,
    check_node_ids,
)


def _with_loops(graph, n):
    g = check_graph(graph, num_nodes=n)
    return g if g.self_loops_included else add_self_loops(g)


class GCNClassifier(ClassifierMixin, BaseEstimator):
    """Two-layer GCN with a pluggable neighbourhood aggregation."""

    def __init__(self, aggregation="mean", alpha=None, hidden_units=64, learning_rate=0.01,
                 max_epochs=200, patience=30, weight_decay=5e-4, dropout=0.5, transform_first=True,
                 random_state=0):
        self.aggregation = aggregation
        self.alpha = alpha
        self.hidden_units = hidden_units
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.transform_first = transform_first
        self.random_state = random_state

    def _config(self) -> GcnConfig:
        kind = check_aggregation(self.aggregation, self.alpha)
        return GcnConfig(hidden_units=int(self.hidden_units), learning_rate=float(self.learning_rate),
                         max_epochs=int(self.max_epochs), patience=int(self.patience),
                         aggregation=kind, seed=int(self.random_state),
                         weight_decay=float(self.weight_decay), dropout=float(self.dropout),
                         transform_first=bool(self.transform_first))

    def fit(self, X, y, graph, train_idx=None, val_idx=None):
        """Fit on all nodes of ``graph``; labels outside the train/val ids are unused.

        Without explicit ids a seeded 10/10/80 split is drawn.
        """
        x = check_features(X)
        n = x.num_nodes
        labels = check_labels(y, num_nodes=n)
        g = _with_loops(graph, n)
        if train_idx is None:
            split = random_split(n, seed=int(self.random_state))
        else:
            tr = check_node_ids(train_idx, n, "train_idx")
            if val_idx is None:
                raise ValueError("val_idx is required when train_idx is given (early stopping)")
            va = check_node_ids(val_idx, n, "val_idx")
            split = Split(tr, va, np.setdiff1d(np.arange(n), np.union1d(tr, va)))
        self.model_, self.history_ = train(self._config(), g, x, labels, split)
        self.graph_, self.features_ = g, x
        self.classes_ = np.arange(labels.num_classes)
        self.n_features_in_ = x.num_features
        self._plan = Propagation.ensure(None, self.model_, g, x)
        return self

    def _logits(self, nodes):
        check_is_fitted(self, "model_")
        logits = forward(self.model_, self.graph_, self.features_, self._plan)
        if nodes is None:
            return logits
        ids = np.asarray(nodes, dtype=np.int64).ravel()
        if ids.size and (ids.min() < 0 or ids.max() >= logits.shape[0]):
            raise ValueError("node ids out of range")
        return logits[ids]

    def decision_function(self, nodes=None):
        return self._logits(nodes)

    def predict_proba(self, nodes=None):
        z = self._logits(nodes)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, nodes=None):
        logits = self._logits(nodes)
        return self.classes_[np.argmax(logits, axis=1)]


class NeighborhoodAggregator(TransformerMixin, BaseEstimator):
    """One parameter-free aggregation step over ``graph`` (self-loops added if absent)."""

    def __init__(self, graph=None, aggregation="mean", alpha=None):
        self.graph = graph
        self.aggregation = aggregation
        self.alpha = alpha

    def fit(self, X, y=None):
        x = check_features(X)
        if self.graph is None:
            raise ValueError("NeighborhoodAggregator requires a graph")
        g = _with_loops(self.graph, x.num_nodes)
        self.kind_ = check_aggregation(self.aggregation, self.alpha)
        self.segments_ = SegmentAggregator.from_graph(g, self.kind_)
        self.n_features_in_ = x.num_features
        return self

    def transform(self, X):
        check_is_fitted(self, "segments_")
        x = check_features(X, num_nodes=self.segments_.num_nodes)
        if self.kind_.name == "mean":
            return np.asarray((self.segments_.matrix @ x.matrix).todense())
        out, _ = self.segments_.forward(x.dense())
        return out
