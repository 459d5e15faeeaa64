import numpy as np
import pytest
from sklearn.base import clone

from helpers import planted_bundle, random_graph
from robust_gcn.aggregators import AggregationKind, aggregate
from robust_gcn.estimator import GCNClassifier, NeighborhoodAggregator
from robust_gcn.harness import prepare_dataset
from robust_gcn.validation import (
    check_alpha,
    check_budget,
    check_features,
    check_graph,
    check_labels,
    check_node_ids,
)


@pytest.fixture(scope="module")
def ds(tmp_path_factory):
    return prepare_dataset(planted_bundle(tmp_path_factory.mktemp("e") / "planted"))


def test_classifier_fit_predict(ds):
    clf = GCNClassifier(hidden_units=16, aggregation="median")
    clf.fit(ds.features, ds.labels.labels, ds.graph, ds.split.train, ds.split.val)
    proba = clf.predict_proba(ds.split.test)
    assert proba.shape == (120, 3) and np.allclose(proba.sum(axis=1), 1)
    assert np.array_equal(clf.predict(ds.split.test), np.argmax(proba, axis=1))
    assert clf.score(ds.split.test, ds.labels.labels[ds.split.test]) > 0.5


def test_classifier_params_and_clone():
    clf = GCNClassifier(aggregation="tmean", alpha=0.2, random_state=3)
    p = clf.get_params()
    assert p["alpha"] == 0.2 and p["random_state"] == 3
    c = clone(clf).set_params(hidden_units=8)
    assert c.hidden_units == 8 and clf.hidden_units == 64


def test_classifier_requires_val_with_train(ds):
    with pytest.raises(ValueError, match="val_idx"):
        GCNClassifier().fit(ds.features, ds.labels.labels, ds.graph, ds.split.train)


def test_classifier_unfitted():
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        GCNClassifier().predict([0])


def test_neighborhood_aggregator_matches_loop():
    g = random_graph(10, 15, seed=1)
    x = np.random.default_rng(0).standard_normal((10, 3))
    out = NeighborhoodAggregator(g, "median").fit_transform(x)
    for v in range(10):
        assert np.allclose(out[v], aggregate(AggregationKind.median(), x[g.neighbors(v)]))
    mean = NeighborhoodAggregator(g.without_self_loops(), "mean").fit_transform(x)
    assert mean.shape == (10, 3)


def test_validation_helpers():
    assert check_alpha(0.45) == 0.45
    for bad in (0.0, 0.5, "x", True):
        with pytest.raises(ValueError):
            check_alpha(bad)
    assert check_budget(3) == 3
    with pytest.raises(ValueError):
        check_budget(6)
    with pytest.raises(ValueError):
        check_features(np.array([[np.inf]]))
    with pytest.raises(ValueError):
        check_features(np.ones(3))
    assert check_labels([0, 2, 1]).num_classes == 3
    with pytest.raises(ValueError):
        check_labels([0.5, 1])
    assert check_node_ids([3, 1], 5).tolist() == [1, 3]
    with pytest.raises(ValueError):
        check_node_ids([1, 1], 5)
    with pytest.raises(ValueError):
        check_node_ids([7], 5)
    g = check_graph([[0, 1], [1, 2]], num_nodes=3)
    assert g.num_edges == 2
    with pytest.raises(ValueError):
        check_graph(g, self_loops=True)
