import itertools

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_graph
from robust_gcn.graph import (
    BundleError,
    FeatureMatrix,
    Graph,
    GraphError,
    LabelVector,
    Split,
    add_self_loops,
    gcn_edge_weights,
    largest_connected_component,
    load_bundle,
    purity,
    purity_all,
    random_split,
    row_normalize,
    write_bundle,
)


def _bundle(tmp_path, n=4, edges=((0, 1), (1, 2)), feats=None, labels=None, nf=2, nc=2):
    g = Graph(n, np.array(edges, dtype=np.int64).reshape(-1, 2))
    x = FeatureMatrix.from_dense(feats if feats is not None else np.eye(n, nf))
    y = LabelVector(labels if labels is not None else np.arange(n) % nc, nc)
    return write_bundle(tmp_path / "b", "toy", g, x, y), g, x, y


def test_graph_canonicalises_edges():
    g = Graph(4, np.array([[2, 1], [0, 3]]))
    assert g.edges.tolist() == [[0, 3], [1, 2]]
    assert g.degrees().tolist() == [1, 1, 1, 1]
    assert g.has_edge(2, 1) and not g.has_edge(0, 1)


@pytest.mark.parametrize("edges, msg", [
    ([[0, 0]], "self"),
    ([[0, 1], [1, 0]], "duplicate"),
    ([[0, 5]], "range"),
])
def test_graph_rejects_bad_edges(edges, msg):
    with pytest.raises(GraphError, match=msg):
        Graph(3, np.array(edges))


def test_self_loops_enter_csr_only():
    g = add_self_loops(Graph(3, np.array([[0, 1]])))
    assert g.num_edges == 1
    assert g.degrees().tolist() == [2, 2, 1]
    assert g.neighbors(0).tolist() == [0, 1]
    with pytest.raises(GraphError):
        add_self_loops(g)
    assert g.without_self_loops().degrees().tolist() == [1, 1, 0]


def test_bundle_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    feats = rng.random((5, 3)) * (rng.random((5, 3)) < 0.5)
    root, g, x, y = _bundle(tmp_path, 5, [(0, 1), (1, 2), (3, 4)], feats, nf=3)
    split = Split([0], [1], [2, 3, 4])
    write_bundle(root, "toy", g, x, y, split)
    g2, x2, y2, s2 = load_bundle(root)
    assert g2 == g
    assert np.array_equal(x2.dense(), x.dense())  # bitwise, repr round-trips floats
    assert np.array_equal(y2.labels, y.labels)
    assert s2.test.tolist() == [2, 3, 4]


def test_bundle_self_loop_is_rejected_with_line(tmp_path):
    root, *_ = _bundle(tmp_path)
    with open(root / "edges.tsv", "a") as fh:
        fh.write("3\t3\n")
    with pytest.raises(BundleError, match=r"edges.tsv:3: self-loop-in-input"):
        load_bundle(root)


@pytest.mark.parametrize("fname, line, msg", [
    ("edges.tsv", "0\t9\n", "out of range"),
    ("edges.tsv", "1\t0\n", "duplicate edge"),
    ("features.tsv", "0\t0\tnan\n", "non-finite"),
    ("labels.tsv", "0\t1\n", "duplicate label"),
])
def test_bundle_errors(tmp_path, fname, line, msg):
    root, *_ = _bundle(tmp_path)
    with open(root / fname, "a") as fh:
        fh.write(line)
    with pytest.raises(BundleError, match=msg):
        load_bundle(root)


def test_bundle_missing_file(tmp_path):
    root, *_ = _bundle(tmp_path)
    (root / "labels.tsv").unlink()
    with pytest.raises(BundleError, match="missing"):
        load_bundle(root)


def test_lcc_keeps_largest_and_remaps():
    g = Graph(7, np.array([[0, 1], [2, 3], [3, 4], [5, 6]]))
    x = FeatureMatrix.from_dense(np.arange(7.0)[:, None])
    y = LabelVector(np.arange(7) % 2, 2)
    sub, xs, ys, ids = largest_connected_component(g, x, y)
    assert ids.tolist() == [2, 3, 4]
    assert sub.edges.tolist() == [[0, 1], [1, 2]]
    assert xs.dense().ravel().tolist() == [2.0, 3.0, 4.0]
    assert ys.labels.tolist() == [0, 1, 0]


def test_lcc_tie_goes_to_smallest_id():
    g = Graph(4, np.array([[2, 3], [0, 1]]))
    x = FeatureMatrix.from_dense(np.zeros((4, 1)))
    _, _, _, ids = largest_connected_component(g, x, LabelVector(np.zeros(4, int), 2))
    assert ids.tolist() == [0, 1]


def test_gcn_weights_match_dense_formula():
    g = random_graph(12, 20, seed=3)
    w = gcn_edge_weights(g).toarray()
    a = g.adjacency().toarray()
    d = a.sum(axis=1)
    expect = a / np.sqrt(np.outer(d, d))
    assert np.allclose(w, expect, rtol=0, atol=1e-15)
    # a degree-1 pair with self-loops: both sides have |N| = 2
    g2 = add_self_loops(Graph(2, np.array([[0, 1]])))
    assert gcn_edge_weights(g2)[0, 1] == pytest.approx(0.5)


def _purity_oracle(g, labels, v):
    a = g.without_self_loops().adjacency().toarray().astype(int)
    reach = np.eye(len(a), dtype=int) + a
    ball = np.flatnonzero((reach @ reach)[v] > 0)
    return np.mean(labels[ball] == labels[v])


def test_purity_matches_matrix_oracle():
    g = random_graph(15, 22, seed=1)
    y = LabelVector(np.random.default_rng(1).integers(0, 3, 15), 3)
    vec = purity_all(g, y)
    for v in range(15):
        assert purity(g, y, v) == pytest.approx(_purity_oracle(g, y.labels, v))
        assert vec[v] == pytest.approx(purity(g, y, v))


def test_purity_star():
    g = Graph(4, np.array([[0, 1], [0, 2], [0, 3]]))
    y = LabelVector(np.array([0, 0, 1, 1]), 2)
    assert purity(g, y, 0) == pytest.approx(0.5)
    assert purity(g, y, 2) == pytest.approx(0.5)


def test_random_split_sizes_and_determinism():
    s = random_split(2485, seed=0)
    assert (len(s.train), len(s.val), len(s.test)) == (248, 248, 1989)
    assert np.array_equal(s.test, random_split(2485, seed=0).test)
    assert not np.array_equal(s.test, random_split(2485, seed=1).test)
    all_ids = np.concatenate([s.train, s.val, s.test])
    assert np.array_equal(np.sort(all_ids), np.arange(2485))


def test_split_rejects_overlap():
    with pytest.raises(ValueError):
        Split([0, 1], [1], [2])


def test_row_normalize():
    x = FeatureMatrix(sp.csr_matrix(np.array([[1.0, 3.0], [0.0, 0.0]])))
    out = row_normalize(x).dense()
    assert out.tolist() == [[0.25, 0.75], [0.0, 0.0]]


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 9), st.data())
def test_graph_adjacency_symmetric(n, data):
    pairs = list(itertools.combinations(range(n), 2))
    chosen = data.draw(st.lists(st.sampled_from(pairs), unique=True, max_size=len(pairs)))
    g = Graph(n, np.array(chosen, dtype=np.int64).reshape(-1, 2))
    a = g.adjacency().toarray()
    assert np.array_equal(a, a.T)
    assert a.sum() == 2 * len(chosen)
