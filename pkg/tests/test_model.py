import numpy as np
import pytest

from helpers import KINDS, fd_check, random_graph, random_problem
from robust_gcn.aggregators import AggregationKind, aggregate
from robust_gcn.graph import FeatureMatrix, LabelVector, Split, gcn_edge_weights
from robust_gcn.model import (
    AdamState,
    DivergenceError,
    GcnConfig,
    adam_step,
    forward,
    init_model,
    load_model,
    logit_margin,
    loss_and_grads,
    predict,
    save_model,
    train,
)


def _oracle_logits(m, g, x):
    """Per-node loop over the layer definitions; independent of the segment code."""
    X = x.dense()
    deg = g.degrees()
    tf = m.config.transform_first and m.aggregation.is_order_statistic

    def agg(h, v):
        nb = g.neighbors(v)
        return aggregate(m.aggregation, h[nb], 1.0 / np.sqrt(deg[v] * deg[nb]))

    n = g.num_nodes
    if tf:
        P = X @ m.W1
        h1 = np.maximum(np.array([agg(P, v) for v in range(n)]), 0)
    else:
        h1 = np.maximum(np.array([agg(X, v) for v in range(n)]) @ m.W1, 0)
    return np.array([agg(h1, v) for v in range(n)]) @ m.W2


def test_init_shapes_cora_meta():
    m = init_model(GcnConfig(), {"num_features": 1433, "num_classes": 7})
    assert m.W1.shape == (1433, 64) and m.W2.shape == (64, 7)
    limit = np.sqrt(6 / (1433 + 64))
    assert np.abs(m.W1).max() <= limit


def test_config_validation():
    with pytest.raises(ValueError):
        GcnConfig(hidden_units=0)
    with pytest.raises(ValueError):
        GcnConfig(dropout=1.0)
    with pytest.raises(ValueError):
        GcnConfig(num_layers=3)
    cfg = GcnConfig(aggregation=AggregationKind.trimmed_mean(0.45))
    assert GcnConfig.from_dict(cfg.to_dict()) == cfg


def test_mean_forward_matches_dense_matrices():
    g, x, _, m = random_problem(seed=1)
    a = gcn_edge_weights(g).toarray()
    expect = a @ np.maximum(a @ x.dense() @ m.W1, 0) @ m.W2
    assert np.allclose(forward(m, g, x), expect, atol=1e-12)


@pytest.mark.parametrize("kind", KINDS, ids=str)
@pytest.mark.parametrize("tf", [False, True])
def test_forward_matches_loop_oracle(kind, tf):
    g, x, _, m = random_problem(seed=2, kind=kind, transform_first=tf)
    assert np.allclose(forward(m, g, x), _oracle_logits(m, g, x), atol=1e-12)


def test_layer_order_irrelevant_for_mean():
    g, x, _, m = random_problem(seed=3, transform_first=False)
    m2 = init_model(GcnConfig(hidden_units=8, seed=3, transform_first=True),
                    {"num_features": 6, "num_classes": 3})
    assert np.allclose(forward(m, g, x), forward(m2, g, x), atol=1e-13)


@pytest.mark.parametrize("kind", KINDS, ids=str)
@pytest.mark.parametrize("tf", [False, True])
def test_full_model_gradient(kind, tf):
    g, x, y, m = random_problem(n=12, m=20, f=4, seed=4, kind=kind, hidden=5, transform_first=tf)
    assert fd_check(m, g, x, y, np.arange(8)) < 1e-4


def test_dropout_mask_gradient():
    g, x, y, m = random_problem(n=10, m=16, f=3, seed=6, hidden=4)
    mask = (np.random.default_rng(0).random((10, 4)) < 0.5) * 2.0
    loss, grads = loss_and_grads(m, g, x, y, np.arange(10), dropout_mask=mask)
    eps = 1e-6
    p = m.W2.copy()
    p[1, 2] += eps
    up, _ = loss_and_grads(m.with_params({"W1": m.W1, "W2": p}), g, x, y, np.arange(10), mask)
    assert (up - loss) / eps == pytest.approx(grads["W2"][1, 2], rel=1e-4)


def test_adam_first_step_by_hand():
    params = {"w": np.array([1.0, -2.0])}
    grads = {"w": np.array([0.5, -4.0])}
    new, state = adam_step(params, grads, AdamState(), lr=0.1)
    # bias-corrected first step moves by lr * sign(g)
    assert np.allclose(new["w"], [0.9, -1.9], atol=1e-7)
    assert state.step == 1
    with pytest.raises(DivergenceError):
        adam_step(params, {"w": np.array([np.nan, 0.0])}, AdamState(), 0.1)


def test_train_separable_toy():
    n = 40
    g = random_graph(n, 0, seed=0)  # path graph
    order = np.argsort(np.random.default_rng(0).permutation(n))
    y = (np.arange(n) >= n // 2).astype(int)[order]
    x = FeatureMatrix.from_dense(np.eye(2)[y] + 0.05)
    split = Split(np.arange(0, n, 2), np.arange(1, n, 4), np.arange(3, n, 4))
    model, hist = train(GcnConfig(hidden_units=8, patience=50), g, x, LabelVector(y, 2), split)
    logits = forward(model, g, x)
    assert np.mean(np.argmax(logits[split.train], 1) == y[split.train]) >= 0.95
    assert len(hist.val_accuracy) <= 200
    assert hist.val_accuracy[hist.best_epoch] == max(hist.val_accuracy)


def test_train_is_deterministic():
    g, x, y, _ = random_problem(n=30, m=60, seed=7)
    split = Split(np.arange(10), np.arange(10, 20), np.arange(20, 30))
    cfg = GcnConfig(hidden_units=8, max_epochs=20)
    a, _ = train(cfg, g, x, y, split)
    b, _ = train(cfg, g, x, y, split)
    assert np.array_equal(a.W1, b.W1) and np.array_equal(a.W2, b.W2)


def test_divergence_raises():
    g, x, _, m = random_problem(seed=8)
    bad = m.with_params({"W1": m.W1 * np.inf, "W2": m.W2})
    with pytest.raises(DivergenceError):
        forward(bad, g, x)


def test_save_load_bitwise(tmp_path):
    _, _, _, m = random_problem(seed=9, kind=AggregationKind.trimmed_mean(0.45))
    path = save_model(m, tmp_path / "m.json")
    m2 = load_model(path)
    assert np.array_equal(m.W1, m2.W1) and np.array_equal(m.W2, m2.W2)
    assert m2.aggregation == m.aggregation and m2.config == m.config


def test_predict_and_margin():
    g, x, _, m = random_problem(seed=10)
    cls, marg = predict(m, g, x, 3)
    row = forward(m, g, x)[3]
    assert cls == int(np.argmax(row)) and marg >= 0
    assert logit_margin([2.0, 0.0, 0.0], 0) == 2.0
    assert logit_margin([0.0, 3.0, 0.0], 0) == -3.0
