import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from helpers import KINDS, random_graph
from robust_gcn.aggregators import (
    AggregationInput,
    AggregationKind,
    SegmentAggregator,
    aggregate,
    aggregate_backward,
    empirical_breakdown,
    median_backward,
    median_forward,
    order_window,
    theoretical_breakdown,
    trim_count,
    trimmed_mean_forward,
    weighted_mean_forward,
)

MED = AggregationKind.median()


def test_kind_parsing():
    assert AggregationKind.parse("gcn").name == "mean"
    assert AggregationKind.parse("trimmed_mean", 0.2) == AggregationKind.trimmed_mean(0.2)
    assert AggregationKind.parse({"kind": "tmean", "alpha": 0.45}).alpha == 0.45
    with pytest.raises(ValueError):
        AggregationKind.parse("tmean", 0.5)
    with pytest.raises(ValueError):
        AggregationKind.parse("tmean")
    with pytest.raises(ValueError):
        AggregationKind.parse("max")


def test_order_windows():
    assert order_window(MED, 5) == (2, 2)
    assert order_window(MED, 4) == (1, 2)
    assert order_window(AggregationKind.trimmed_mean(0.2), 10) == (2, 7)
    # decimal alpha must not lose a unit to binary rounding
    assert trim_count(10, 0.3) == 3
    assert trim_count(3, 0.45) == 1


def test_median_examples():
    assert median_forward([[1.0], [5.0], [3.0]]).tolist() == [3.0]
    assert median_forward([[1.0], [2.0], [3.0], [10.0]]).tolist() == [2.5]
    assert median_forward([[7.0, -1.0]]).tolist() == [7.0, -1.0]


def test_trimmed_mean_example():
    vals = np.arange(1.0, 11.0)[:, None]
    vals[-1] = 1000.0
    assert trimmed_mean_forward(vals, 0.2).tolist() == [5.5]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 15), st.integers(1, 4), st.integers(0, 10_000))
def test_median_matches_numpy(n, d, seed):
    v = np.random.default_rng(seed).standard_normal((n, d))
    assert np.allclose(median_forward(v), np.median(v, axis=0), rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 20), st.sampled_from([0.1, 0.25, 0.45]), st.integers(0, 10_000))
def test_trimmed_mean_matches_scipy(n, alpha, seed):
    v = np.random.default_rng(seed).standard_normal((n, 3))
    assert np.allclose(trimmed_mean_forward(v, alpha), stats.trim_mean(v, alpha, axis=0), atol=1e-12)


def test_weighted_mean_is_linear():
    v = np.array([[1.0, 2.0], [3.0, -1.0]])
    w = np.array([0.5, 0.25])
    assert weighted_mean_forward(v, w).tolist() == [1.25, 0.75]
    with pytest.raises(ValueError):
        weighted_mean_forward(v, [1.0])


def test_backward_rejects_bad_upstream():
    with pytest.raises(ValueError, match="upstream"):
        median_backward(np.ones((3, 2)), np.ones(3))


def _fd(fn, v, up, eps=1e-6):
    g = np.zeros_like(v)
    for idx in np.ndindex(v.shape):
        a, b = v.copy(), v.copy()
        a[idx] += eps
        b[idx] -= eps
        g[idx] = (up @ fn(a) - up @ fn(b)) / (2 * eps)
    return g


@pytest.mark.parametrize("kind", KINDS, ids=str)
@pytest.mark.parametrize("n", [1, 2, 5, 8])
def test_single_set_gradients(kind, n):
    rng = np.random.default_rng(n)
    v = rng.standard_normal((n, 3))
    w = rng.random(n)
    up = rng.standard_normal(3)
    analytic = aggregate_backward(kind, v, up, w)
    numeric = _fd(lambda a: aggregate(kind, a, w), v, up)
    assert np.allclose(analytic, numeric, rtol=1e-6, atol=1e-8)


def test_tie_gradient_follows_stable_order():
    v = np.array([[1.0], [1.0], [1.0]])
    assert median_backward(v, [1.0]).ravel().tolist() == [0.0, 1.0, 0.0]
    v4 = np.array([[2.0], [2.0], [2.0], [2.0]])
    assert median_backward(v4, [1.0]).ravel().tolist() == [0.0, 0.5, 0.5, 0.0]


@pytest.mark.parametrize("kind", KINDS, ids=str)
def test_segment_matches_per_node_loop(kind):
    g = random_graph(25, 60, seed=2)
    h = np.random.default_rng(0).standard_normal((25, 4))
    seg = SegmentAggregator.from_graph(g, kind)
    out, cache = seg.forward(h, need_grad=True)
    deg = g.degrees()
    for v in range(25):
        nb = g.neighbors(v)
        w = 1.0 / np.sqrt(deg[v] * deg[nb])
        assert np.allclose(out[v], aggregate(kind, h[nb], w), atol=1e-13)
    up = np.random.default_rng(1).standard_normal((25, 4))
    grad = seg.backward(cache, up)
    expect = np.zeros_like(h)
    for v in range(25):
        nb = g.neighbors(v)
        w = 1.0 / np.sqrt(deg[v] * deg[nb])
        expect[nb] += aggregate_backward(kind, h[nb], up[v], w)
    assert np.allclose(grad, expect, atol=1e-12)


def test_segment_chunking_is_transparent():
    g = random_graph(40, 120, seed=5)
    h = np.random.default_rng(3).standard_normal((40, 7))
    seg = SegmentAggregator.from_graph(g, MED)
    full, _ = seg.forward(h)
    seg.chunk_elements = 8
    small, _ = seg.forward(h)
    assert np.array_equal(full, small)


def test_segment_requires_nonempty_rows():
    with pytest.raises(ValueError):
        SegmentAggregator(np.array([0, 0]), np.array([], dtype=np.int64), MED)


# ------------------------------------------------------------ breakdown


@pytest.mark.parametrize("kind, n, expect", [
    (AggregationKind.weighted_mean(), 4, 0.2),
    (MED, 5, 0.5),
    (AggregationKind.trimmed_mean(0.2), 10, 0.3),
])
def test_theoretical_breakdown_values(kind, n, expect):
    assert theoretical_breakdown(kind, n) == pytest.approx(expect)


def test_empirical_mean_breaks_at_one():
    clean = np.random.default_rng(0).standard_normal((6, 2))
    rep = empirical_breakdown(AggregationKind.weighted_mean(), AggregationInput(clean, np.full(6, 1 / 6)))
    assert rep.m_break == 1
    assert rep.empirical_fraction == pytest.approx(1 / 7)


def test_empirical_median_needs_half():
    clean = np.random.default_rng(0).standard_normal((5, 2))
    rep = empirical_breakdown(MED, clean)
    assert rep.m_break == 5 and rep.empirical_fraction == 0.5


def test_empirical_trimmed_mean_total_size():
    clean = np.random.default_rng(0).standard_normal((10, 2))
    rep = empirical_breakdown(AggregationKind.trimmed_mean(0.2), clean, total_size=10)
    assert rep.m_break == 3 and rep.empirical_fraction == pytest.approx(0.3)


def test_empirical_reports_no_break():
    clean = np.random.default_rng(0).standard_normal((6, 2))
    rep = empirical_breakdown(MED, clean, m_max=3)
    assert not rep.broke and rep.empirical_fraction is None


def test_breakdown_schedule_validation():
    with pytest.raises(ValueError):
        empirical_breakdown(MED, np.ones((3, 1)), magnitude_schedule=[10.0, 5.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 12), st.integers(1, 11), st.integers(0, 10_000))
def test_median_stays_in_clean_range(n, m, seed):
    m = min(m, n - 1)
    rng = np.random.default_rng(seed)
    clean = rng.standard_normal((n, 3))
    inj = rng.standard_normal((m, 3)) * 10.0 ** rng.integers(0, 9)
    out = median_forward(np.vstack([clean, inj]))
    assert np.all(out >= clean.min(axis=0) - 1e-12) and np.all(out <= clean.max(axis=0) + 1e-12)
