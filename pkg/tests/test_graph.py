import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from kmp.graph import (
    GraphError,
    SplitError,
    add_feature_noise,
    build_graph,
    gcn_norm,
    induced_subgraph,
    make_split,
    mean_aggregator,
    normalized_laplacian,
    sampled_mean_aggregator,
)
from oracles import edge_filter_subgraph


def _graph(n, edges, classes=None, per_class=None, d=3, seed=0):
    rng = np.random.default_rng(seed)
    labels = None
    if classes:
        labels = np.repeat(np.arange(classes), per_class)
    return build_graph(np.asarray(edges).reshape(-1, 2), rng.standard_normal((n, d)), labels, classes)


def test_build_graph_symmetrises_and_dedups():
    g = _graph(4, [(0, 1), (1, 0), (0, 1), (2, 2), (2, 3)])
    assert g.num_edges == 2
    assert list(g.neighbors(0)) == [1] and list(g.neighbors(3)) == [2]
    assert (g.adjacency() != g.adjacency().T).nnz == 0


def test_build_graph_rejects_out_of_range_ids():
    with pytest.raises(GraphError):
        _graph(3, [(0, 5)])


def test_gcn_norm_two_node_path(oracle):
    a = gcn_norm(_graph(2, [(0, 1)])).toarray()
    ok = np.allclose(a, 0.5)
    assert oracle("2-node path A_hat = 1/2", "hand-value", 1e-12, ok)


def test_gcn_norm_isolated_node_is_identity_row():
    a = gcn_norm(_graph(3, [(0, 1)])).toarray()
    assert a[2, 2] == 1.0 and a[2, :2].sum() == 0


def test_mean_aggregator_star_matches_walk():
    g = _graph(4, [(0, 1), (0, 2), (0, 3)])
    m = mean_aggregator(g).toarray()
    x = np.arange(12.0).reshape(4, 3)
    for u in range(4):
        nb = [v for v in range(4) if (min(u, v), max(u, v)) in {(0, 1), (0, 2), (0, 3)}]
        assert np.allclose(m[u] @ x, x[nb].mean(axis=0))


def test_sampled_aggregator_respects_fanout():
    g = _graph(6, [(0, i) for i in range(1, 6)])
    m = sampled_mean_aggregator(g, 2, np.random.default_rng(0)).toarray()
    assert (m[0] > 0).sum() == 2 and np.isclose(m[0].sum(), 1.0)
    assert np.allclose(m[1:].sum(axis=1), 1.0)


def test_laplacian_two_node_path(oracle):
    lap = normalized_laplacian(_graph(2, [(0, 1)]))
    ok = np.allclose(lap, [[1, -1], [-1, 1]]) and np.allclose(np.linalg.eigvalsh(lap), [0, 2])
    assert oracle("2-node Laplacian eigenvalues (0, 2)", "hand-value", 1e-12, ok)


def test_laplacian_isolated_policy():
    g = _graph(3, [(0, 1)])
    with pytest.raises(GraphError, match="degenerate degree"):
        normalized_laplacian(g)
    lap = normalized_laplacian(g, isolated="self_loop")
    assert lap[2, 2] == 0.0


def test_split_counts_for_seven_classes():
    g = _graph(7 * 60, [], classes=7, per_class=60)
    s = make_split(g, seed=0)
    assert s.train_labeled.size == 140
    assert all((g.labels[s.train_labeled] == c).sum() == 20 for c in range(7))
    assert s.validation.size == 30
    assert s.test.size == 7 * 60 - 170


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), mode=st.sampled_from(["transductive", "inductive"]))
def test_split_roles_are_disjoint(seed, mode):
    g = _graph(3 * 80, [], classes=3, per_class=80)
    s = make_split(g, mode, seed=seed)
    roles = [s.train_labeled, s.train_soft, s.validation, s.test]
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.intersect1d(roles[i], roles[j]).size == 0
    assert sum(r.size for r in roles) == g.n
    if mode == "inductive":
        assert np.intersect1d(s.test, s.observed).size == 0
        for r in roles[:3]:
            assert np.isin(r, s.observed).all()
        assert np.intersect1d(s.soft_pool(), s.test).size == 0
    else:
        # labels of every non-labeled node stay hidden but they receive soft targets
        assert np.setdiff1d(np.arange(g.n), s.soft_pool()).tolist() == s.train_labeled.tolist()


def test_split_deterministic_per_seed():
    g = _graph(3 * 40, [], classes=3, per_class=40)
    a, b = make_split(g, seed=5), make_split(g, seed=5)
    assert np.array_equal(a.train_labeled, b.train_labeled) and np.array_equal(a.validation, b.validation)


def test_split_errors():
    g = _graph(30, [], classes=3, per_class=10)
    with pytest.raises(SplitError, match="class 0 has 10"):
        make_split(g)
    with pytest.raises(SplitError):
        make_split(g, mode="semi")


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_induced_subgraph_matches_edge_filter(seed):
    rng = np.random.default_rng(seed)
    n = 6
    edges = rng.integers(0, n, (8, 2))
    g = _graph(n, edges)
    observed = np.sort(rng.choice(n, size=rng.integers(1, n + 1), replace=False))
    sub, ids = induced_subgraph(g, observed)
    assert np.array_equal(ids, observed)
    got = {tuple(e) for e in sub.edge_list().tolist()}
    assert got == edge_filter_subgraph(n, edges.tolist(), observed)
    assert np.allclose(sub.dense_features(), g.dense_features(observed))


def test_noise_endpoints(oracle):
    rng = np.random.default_rng(0)
    x = rng.random((400, 20))
    assert np.array_equal(add_feature_noise(x, 0.0, 1), x)
    y = add_feature_noise(x, 1.0, 1)
    corr = np.corrcoef(x.ravel(), y.ravel())[0, 1]
    assert oracle("noise p=1 decorrelates features", "brute-force", 0.1, abs(corr) < 0.1, detail=f"corr={corr:.3f}")
    assert (y >= x.min(axis=0) - 1e-12).all() and (y <= x.max(axis=0) + 1e-12).all()


def test_noise_accepts_sparse_and_is_seeded():
    x = sp.random(50, 10, density=0.2, random_state=0, format="csr")
    a = add_feature_noise(x, 0.3, 7)
    b = add_feature_noise(x, 0.3, 7)
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        add_feature_noise(x, 1.5, 0)


def test_fingerprint_depends_on_structure_only():
    g = _graph(4, [(0, 1), (2, 3)])
    h = g.with_features(np.zeros((4, 3)))
    assert g.fingerprint() == h.fingerprint()
    assert g.fingerprint() != _graph(4, [(0, 1)]).fingerprint()
