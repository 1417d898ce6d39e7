import numpy as np
import pytest

from kmp import autodiff as ad
from kmp.graph import build_graph
from kmp.models import (
    Model,
    build_student,
    build_teacher,
    gcn_forward,
    load_model,
    mlp_forward,
    sage_forward,
    save_model,
)


def _identity_gcn(d):
    m = Model("gcn", [d, d, d], norm="none")
    for layer in m.layers:
        layer["W"].value = np.eye(d)
    return m


def test_gcn_single_node_identity():
    g = build_graph(np.empty((0, 2)), np.array([[0.3, 0.7]]))
    m = Model("gcn", [2, 2], norm="none")
    m.layers[0]["W"].value = np.eye(2)
    assert np.allclose(gcn_forward(g, m).logits.value, [[0.3, 0.7]])


def test_gcn_two_node_path_rows_are_feature_mean(oracle):
    x = np.array([[1.0, 4.0], [3.0, 2.0]])
    g = build_graph([(0, 1)], x)
    m = Model("gcn", [2, 2], norm="none")
    m.layers[0]["W"].value = np.eye(2)
    out = gcn_forward(g, m).logits.value
    assert oracle("2-node GCN layer = feature mean", "hand-value", 1e-12, np.allclose(out, [[2.0, 3.0], [2.0, 3.0]]))


def test_two_layer_trace_has_one_hidden(karate):
    for kind in ("gcn", "sage"):
        t = build_teacher(kind, 4, 2, np.random.default_rng(0))
        fwd = gcn_forward if kind == "gcn" else sage_forward
        trace = fwd(karate.graph, t)
        assert len(trace.hidden) == 1 and trace.logits.shape == (12, 2)


def test_sage_isolated_node_uses_only_self_path():
    x = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
    g = build_graph([(0, 1)], x)
    m = Model("sage", [2, 2], norm="none")
    m.layers[0]["W_self"].value = np.eye(2)
    m.layers[0]["W_neigh"].value = np.full((2, 2), 5.0)
    out = sage_forward(g, m).logits.value
    assert np.allclose(out[2], [2.0, 2.0])


def test_sage_star_center_matches_walk(rng):
    x = rng.standard_normal((3, 2))
    g = build_graph([(0, 1), (0, 2)], x)
    m = Model("sage", [2, 3], norm="none", rng=rng)
    out = sage_forward(g, m).logits.value
    ws, wn, b = (m.layers[0][k].value for k in ("W_self", "W_neigh", "b"))
    brute = x[0] @ ws + ((x[1] + x[2]) / 2) @ wn + b[0]
    assert np.allclose(out[0], brute)


def test_mlp_zero_weights_give_zero_logits(rng):
    m = build_student([8], 5, 3, rng)
    for layer in m.layers:
        for t in layer.values():
            t.value[:] = 0
    assert np.array_equal(mlp_forward(rng.standard_normal((4, 5)), m).logits.value, np.zeros((4, 3)))


def test_mlp_rows_are_independent(rng):
    m = build_student([8], 5, 3, rng)
    x = np.tile(rng.standard_normal((1, 5)), (6, 1))
    out = mlp_forward(x, m).logits.value
    assert np.allclose(out, out[0])


def test_mlp_ignores_the_graph(karate, rng):
    """The MLP forward has no graph argument; editing edges cannot change it."""
    m = build_student([6], 4, 2, rng)
    before = mlp_forward(karate.graph.features, m).logits.value
    rewired = build_graph([(0, 11)], karate.graph.features, karate.graph.labels)
    assert np.array_equal(before, mlp_forward(rewired.features, m).logits.value)
    import inspect

    assert "graph" not in inspect.signature(mlp_forward).parameters


def test_linear_mlp_learns_separable_blobs(oracle):
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(-2, 1, (50, 2)), rng.normal(2, 1, (50, 2))])
    y = np.repeat([0, 1], 50)
    m = Model("mlp", [2, 2], rng=rng)
    opt = ad.Adam(m.parameters(), lr=0.05)
    for _ in range(200):
        opt.zero_grad()
        ad.backward(ad.cross_entropy(mlp_forward(x, m, True, rng).logits, y))
        opt.step()
    acc = (mlp_forward(x, m).logits.value.argmax(1) == y).mean()
    assert oracle("logistic regression on blobs", "brute-force", 0.95, acc > 0.95, detail=f"acc={acc:.2f}")


def test_eval_forward_is_deterministic(karate):
    t = build_teacher("gcn", 4, 2, np.random.default_rng(1))
    a = gcn_forward(karate.graph, t).logits.value
    b = gcn_forward(karate.graph, t).logits.value
    assert np.array_equal(a, b)


def test_dimension_mismatch(karate, rng):
    t = build_teacher("gcn", 5, 2, rng)
    with pytest.raises(ad.DimensionError):
        gcn_forward(karate.graph, t)
    m = build_student([4], 3, 2, rng)
    with pytest.raises(ad.DimensionError):
        mlp_forward(np.zeros((2, 4)), m)


def test_checkpoint_round_trip(karate, tmp_path):
    rng = np.random.default_rng(0)
    t = build_teacher("gcn", 4, 2, rng)
    gcn_forward(karate.graph, t, True, rng)  # move batch-norm running stats
    save_model(tmp_path / "t.ckpt", t, extra={"seed": 3}, extra_arrays={"logits": np.ones((2, 2))})
    back, meta, extras = load_model(tmp_path / "t.ckpt")
    assert meta["seed"] == 3 and np.array_equal(extras["logits"], np.ones((2, 2)))
    for k, v in t.state().items():
        assert np.array_equal(back.state()[k], v)
    assert np.array_equal(gcn_forward(karate.graph, t).logits.value, gcn_forward(karate.graph, back).logits.value)


def test_checkpoint_rejects_version_and_truncation(karate, tmp_path):
    from kmp.storage import FormatError, VersionError

    path = tmp_path / "s.ckpt"
    save_model(path, build_student([3], 4, 2, np.random.default_rng(0)))
    raw = bytearray(path.read_bytes())
    (tmp_path / "short.ckpt").write_bytes(bytes(raw[:-8]))
    with pytest.raises(FormatError):
        load_model(tmp_path / "short.ckpt")
    raw[8] = 99
    (tmp_path / "ver.ckpt").write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        load_model(tmp_path / "ver.ckpt")


def test_student_hidden_dims_follow_teacher(rng):
    t = build_teacher("sage", 10, 3, rng)
    s = build_student(t.hidden_dims, 10, 3, rng)
    assert s.hidden_dims == t.hidden_dims == [128]
