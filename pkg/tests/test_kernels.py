import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kmp import autodiff as ad
from kmp.kernels import (
    KernelSpecError,
    kernel_eval,
    make_kernel,
    mapping_distance,
    mapping_matrix,
    nhk_propagate,
    reconstruction_loss,
    reverse_kernel_eval,
)
from oracles import grad_check, loop_mapping


def _spec(kind, h=2, **kw):
    return make_kernel(kind, h, np.random.default_rng(0), **kw)


def test_gaussian_hand_value(oracle):
    v = kernel_eval(_spec("gaussian", T=0.5), [1, 0], [0, 1])
    assert oracle("gaussian (1,0),(0,1),T=0.5 -> e^-1", "hand-value", 1e-12, abs(v - np.exp(-1)) < 1e-12)


def test_gaussian_identical_rows_all_ones():
    mat = mapping_matrix(_spec("gaussian"), np.ones((4, 3)))
    assert np.array_equal(mat.value, np.ones((4, 4)))


def test_polynomial_hand_value(oracle):
    v = kernel_eval(_spec("polynomial", c=1, d=2), [1, 1], [1, 1])
    assert oracle("polynomial (1,1),(1,1) -> 9", "hand-value", 0, v == 9.0)


def test_sigmoid_orthogonal_is_half():
    assert kernel_eval(_spec("sigmoid"), [1, 0], [0, 1]) == pytest.approx(0.5)


def test_reverse_zero_weights(oracle):
    h = 6
    v = reverse_kernel_eval(np.zeros((h, h)), np.ones(h), np.arange(h))
    assert oracle("reverse kernel W_k=0 -> h/4", "hand-value", 1e-12, abs(v - h / 4) < 1e-12)


def test_reverse_kernel_dimension_error():
    with pytest.raises(ad.DimensionError):
        reverse_kernel_eval(np.zeros((3, 3)), np.ones(2), np.ones(2))


def test_mapping_distance_hand_value(oracle):
    d = mapping_distance(ad.Tensor(np.eye(2)), np.zeros((2, 2))).item()
    assert oracle("dis(I2, 0) = 0.5", "hand-value", 0, d == 0.5)
    with pytest.raises(ad.DimensionError):
        mapping_distance(ad.Tensor(np.eye(2)), np.zeros((3, 3)))


def test_invalid_specs():
    with pytest.raises(KernelSpecError):
        make_kernel("cosine", 2, np.random.default_rng(0))
    with pytest.raises(KernelSpecError):
        _spec("gaussian", T=0.0)
    with pytest.raises(KernelSpecError):
        _spec("polynomial", d=0)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(["gaussian", "polynomial", "sigmoid", "randomized", "reverse"]))
def test_mapping_matrix_matches_pair_loops(seed, kind, oracle):
    rng = np.random.default_rng(seed)
    h = rng.standard_normal((6, 4)) * 0.5
    spec = make_kernel(kind, 4, rng, t=3, T=0.7, c=0.5, d=3)
    kw = {"T": 0.7, "c": 0.5, "d": 3}
    if kind == "sigmoid":
        spec.a.value[:] = rng.uniform(0.5, 2)
        spec.b.value[:] = rng.uniform(-1, 1)
        kw.update(a=spec.a.item(), b=spec.b.item())
    if kind == "randomized":
        kw.update(xi=spec.xi, M=spec.M)
    if kind == "reverse":
        kw.update(W=spec.W_k.value)
    got = mapping_matrix(spec, h).value
    want = loop_mapping(kind, h, **kw)
    err = np.abs(got - want).max()
    assert oracle(f"{kind} mapping vs O(m^2) loops", "brute-force", 1e-10, err < 1e-10, seed)
    assert np.array_equal(got, got.T)
    for i in range(3):
        assert kernel_eval(spec, h[i], h[i + 1]) == pytest.approx(want[i, i + 1], rel=1e-10)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_gaussian_diagonal_is_one(seed, oracle):
    h = np.random.default_rng(seed).standard_normal((7, 5)) * 10
    diag = np.diag(mapping_matrix(_spec("gaussian"), h).value)
    assert oracle("gaussian mapping diagonal = 1", "brute-force", 0, np.array_equal(diag, np.ones(7)), seed)


@pytest.mark.parametrize("kind", ["gaussian", "polynomial", "sigmoid", "randomized", "reverse"])
def test_distance_gradient_through_each_kernel(kind, oracle):
    rng = np.random.default_rng(7)
    spec = make_kernel(kind, 4, rng, t=2)
    hs = ad.parameter(rng.standard_normal((5, 4)) * 0.5)
    mt = mapping_matrix(spec, rng.standard_normal((5, 4)) * 0.5).value
    params = [hs] + [p for p in spec.parameters() if kind in ("sigmoid", "reverse")]
    err = grad_check(lambda: mapping_distance(mapping_matrix(spec, hs), mt), params)
    assert oracle(f"distance gradient via {kind} kernel", "finite-difference", 1e-4, err < 1e-4, detail=f"err={err:.1e}")


def test_detached_kernel_gets_no_gradient():
    rng = np.random.default_rng(0)
    spec = make_kernel("reverse", 3, rng)
    hs = ad.parameter(rng.standard_normal((4, 3)))
    ad.backward(ad.sum_all(mapping_matrix(spec, hs, detach_kernel=True)))
    assert spec.W_k.grad is None and hs.grad is not None


def test_reconstruction_zero_decoder_is_mean_square(oracle):
    rng = np.random.default_rng(0)
    spec = make_kernel("reverse", 3, rng, input_dim=5)
    spec.decoder_W.value[:] = 0
    x0 = rng.standard_normal((4, 5))
    v = reconstruction_loss(spec, rng.standard_normal((4, 3)), x0).item()
    assert oracle("L_re with zero decoder = mean(X0^2)", "hand-value", 1e-12, abs(v - (x0**2).mean()) < 1e-12)


@pytest.mark.parametrize("act", ["sigmoid", "relu"])
def test_reconstruction_gradient(act, oracle):
    rng = np.random.default_rng(11)
    spec = make_kernel("reverse", 4, rng, input_dim=3, nonlinearity=act)
    h = rng.standard_normal((5, 4))
    x0 = rng.standard_normal((5, 3))
    err = grad_check(lambda: reconstruction_loss(spec, h, x0), spec.parameters())
    assert oracle(f"L_re gradient ({act})", "finite-difference", 1e-4, err < 1e-4, detail=f"err={err:.1e}")


def test_reconstruction_needs_reverse_kernel():
    with pytest.raises(KernelSpecError):
        reconstruction_loss(_spec("gaussian"), np.ones((2, 2)), np.ones((2, 2)))


def test_nhk_propagate_degrees():
    mat = np.array([[1.0, 0.5], [0.5, 1.0]])
    h = np.array([[2.0], [4.0]])
    assert np.allclose(nhk_propagate(mat, h, [1, 2]), [[3.0], [3.0]])
    with pytest.raises(ValueError):
        nhk_propagate(mat, h, [0, 1])
