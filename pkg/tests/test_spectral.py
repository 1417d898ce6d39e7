import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kmp import autodiff as ad
from kmp.graph import build_graph, normalized_laplacian
from kmp.spectral import (
    EigenError,
    PeFusion,
    SelectionError,
    eigendecompose,
    fuse_pe,
    fused_linear,
    laplacian_pe,
    select_pe,
)
from oracles import grad_check


def _cycle(n):
    return build_graph([(i, (i + 1) % n) for i in range(n)], np.zeros((n, 2)))


def test_two_node_path_eigenpairs(oracle):
    lap = normalized_laplacian(build_graph([(0, 1)], np.zeros((2, 1))))
    for method in ("lapack", "jacobi"):
        w, v = eigendecompose(lap, method)
        ok = np.allclose(w, [0, 2], atol=1e-12)
        ok &= np.allclose(np.abs(v[:, 0]), 1 / np.sqrt(2)) and np.allclose(np.abs(v[:, 1]), 1 / np.sqrt(2))
        assert oracle(f"2-node path eigenpairs ({method})", "hand-value", 1e-12, ok)


def test_identity_has_unit_eigenvalues():
    w, _ = eigendecompose(np.eye(5), "jacobi")
    assert np.allclose(w, 1.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_random_symmetric_reconstruction(seed, oracle):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((8, 8))
    a = a + a.T
    for method in ("lapack", "jacobi"):
        w, v = eigendecompose(a, method)
        err = np.abs(v @ np.diag(w) @ v.T - a).max()
        res = np.linalg.norm(a @ v - v * w, axis=0).max()
        assert np.all(np.diff(w) >= 0)
        assert oracle(f"8x8 reconstruction ({method})", "eigenresidual", 1e-9, err < 1e-9 and res < 1e-8 * 8, seed, f"err={err:.1e}")


def test_jacobi_agrees_with_lapack_on_a_graph(karate):
    lap = normalized_laplacian(karate.graph)
    w1, _ = eigendecompose(lap, "lapack")
    w2, _ = eigendecompose(lap, "jacobi")
    assert np.allclose(w1, w2, atol=1e-10)


def test_eigendecompose_rejects_asymmetric():
    a = np.eye(3)
    a[0, 1] = 1e-6
    with pytest.raises(ValueError, match="symmetric"):
        eigendecompose(a)


def test_jacobi_reports_non_convergence():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((12, 12))
    from kmp.spectral import _jacobi_eigh

    with pytest.raises(EigenError, match="residual"):
        _jacobi_eigh(a + a.T, max_sweeps=1)


def test_cycle_four_smallest_nontrivial(oracle):
    pe = laplacian_pe(_cycle(4), k=1)
    assert oracle("C4 smallest non-trivial eigenvalue 1", "hand-value", 1e-12, abs(pe.eigenvalues[0] - 1.0) < 1e-12)


def test_two_components_skip_two_zeros():
    g = build_graph([(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)], np.zeros((6, 1)))
    pe = laplacian_pe(g, k=1)
    assert pe.eigenvalues[0] > 1e-10
    w, _ = np.linalg.eigh(normalized_laplacian(g))
    assert np.isclose(pe.eigenvalues[0], w[2])


def test_select_pe_too_large_k():
    with pytest.raises(SelectionError):
        laplacian_pe(_cycle(4), k=4)


def test_sign_convention_is_flip_invariant():
    rng = np.random.default_rng(3)
    w = np.array([0.0, 0.5, 0.9, 1.3])
    v, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    a = select_pe(w, v, 2)
    b = select_pe(w, v * np.array([1, -1, -1, 1]), 2)
    assert np.array_equal(a.vectors, b.vectors)


def test_pe_columns_orthonormal_and_diagonalise(karate):
    pe = laplacian_pe(karate.graph, k=4)
    assert np.abs(pe.vectors.T @ pe.vectors - np.eye(4)).max() < 1e-8
    lap = normalized_laplacian(karate.graph, isolated="self_loop")
    m = pe.vectors.T @ lap @ pe.vectors
    assert np.abs(m - np.diag(np.diag(m))).max() < 1e-8
    assert np.all(np.diff(pe.eigenvalues) >= 0) and pe.eigenvalues.min() > 1e-10


def test_pe_cache_skips_eigendecomposition(karate, tmp_path, caplog):
    path = tmp_path / "pe.bin"
    with caplog.at_level(logging.INFO, logger="kmp.spectral"):
        first = laplacian_pe(karate.graph, 3, cache=path)
        caplog.clear()
        second = laplacian_pe(karate.graph, 3, cache=path)
    assert "PE cache hit" in caplog.text and "eigendecomposition" not in caplog.text
    assert np.array_equal(first.vectors, second.vectors)


def test_fuse_shapes_and_mul_identity(rng):
    x = rng.standard_normal((5, 3))
    pe = rng.standard_normal((5, 2))
    cat = PeFusion("concat", 2, 3, rng)
    assert fuse_pe(x, pe, cat).shape == (5, 6)
    mul = PeFusion("mul", 2, 3, rng)
    mul.K0.value[:] = 0.0
    mul.b0.value[:] = 1.0
    assert np.allclose(fuse_pe(x, pe, mul).value, x)
    with pytest.raises(ad.DimensionError):
        fuse_pe(x, pe[:, :1], cat)


def test_fused_linear_matches_materialised_concat(rng):
    x = rng.standard_normal((6, 4))
    pe = rng.standard_normal((6, 3))
    fusion = PeFusion("concat", 3, 4, rng)
    w = ad.parameter(rng.standard_normal((8, 5)))
    b = ad.parameter(rng.standard_normal((1, 5)))
    direct = ad.matmul(fuse_pe(x, pe, fusion), w) + b
    assert np.allclose(fused_linear(x, pe, fusion, w, b).value, direct.value)


def test_embedding_gradient_matches_finite_differences(rng, oracle):
    x = rng.standard_normal((5, 3))
    pe = rng.standard_normal((5, 2))
    for mode in ("concat", "mul"):
        fusion = PeFusion(mode, 2, 3, rng)
        w = ad.parameter(rng.standard_normal((fusion.output_dim(), 2)))
        b = ad.parameter(np.zeros((1, 2)))
        err = grad_check(lambda: ad.sum_all(ad.square(fused_linear(x, pe, fusion, w, b))), [fusion.K0, fusion.b0, w])
        assert oracle(f"PE embedding K0 gradient ({mode})", "finite-difference", 1e-4, err < 1e-4, detail=f"err={err:.1e}")
