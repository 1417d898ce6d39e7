"""Laplacian positional encodings and their fusion into node features."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .graph import Graph, normalized_laplacian

log = logging.getLogger(__name__)

TRIVIAL_EIGENVALUE = 1e-10


class EigenError(ArithmeticError):
    pass


class SelectionError(ValueError):
    pass


def _jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100):
    """Cyclic Jacobi rotations; fine for the small matrices used in checks."""
    a = a.copy()
    n = a.shape[0]
    v = np.eye(n)
    scale = max(np.abs(a).max(), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt((np.tril(a, -1) ** 2).sum())
        if off <= tol * scale * n:
            return np.diag(a).copy(), v
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(a)
    resid = np.linalg.norm(a - np.diag(w))
    raise EigenError(f"Jacobi did not converge in {max_sweeps} sweeps; off-diagonal residual {resid:.3e}")


def eigendecompose(lap: np.ndarray, method: str = "lapack") -> tuple[np.ndarray, np.ndarray]:
    """Ascending eigenvalues and column eigenvectors of a symmetric matrix.

    ``method="lapack"`` calls ``numpy.linalg.eigh``; ``"jacobi"`` runs the
    in-package rotation solver. Both are checked against the residual bound
    ``|A v - lambda v| < 1e-8 n`` before returning.
    """
    lap = np.asarray(lap, dtype=np.float64)
    if lap.ndim != 2 or lap.shape[0] != lap.shape[1]:
        raise ValueError(f"eigendecompose needs a square matrix, got {lap.shape}")
    asym = np.abs(lap - lap.T).max() if lap.size else 0.0
    if asym > 1e-9:
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    if method == "lapack":
        w, v = np.linalg.eigh(lap)
    elif method == "jacobi":
        w, v = _jacobi_eigh(lap)
    else:
        raise ValueError(f"unknown eigensolver {method!r}")
    order = np.argsort(w, kind="stable")
    w, v = w[order], v[:, order]
    n = lap.shape[0]
    resid = np.linalg.norm(lap @ v - v * w, axis=0).max() if n else 0.0
    if resid >= 1e-8 * max(n, 1):
        raise EigenError(f"eigenpair residual {resid:.3e} exceeds {1e-8 * n:.3e}")
    return w, v


@dataclass(frozen=True)
class PositionalEncoding:
    k: int
    vectors: np.ndarray
    eigenvalues: np.ndarray
    signs: np.ndarray


def fix_signs(vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip each column so its largest-magnitude entry is positive."""
    idx = np.abs(vectors).argmax(axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs, signs


def select_pe(eigenvalues: np.ndarray, eigenvectors: np.ndarray, k: int) -> PositionalEncoding:
    """The ``k`` smallest eigenpairs above the triviality threshold, sign-fixed."""
    nontrivial = np.flatnonzero(eigenvalues > TRIVIAL_EIGENVALUE)
    if k < 1 or nontrivial.size < k:
        raise SelectionError(f"requested k={k} but only {nontrivial.size} non-trivial eigenvalues exist")
    pick = nontrivial[:k]
    vecs, signs = fix_signs(eigenvectors[:, pick])
    return PositionalEncoding(k=k, vectors=vecs, eigenvalues=eigenvalues[pick].copy(), signs=signs)


def laplacian_pe(graph: Graph, k: int = 8, cache: str | Path | None = None, method: str = "lapack") -> PositionalEncoding:
    """Laplacian PE for ``graph``; isolated nodes get a self-loop (trivial)."""
    from .storage import load_pe_cache, save_pe_cache

    if cache is not None and Path(cache).exists():
        pe = load_pe_cache(cache, graph)
        if pe is not None and pe.k == k:
            log.info("PE cache hit %s", cache)
            return pe
    log.info("eigendecomposition of %dx%d Laplacian", graph.n, graph.n)
    lap = normalized_laplacian(graph, isolated="self_loop")
    w, v = eigendecompose(lap, method=method)
    pe = select_pe(w, v, k)
    if cache is not None:
        save_pe_cache(cache, pe, graph)
    return pe


# ---------------------------------------------------------------------------
# fusion


class PeFusion:
    """Learned affine embedding of PE rows into feature space, then fusion.

    ``x_pos = PE K0 + b0`` has the feature dimension ``d``; ``concat`` appends
    it to the features, ``mul`` multiplies elementwise.
    """

    def __init__(self, mode: str, k: int, d: int, rng: np.random.Generator):
        if mode not in ("concat", "mul"):
            raise ValueError(f"unknown PE fusion mode {mode!r}")
        self.mode = mode
        bound = 1.0 / np.sqrt(k)
        self.K0 = ad.parameter(rng.uniform(-bound, bound, (k, d)), "pe.K0")
        self.b0 = ad.parameter(rng.uniform(-bound, bound, (1, d)), "pe.b0")

    @property
    def k(self) -> int:
        return self.K0.rows

    @property
    def d(self) -> int:
        return self.K0.cols

    def parameters(self) -> list[ad.Tensor]:
        return [self.K0, self.b0]

    def embed(self, pe: ad.Tensor) -> ad.Tensor:
        return ad.matmul(pe, self.K0) + self.b0

    def output_dim(self) -> int:
        return 2 * self.d if self.mode == "concat" else self.d


def fuse_pe(features, pe, fusion: PeFusion) -> ad.Tensor:
    """Materialise ``concat[X; x_pos]`` (n x 2d) or ``X * x_pos`` (n x d)."""
    x = ad.as_tensor(features.toarray() if sp.issparse(features) else features)
    pe = ad.as_tensor(pe)
    if pe.cols != fusion.k:
        raise ad.DimensionError(f"fuse_pe: PE shape {pe.shape} vs embedding {fusion.K0.shape}")
    if x.cols != fusion.d or x.rows != pe.rows:
        raise ad.DimensionError(f"fuse_pe: features {x.shape} vs PE {pe.shape} / d={fusion.d}")
    pos = fusion.embed(pe)
    if fusion.mode == "concat":
        return ad.concat_cols([x, pos])
    return ad.mul(x, pos)


def fused_linear(features, pe, fusion: PeFusion | None, weight: ad.Tensor, bias: ad.Tensor) -> ad.Tensor:
    """``fuse_pe(features, pe) @ weight + bias`` without materialising n x 2d.

    For ``concat`` the PE half is reassociated as ``PE (K0 W_p) + b0 W_p``,
    which keeps a 1433-dim embedding cheap. Sparse features stay sparse.
    """
    if fusion is None:
        if sp.issparse(features):
            return ad.spmm(features, weight) + bias
        return ad.matmul(ad.as_tensor(features), weight) + bias
    d = fusion.d
    if features.shape[1] != d:
        raise ad.DimensionError(f"fused_linear: features {features.shape} vs d={d}")
    pe = ad.as_tensor(pe)
    if fusion.mode == "mul":
        fused = fuse_pe(features, pe, fusion)
        return ad.matmul(fused, weight) + bias
    if weight.rows != 2 * d:
        raise ad.DimensionError(f"fused_linear: weight {weight.shape} vs fused width {2 * d}")
    w_x = _row_slice(weight, 0, d)
    w_p = _row_slice(weight, d, 2 * d)
    if sp.issparse(features):
        xw = ad.spmm(features, w_x)
    else:
        xw = ad.matmul(ad.as_tensor(features), w_x)
    pw = ad.matmul(pe, ad.matmul(fusion.K0, w_p)) + ad.matmul(fusion.b0, w_p)
    return xw + pw + bias


def _row_slice(t: ad.Tensor, lo: int, hi: int) -> ad.Tensor:
    return ad.slice_rows(t, lo, hi)
