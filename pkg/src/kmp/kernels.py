"""Heat-kernel style similarity functions over hidden representations.

A kernel turns the ``m x h`` hidden outputs of a batch of nodes into an
``m x m`` mapping matrix; the distillation loss compares the teacher's and
student's mapping matrices layer by layer. The trainable ``reverse`` kernel
also carries a linear decoder for its reconstruction objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

KERNEL_KINDS = ("sigmoid", "randomized", "polynomial", "gaussian", "reverse")
BASE_KERNELS = ("sigmoid", "randomized", "polynomial", "gaussian")


class KernelSpecError(ValueError):
    pass


@dataclass
class KernelSpec:
    kind: str
    # sigmoid: sigma(a <x, y> + b)
    a: ad.Tensor | None = None
    b: ad.Tensor | None = None
    # randomized: (1/t) sum_r exp(xi_r) sigma(M_r x)^T sigma(M_r y)
    xi: np.ndarray | None = None
    M: np.ndarray | None = None
    # polynomial: (<x, y> + c)^d
    c: float = 1.0
    d: int = 2
    # gaussian: exp(-|x - y|^2 / (4 T))
    T: float = 1.0
    # reverse: sigma(W_k x)^T sigma(W_k y), decoder h -> input dim
    W_k: ad.Tensor | None = None
    decoder_W: ad.Tensor | None = None
    decoder_b: ad.Tensor | None = None
    nonlinearity: str = "sigmoid"
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.kind not in KERNEL_KINDS:
            raise KernelSpecError(f"unknown kernel {self.kind!r}; expected one of {KERNEL_KINDS}")
        if self.kind == "gaussian" and not self.T > 0:
            raise KernelSpecError(f"gaussian kernel needs T > 0, got {self.T}")
        if self.kind == "polynomial" and (int(self.d) != self.d or self.d < 1):
            raise KernelSpecError(f"polynomial degree must be an integer >= 1, got {self.d}")
        if self.kind == "sigmoid" and (self.a is None or self.b is None):
            raise KernelSpecError("sigmoid kernel needs its projection (a, b)")
        if self.kind == "randomized" and (self.M is None or self.xi is None or self.M.shape[0] != self.xi.shape[0]):
            raise KernelSpecError("randomized kernel needs t matrices M and t weights xi")
        if self.kind == "reverse" and self.W_k is None:
            raise KernelSpecError("reverse kernel needs W_k")
        if self.nonlinearity not in ad.ACTIVATIONS:
            raise KernelSpecError(f"unknown nonlinearity {self.nonlinearity!r}")

    def parameters(self) -> list[ad.Tensor]:
        """Trainable tensors owned by the kernel (projection or W_k + decoder)."""
        if self.kind == "sigmoid":
            return [self.a, self.b]
        if self.kind == "reverse":
            return [t for t in (self.W_k, self.decoder_W, self.decoder_b) if t is not None]
        return []

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        if self.kind == "sigmoid":
            out = {"a": self.a.value, "b": self.b.value}
        elif self.kind == "randomized":
            out = {"xi": self.xi.reshape(1, -1), "M": self.M.reshape(self.M.shape[0], -1)}
        elif self.kind == "reverse":
            out = {"W_k": self.W_k.value}
            if self.decoder_W is not None:
                out["decoder_W"] = self.decoder_W.value
                out["decoder_b"] = self.decoder_b.value
        return {k: np.array(v, copy=True) for k, v in out.items()}


def make_kernel(
    kind: str,
    hidden_dim: int,
    rng: np.random.Generator,
    *,
    t: int = 8,
    c: float = 1.0,
    d: int = 2,
    T: float = 1.0,
    input_dim: int | None = None,
    nonlinearity: str = "sigmoid",
) -> KernelSpec:
    """Build a kernel with its defaults; random draws are fixed for the run."""
    if kind == "sigmoid":
        spec = KernelSpec(kind, a=ad.parameter([[1.0]], "kernel.a"), b=ad.parameter([[0.0]], "kernel.b"), nonlinearity=nonlinearity)
    elif kind == "randomized":
        spec = KernelSpec(kind, xi=rng.standard_normal(t), M=rng.standard_normal((t, hidden_dim, hidden_dim)), nonlinearity=nonlinearity)
    elif kind == "polynomial":
        spec = KernelSpec(kind, c=c, d=d)
    elif kind == "gaussian":
        spec = KernelSpec(kind, T=T)
    elif kind == "reverse":
        bound = np.sqrt(6.0 / (2 * hidden_dim))
        spec = KernelSpec(
            kind,
            W_k=ad.parameter(rng.uniform(-bound, bound, (hidden_dim, hidden_dim)), "kernel.W_k"),
            nonlinearity=nonlinearity,
        )
        if input_dim is not None:
            db = np.sqrt(6.0 / (hidden_dim + input_dim))
            spec.decoder_W = ad.parameter(rng.uniform(-db, db, (hidden_dim, input_dim)), "kernel.decoder_W")
            spec.decoder_b = ad.parameter(np.zeros((1, input_dim)), "kernel.decoder_b")
    else:
        raise KernelSpecError(f"unknown kernel {kind!r}; expected one of {KERNEL_KINDS}")
    spec.validate()
    return spec


def _sigma(name: str, x: np.ndarray) -> np.ndarray:
    return ad.ACTIVATIONS[name](ad.Tensor(x)).value


def kernel_eval(spec: KernelSpec, h_alpha, h_beta) -> float:
    """Kernel value for one pair of hidden vectors (reference, unbatched)."""
    spec.validate()
    x = np.asarray(h_alpha, dtype=np.float64).ravel()
    y = np.asarray(h_beta, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ad.DimensionError(f"kernel_eval: vector dims {x.shape} and {y.shape} differ")
    if spec.kind == "sigmoid":
        z = spec.a.item() * float(x @ y) + spec.b.item()
        return float(_sigma("sigmoid", np.array([[z]]))[0, 0])
    if spec.kind == "randomized":
        total = 0.0
        for xi, m in zip(spec.xi, spec.M):
            total += np.exp(xi) * float((_sigma(spec.nonlinearity, (m @ x)[None]) @ _sigma(spec.nonlinearity, (m @ y)[None]).T)[0, 0])
        return total / spec.xi.shape[0]
    if spec.kind == "polynomial":
        return float((x @ y + spec.c) ** spec.d)
    if spec.kind == "gaussian":
        return float(np.exp(-((x - y) ** 2).sum() / (4.0 * spec.T)))
    return reverse_kernel_eval(spec.W_k.value, x, y, spec.nonlinearity)


def reverse_kernel_eval(W_k, h_alpha, h_beta, nonlinearity: str = "sigmoid") -> float:
    w = np.asarray(W_k.value if isinstance(W_k, ad.Tensor) else W_k, dtype=np.float64)
    x = np.asarray(h_alpha, dtype=np.float64).ravel()
    y = np.asarray(h_beta, dtype=np.float64).ravel()
    if w.shape[0] != w.shape[1] or w.shape[1] != x.shape[0] or x.shape != y.shape:
        raise ad.DimensionError(f"reverse kernel: W_k {w.shape} with vectors {x.shape}, {y.shape}")
    zx = _sigma(nonlinearity, (w @ x)[None])
    zy = _sigma(nonlinearity, (w @ y)[None])
    return float((zx @ zy.T)[0, 0])


def mapping_matrix(spec: KernelSpec, hidden: ad.Tensor, detach_kernel: bool = False) -> ad.Tensor:
    """``Mat[i, j] = kernel(h_i, h_j)`` over the rows of ``hidden``.

    Differentiable with respect to ``hidden`` and, unless ``detach_kernel``,
    the kernel's own parameters.
    """
    spec.validate()
    hidden = ad.as_tensor(hidden)
    if hidden.rows < 2:
        raise ValueError(f"mapping matrix needs at least 2 rows, got {hidden.rows}")
    act = ad.ACTIVATIONS[spec.nonlinearity]
    if spec.kind == "gaussian":
        return ad.exp(ad.pairwise_sqdist(hidden) * (-1.0 / (4.0 * spec.T)))
    if spec.kind == "polynomial":
        return ad.power(ad.gram(hidden) + spec.c, int(spec.d))
    if spec.kind == "sigmoid":
        a, b = (spec.a.detach(), spec.b.detach()) if detach_kernel else (spec.a, spec.b)
        return ad.sigmoid(ad.gram(hidden) * a + b)
    if spec.kind == "randomized":
        t = spec.xi.shape[0]
        total = None
        for xi, m in zip(spec.xi, spec.M):
            z = act(ad.matmul(hidden, ad.Tensor(m.T)))
            term = ad.gram(z) * (np.exp(xi) / t)
            total = term if total is None else total + term
        return total
    w = spec.W_k.detach() if detach_kernel else spec.W_k
    return ad.gram(act(ad.matmul(hidden, ad.transpose(w))))


def mapping_distance(mat_s: ad.Tensor, mat_t) -> ad.Tensor:
    """Squared Frobenius distance divided by ``m^2``; ``mat_t`` is treated as constant."""
    mat_t = mat_t.value if isinstance(mat_t, ad.Tensor) else np.asarray(mat_t, dtype=np.float64)
    mat_s = ad.as_tensor(mat_s)
    if mat_s.shape != mat_t.shape:
        raise ad.DimensionError(f"mapping_distance: shapes {mat_s.shape} and {mat_t.shape} differ")
    m = mat_s.rows
    return ad.sum_all(ad.square(mat_s - ad.Tensor(mat_t))) * (1.0 / (m * m))


def reconstruction_loss(spec: KernelSpec, h_last, x0) -> ad.Tensor:
    """``|Decode(sigma(H W_k^T)) - X0|^2 / (m d)`` for the reverse kernel."""
    if spec.kind != "reverse" or spec.decoder_W is None:
        raise KernelSpecError("reconstruction loss needs a reverse kernel with a decoder")
    h_last = ad.as_tensor(h_last)
    x0 = np.asarray(x0.toarray() if hasattr(x0, "toarray") else x0, dtype=np.float64)
    if h_last.rows != x0.shape[0] or h_last.cols != spec.W_k.rows or x0.shape[1] != spec.decoder_W.cols:
        raise ad.DimensionError(
            f"reconstruction_loss: H {h_last.shape}, X0 {x0.shape}, W_k {spec.W_k.shape}, decoder {spec.decoder_W.shape}"
        )
    act = ad.ACTIVATIONS[spec.nonlinearity]
    z = act(ad.matmul(h_last, ad.transpose(spec.W_k)))
    recon = ad.matmul(z, spec.decoder_W) + spec.decoder_b
    m, d = x0.shape
    return ad.sum_all(ad.square(recon - ad.Tensor(x0))) * (1.0 / (m * d))


def nhk_propagate(mat, hidden, degrees) -> np.ndarray:
    """One smoothing step ``H'_a = sum_b Mat[a, b] H_b / degree_b`` (diagnostic)."""
    mat = np.asarray(mat.value if isinstance(mat, ad.Tensor) else mat, dtype=np.float64)
    h = np.asarray(hidden.value if isinstance(hidden, ad.Tensor) else hidden, dtype=np.float64)
    deg = np.asarray(degrees, dtype=np.float64)
    if (deg < 1).any():
        raise ValueError("every node in a kernel mapping needs degree >= 1")
    return mat @ (h / deg[:, None])
