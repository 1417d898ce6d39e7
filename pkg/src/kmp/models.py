"""Teacher GNNs (GCN, mean-aggregator SAGE) and the student MLP.

Every forward returns a :class:`ForwardTrace` carrying the post-activation
outputs of each hidden layer, which the kernel-matching loss consumes.
Hidden layers run linear -> (batch norm) -> ReLU -> dropout; the last layer
is linear.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .graph import Graph, sampled_mean_aggregator
from .spectral import PeFusion, fused_linear
from .storage import read_checkpoint, write_checkpoint

KINDS = ("gcn", "sage", "mlp")

# teacher hyperparameters (2 layers each)
TEACHER_DEFAULTS = {
    "gcn": {"hidden_dim": 64, "dropout": 0.8, "weight_decay": 1e-3, "input_dropout": 0.8},
    # hidden dropout 0 overfits 140 labels under batch norm; dropping raw inputs compensates
    "sage": {"hidden_dim": 128, "dropout": 0.0, "weight_decay": 5e-4, "input_dropout": 0.8},
}


@dataclass
class ForwardTrace:
    logits: ad.Tensor
    hidden: list[ad.Tensor]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out))


class Model:
    """Layered weights for one of ``gcn``, ``sage`` or ``mlp``.

    ``dims`` is ``[input, hidden..., classes]``; for an MLP with PE fusion the
    input entry is the raw feature dimension and the first weight matrix is
    sized for the fused width.
    """

    def __init__(
        self,
        kind: str,
        dims: list[int],
        dropout: float = 0.0,
        norm: str = "none",
        rng: np.random.Generator | None = None,
        pe_mode: str = "off",
        pe_k: int = 0,
        fanout: int | None = None,
        input_dropout: float | None = None,
    ):
        if kind not in KINDS:
            raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")
        if norm not in ("batch", "none"):
            raise ValueError(f"unknown norm {norm!r}")
        if len(dims) < 2:
            raise ValueError("a model needs at least input and output dims")
        if pe_mode != "off" and kind != "mlp":
            raise ValueError("PE fusion is only defined for the MLP student")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kind = kind
        self.dims = list(dims)
        self.dropout = dropout
        self.norm = norm
        self.fanout = fanout
        # teachers drop every layer input, raw features included
        self.input_dropout = (dropout if kind != "mlp" else 0.0) if input_dropout is None else input_dropout
        self.fusion = PeFusion(pe_mode, pe_k, dims[0], rng) if pe_mode != "off" else None
        self.layers: list[dict[str, ad.Tensor]] = []
        for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
            if i == 0 and self.fusion is not None:
                fi = self.fusion.output_dim()
            layer = {"b": ad.parameter(np.zeros((1, fo)), f"layer{i}.b")}
            if kind == "sage":
                layer["W_self"] = ad.parameter(_glorot(rng, fi, fo), f"layer{i}.W_self")
                layer["W_neigh"] = ad.parameter(_glorot(rng, fi, fo), f"layer{i}.W_neigh")
            else:
                layer["W"] = ad.parameter(_glorot(rng, fi, fo), f"layer{i}.W")
            self.layers.append(layer)
        self.bn: list[tuple[ad.Tensor, ad.Tensor, ad.BatchNormState]] = []
        if norm == "batch":
            for i, h in enumerate(dims[1:-1]):
                self.bn.append(
                    (
                        ad.parameter(np.ones((1, h)), f"bn{i}.gamma"),
                        ad.parameter(np.zeros((1, h)), f"bn{i}.beta"),
                        ad.BatchNormState(h),
                    )
                )

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def hidden_dims(self) -> list[int]:
        return self.dims[1:-1]

    def parameters(self) -> list[ad.Tensor]:
        out: list[ad.Tensor] = []
        if self.fusion is not None:
            out += self.fusion.parameters()
        for layer in self.layers:
            out += list(layer.values())
        for gamma, beta, _ in self.bn:
            out += [gamma, beta]
        return out

    # -- shared hidden-layer tail
    def _post(self, h: ad.Tensor, i: int, training: bool, rng, hidden: list) -> ad.Tensor:
        if self.bn:
            gamma, beta, state = self.bn[i]
            h = ad.batch_norm(h, gamma, beta, state, training)
        h = ad.relu(h)
        hidden.append(h)
        return ad.dropout(h, self.dropout, rng, training)

    # -- checkpoint state
    def state(self) -> dict[str, np.ndarray]:
        arrays = {}
        if self.fusion is not None:
            arrays["pe.K0"] = self.fusion.K0.value
            arrays["pe.b0"] = self.fusion.b0.value
        for i, layer in enumerate(self.layers):
            for name, t in layer.items():
                arrays[f"layer{i}.{name}"] = t.value
        for i, (gamma, beta, st) in enumerate(self.bn):
            arrays[f"bn{i}.gamma"] = gamma.value
            arrays[f"bn{i}.beta"] = beta.value
            arrays[f"bn{i}.running_mean"] = st.running_mean
            arrays[f"bn{i}.running_var"] = st.running_var
        return {k: v.copy() for k, v in arrays.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        if self.fusion is not None:
            self.fusion.K0.value = arrays["pe.K0"].copy()
            self.fusion.b0.value = arrays["pe.b0"].copy()
        for i, layer in enumerate(self.layers):
            for name, t in layer.items():
                src = arrays[f"layer{i}.{name}"]
                if src.shape != t.value.shape:
                    raise ad.DimensionError(f"layer{i}.{name}: checkpoint {src.shape} vs model {t.value.shape}")
                t.value = src.copy()
        for i, (gamma, beta, st) in enumerate(self.bn):
            gamma.value = arrays[f"bn{i}.gamma"].copy()
            beta.value = arrays[f"bn{i}.beta"].copy()
            st.running_mean = arrays[f"bn{i}.running_mean"].copy()
            st.running_var = arrays[f"bn{i}.running_var"].copy()

    def config(self) -> dict:
        return {
            "kind": self.kind,
            "dims": self.dims,
            "dropout": self.dropout,
            "norm": self.norm,
            "pe_mode": self.fusion.mode if self.fusion else "off",
            "pe_k": self.fusion.k if self.fusion else 0,
            "fanout": self.fanout,
            "input_dropout": self.input_dropout,
        }

    def copy(self) -> "Model":
        twin = Model(**self.config())
        twin.load_state(self.state())
        return twin

    def checksum(self) -> float:
        return float(sum(np.abs(v).sum() for v in self.state().values()))


def save_model(path, model: Model, extra: dict | None = None, extra_arrays: dict | None = None) -> None:
    arrays = model.state()
    for k, v in (extra_arrays or {}).items():
        arrays[f"extra.{k}"] = v
    write_checkpoint(path, model.kind, arrays, {"model": model.config(), **(extra or {})})


def load_model(path) -> tuple[Model, dict, dict[str, np.ndarray]]:
    kind, arrays, meta = read_checkpoint(path)
    cfg = meta["model"]
    if cfg["kind"] != kind:
        raise ValueError(f"{path}: kind tag {kind!r} disagrees with metadata {cfg['kind']!r}")
    model = Model(**cfg)
    model.load_state(arrays)
    extras = {k[len("extra.") :]: v for k, v in arrays.items() if k.startswith("extra.")}
    return model, meta, extras


# ---------------------------------------------------------------------------
# forwards


def _input_matmul(x, w: ad.Tensor) -> ad.Tensor:
    if sp.issparse(x):
        return ad.spmm(x, w)
    return ad.matmul(ad.as_tensor(x), w)


def _drop_input(x, model: Model, train_mode: bool, rng):
    if not train_mode or model.input_dropout <= 0:
        return x
    if sp.issparse(x):
        return ad.sparse_dropout(sp.csr_matrix(x), model.input_dropout, rng, True)
    return ad.dropout(ad.as_tensor(x), model.input_dropout, rng, True)


def gcn_forward(graph: Graph, model: Model, train_mode: bool = False, rng=None, features=None) -> ForwardTrace:
    """``H' = A_hat H W + b`` per layer over the whole graph."""
    if model.kind != "gcn":
        raise ValueError(f"gcn_forward got a {model.kind} model")
    x = graph.features if features is None else features
    if x.shape[1] != model.dims[0]:
        raise ad.DimensionError(f"gcn_forward: features {x.shape} vs input dim {model.dims[0]}")
    a_hat = graph.gcn_operator
    hidden: list[ad.Tensor] = []
    h = _drop_input(x, model, train_mode, rng)
    last = model.num_layers - 1
    for i, layer in enumerate(model.layers):
        h = ad.spmm(a_hat, _input_matmul(h, layer["W"])) + layer["b"]
        if i < last:
            h = model._post(h, i, train_mode, rng, hidden)
    return ForwardTrace(logits=h, hidden=hidden)


def sage_forward(graph: Graph, model: Model, train_mode: bool = False, rng=None, features=None) -> ForwardTrace:
    """``H' = H W_self + mean_neighbors(H) W_neigh + b``; isolated mean is 0."""
    if model.kind != "sage":
        raise ValueError(f"sage_forward got a {model.kind} model")
    x = graph.features if features is None else features
    if x.shape[1] != model.dims[0]:
        raise ad.DimensionError(f"sage_forward: features {x.shape} vs input dim {model.dims[0]}")
    hidden: list[ad.Tensor] = []
    h = _drop_input(x, model, train_mode, rng)
    last = model.num_layers - 1
    for i, layer in enumerate(model.layers):
        if train_mode and model.fanout:
            agg = sampled_mean_aggregator(graph, model.fanout, rng)
        else:
            agg = graph.mean_operator
        h = _input_matmul(h, layer["W_self"]) + ad.spmm(agg, _input_matmul(h, layer["W_neigh"])) + layer["b"]
        if i < last:
            h = model._post(h, i, train_mode, rng, hidden)
    return ForwardTrace(logits=h, hidden=hidden)


def mlp_forward(features, model: Model, train_mode: bool = False, rng=None, pe=None) -> ForwardTrace:
    """Row-wise MLP; reads node features (and PE rows) only, never a graph."""
    if model.kind != "mlp":
        raise ValueError(f"mlp_forward got a {model.kind} model")
    if features.shape[1] != model.dims[0]:
        raise ad.DimensionError(f"mlp_forward: features {features.shape} vs input dim {model.dims[0]}")
    if model.fusion is not None and pe is None:
        raise ValueError("this student fuses PE; pass the PE rows")
    hidden: list[ad.Tensor] = []
    last = model.num_layers - 1
    h = None
    for i, layer in enumerate(model.layers):
        if i == 0:
            h = fused_linear(features, pe, model.fusion, layer["W"], layer["b"])
        else:
            h = ad.matmul(h, layer["W"]) + layer["b"]
        if i < last:
            h = model._post(h, i, train_mode, rng, hidden)
    return ForwardTrace(logits=h, hidden=hidden)


def teacher_forward(graph: Graph, model: Model, train_mode: bool = False, rng=None, features=None) -> ForwardTrace:
    if model.kind == "gcn":
        return gcn_forward(graph, model, train_mode, rng, features)
    if model.kind == "sage":
        return sage_forward(graph, model, train_mode, rng, features)
    raise ValueError(f"{model.kind!r} is not a teacher kind")


def build_teacher(
    kind: str, in_dim: int, num_classes: int, rng, hidden_dim=None, dropout=None, norm="batch", num_layers=2, fanout=None, input_dropout=None
) -> Model:
    if kind not in TEACHER_DEFAULTS:
        raise ValueError(f"unknown teacher {kind!r}; expected gcn or sage")
    d = TEACHER_DEFAULTS[kind]
    hidden_dim = d["hidden_dim"] if hidden_dim is None else hidden_dim
    dropout = d["dropout"] if dropout is None else dropout
    input_dropout = d["input_dropout"] if input_dropout is None else input_dropout
    dims = [in_dim] + [hidden_dim] * (num_layers - 1) + [num_classes]
    return Model(kind, dims, dropout=dropout, norm=norm, rng=rng, fanout=fanout, input_dropout=input_dropout)


def build_student(teacher_hidden: list[int], in_dim: int, num_classes: int, rng, dropout=0.0, norm="none", pe_mode="off", pe_k=0) -> Model:
    """Student MLP whose hidden widths equal the teacher's (required for matching)."""
    dims = [in_dim] + list(teacher_hidden) + [num_classes]
    return Model("mlp", dims, dropout=dropout, norm=norm, rng=rng, pe_mode=pe_mode, pe_k=pe_k)
