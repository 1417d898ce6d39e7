"""Distillation losses and the three-stage training pipeline.

Stage I trains a GNN teacher and keeps its logits. Stage II trains a
graph-free MLP student on true labels, teacher soft targets and (optionally)
kernel mapping-matrix matching of hidden layers. Stage III is plain MLP
inference from node features, plus precomputed PE rows when used.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .graph import Graph, SplitSpec, induced_subgraph
from .kernels import KernelSpec, make_kernel, mapping_distance, mapping_matrix, reconstruction_loss
from .models import Model, build_student, build_teacher, mlp_forward, teacher_forward
from .spectral import PositionalEncoding, laplacian_pe

log = logging.getLogger(__name__)


class TrainingDiverged(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TeacherConfig:
    kind: str = "gcn"
    hidden_dim: int | None = None
    dropout: float | None = None
    weight_decay: float | None = None
    lr: float = 0.01
    norm: str = "batch"
    num_layers: int = 2
    max_epochs: int = 1000
    patience: int = 50
    fanout: int | None = None
    l2_coupled: bool = False
    input_dropout: float | None = None


@dataclass
class DistillConfig:
    gamma: float = 0.5
    theta: float = 0.4
    tau: float = 1.0
    kernel: str = "gaussian"
    kernel_T: float = 1.0
    kernel_c: float = 1.0
    kernel_d: int = 2
    kernel_t: int = 8
    kernel_nonlinearity: str = "sigmoid"
    train_kernel_proj: bool = False
    pe: str = "off"
    pe_k: int = 8
    layers: tuple[int, ...] | None = None
    lr: float = 5e-3
    weight_decay: float = 0.0
    dropout: float = 0.5
    norm: str = "none"
    max_epochs: int = 1000
    patience: int = 50
    ties: str = "latest"
    batch_size: int = 512

    def validate(self) -> None:
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not self.tau > 0:
            raise ValueError(f"temperature must be > 0, got {self.tau}")
        if self.pe not in ("off", "concat", "mul"):
            raise ValueError(f"pe must be off, concat or mul, got {self.pe!r}")


# ---------------------------------------------------------------------------
# losses


def kl_divergence(p, q) -> ad.Tensor:
    """Mean over rows of ``sum p log(p / q)``; ``p`` constant, ``q`` clamped at 1e-12."""
    p = np.asarray(p.value if isinstance(p, ad.Tensor) else p, dtype=np.float64)
    q = ad.as_tensor(q)
    if (p < 0).any() or (q.value < 0).any():
        raise ValueError("KL divergence got negative probabilities")
    return ad.kl_rows(p, ad.log(ad.clamp_min(q, 1e-12)))


def soft_targets(teacher_logits: np.ndarray, tau: float) -> np.ndarray:
    z = teacher_logits / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def soft_loss(student_logits: ad.Tensor, teacher_logits: np.ndarray, tau: float) -> ad.Tensor:
    """``tau^2 KL(teacher_tau || student_tau)`` via a fused log-softmax."""
    p = soft_targets(np.asarray(teacher_logits), tau)
    log_q = ad.log_softmax(student_logits * (1.0 / tau))
    return ad.kl_rows(p, log_q) * (tau * tau)


def output_loss(labeled_logits, labels, soft_logits, teacher_logits, theta: float, tau: float) -> ad.Tensor:
    """``theta * CE(labeled) + (1 - theta) * soft-target KL``.

    Either side may be ``None`` when its weight is zero.
    """
    terms = []
    if theta > 0:
        if labeled_logits is None or labeled_logits.rows == 0:
            raise ValueError("theta > 0 needs at least one labeled node")
        terms.append(ad.cross_entropy(labeled_logits, labels) * theta)
    if theta < 1 and soft_logits is not None and soft_logits.rows > 0:
        terms.append(soft_loss(soft_logits, teacher_logits, tau) * (1.0 - theta))
    if not terms:
        raise ValueError("output loss has no active term")
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def total_loss(out_loss: ad.Tensor, mats_s: list, mats_t: list, gamma: float) -> ad.Tensor:
    """``L_out + (gamma / K) sum_l dis(Mat_s^l, Mat_t^l)``."""
    if len(mats_s) != len(mats_t):
        raise ValueError(f"{len(mats_s)} student vs {len(mats_t)} teacher mapping matrices")
    k = len(mats_s)
    if gamma == 0 or k == 0:
        return out_loss
    dist = None
    for ms, mt in zip(mats_s, mats_t):
        d = mapping_distance(ms, mt)
        dist = d if dist is None else dist + d
    return out_loss + dist * (gamma / k)


# ---------------------------------------------------------------------------
# helpers


def accuracy_of(logits: np.ndarray, labels: np.ndarray) -> float:
    if labels.size == 0:
        raise ValueError("accuracy over an empty id set")
    return float((logits.argmax(axis=1) == labels).mean())


def _rows(x, ids):
    return x[ids] if ids is not None else x


def _check_finite(loss: ad.Tensor, where: str, epoch: int) -> None:
    if not np.isfinite(loss.item()):
        raise TrainingDiverged(f"{where}: loss became {loss.item()} at epoch {epoch}")


class EarlyStopper:
    """Keeps the best-validation snapshot; stops after ``patience`` epochs without a gain.

    Validation accuracy ranks snapshots. Ties go to the lower validation loss
    (``ties="loss"``) or to the later epoch (``ties="latest"``); ties never
    restart the patience count.
    """

    def __init__(self, patience: int, model: Model, ties: str = "loss"):
        if ties not in ("loss", "latest"):
            raise ValueError(f"unknown tie policy {ties!r}")
        self.patience = patience
        self.ties = ties
        self.best_acc = -1.0
        self.best_loss = np.inf
        self.best_state = model.state()
        self.since = 0

    def update(self, acc: float, loss: float, model: Model) -> bool:
        better = acc > self.best_acc
        tie = acc == self.best_acc and (self.ties == "latest" or loss < self.best_loss)
        if better or tie:
            self.best_acc, self.best_loss, self.best_state = acc, loss, model.state()
        self.since = 0 if better else self.since + 1
        return self.since >= self.patience


class AccessAudit:
    """Records every original node id whose row enters a stage-II tensor."""

    def __init__(self):
        self.ids: set[int] = set()

    def touch(self, original_ids) -> None:
        self.ids.update(int(i) for i in np.asarray(original_ids).ravel())

    def assert_clean(self, forbidden) -> None:
        leaked = self.ids.intersection(int(i) for i in np.asarray(forbidden).ravel())
        if leaked:
            raise AssertionError(f"{len(leaked)} unobserved node(s) read during stage II, e.g. {sorted(leaked)[:5]}")


@dataclass
class View:
    """The part of the graph visible during stages I-II, in local ids."""

    graph: Graph
    ids: np.ndarray
    labeled: np.ndarray
    soft: np.ndarray
    validation: np.ndarray
    mode: str

    def original(self, local_ids) -> np.ndarray:
        return self.ids[np.asarray(local_ids, dtype=np.int64)]


def make_view(graph: Graph, split: SplitSpec) -> View:
    if split.mode == "transductive":
        return View(graph, np.arange(graph.n), split.train_labeled, split.soft_pool(), split.validation, split.mode)
    sub, ids = induced_subgraph(graph, split.observed)
    local = np.full(graph.n, -1, dtype=np.int64)
    local[ids] = np.arange(ids.size)
    parts = [local[split.train_labeled], local[split.soft_pool()], local[split.validation]]
    if any((p < 0).any() for p in parts):
        raise ValueError("inductive split has training/validation ids outside the observed set")
    return View(sub, ids, parts[0], parts[1], parts[2], split.mode)


# ---------------------------------------------------------------------------
# stage I


@dataclass
class TeacherResult:
    model: Model
    logits: np.ndarray  # n_view x C, eval mode
    hidden: list[np.ndarray]  # per hidden layer, n_view x h
    val_acc: float
    epochs: int
    seconds: float
    history: list[tuple[float, float]] = field(default_factory=list)


def train_teacher(view: View, config: TeacherConfig, seed: int) -> TeacherResult:
    rng = np.random.default_rng(seed)
    g = view.graph
    model = build_teacher(
        config.kind, g.feature_dim, g.num_classes, rng,
        hidden_dim=config.hidden_dim, dropout=config.dropout, norm=config.norm,
        num_layers=config.num_layers, fanout=config.fanout, input_dropout=config.input_dropout,
    )
    from .models import TEACHER_DEFAULTS

    wd = TEACHER_DEFAULTS[config.kind]["weight_decay"] if config.weight_decay is None else config.weight_decay
    opt = ad.Adam(model.parameters(), lr=config.lr, weight_decay=wd, l2_coupled=config.l2_coupled)
    labels = g.labels
    start = time.perf_counter()
    stopper = EarlyStopper(config.patience, model)
    history = []
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        trace = teacher_forward(g, model, True, rng)
        loss = ad.cross_entropy(ad.take_rows(trace.logits, view.labeled), labels[view.labeled])
        _check_finite(loss, "teacher", epoch)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        with ad.no_grad():
            ev = teacher_forward(g, model, False).logits.value
        val_logits = ev[view.validation]
        val_acc = accuracy_of(val_logits, labels[view.validation])
        val_loss = ad.cross_entropy(ad.Tensor(val_logits), labels[view.validation]).item()
        history.append((loss.item(), val_acc))
        if stopper.update(val_acc, val_loss, model):
            break
    model.load_state(stopper.best_state)
    with ad.no_grad():
        trace = teacher_forward(g, model, False)
    return TeacherResult(
        model=model,
        logits=trace.logits.value.copy(),
        hidden=[h.value.copy() for h in trace.hidden],
        val_acc=stopper.best_acc,
        epochs=epoch,
        seconds=time.perf_counter() - start,
        history=history,
    )


def stage1_pretrain(graph: Graph, split: SplitSpec, config: TeacherConfig, seed: int) -> tuple[TeacherResult, View]:
    view = make_view(graph, split)
    return train_teacher(view, config, seed), view


def teacher_test_accuracy(graph: Graph, split: SplitSpec, teacher: TeacherResult, view: View) -> float:
    """Teacher accuracy on test nodes; inductive runs see the full graph at inference."""
    if split.mode == "transductive":
        return accuracy_of(teacher.logits[split.test], graph.labels[split.test])
    with ad.no_grad():
        logits = teacher_forward(graph, teacher.model, False).logits.value
    return accuracy_of(logits[split.test], graph.labels[split.test])


# ---------------------------------------------------------------------------
# stage II


@dataclass
class StudentResult:
    model: Model
    kernel: KernelSpec | None
    pe: PositionalEncoding | None
    val_acc: float
    epochs: int
    seconds: float
    train_acc: float
    history: list[tuple[float, float]] = field(default_factory=list)


class Distiller:
    """Stage-II state for one student: model, kernel, optimisers and RNG.

    ``step`` runs one minibatch update (plus the kernel's reconstruction step
    for the reverse kernel); ``fit`` runs the epoch loop with early stopping.
    """

    def __init__(
        self,
        view: View,
        teacher: TeacherResult | None,
        config: DistillConfig,
        seed: int,
        pe: PositionalEncoding | None = None,
        audit: AccessAudit | None = None,
    ):
        config.validate()
        self.view, self.teacher, self.config, self.audit = view, teacher, config, audit
        self.rng = np.random.default_rng(seed)
        g = view.graph
        if teacher is None:
            hidden_dims = [64]
            self.theta, self.gamma = 1.0, 0.0
            self.pool = view.labeled
        else:
            hidden_dims = teacher.model.hidden_dims
            self.theta, self.gamma = config.theta, config.gamma
            self.pool = np.concatenate([view.labeled, view.soft]) if self.theta < 1 else view.labeled
        if config.pe == "off":
            pe = None
        elif pe is None:
            pe = laplacian_pe(g, config.pe_k)
        self.pe = pe
        self.student = build_student(
            hidden_dims, g.feature_dim, g.num_classes, self.rng,
            dropout=config.dropout, norm=config.norm,
            pe_mode=config.pe, pe_k=pe.k if pe is not None else 0,
        )
        self.layer_set = list(range(len(hidden_dims))) if config.layers is None else list(config.layers)
        self.kernel = None
        self.kernel_opt = None
        if teacher is not None and self.gamma > 0 and self.layer_set:
            for l in self.layer_set:
                if teacher.hidden[l].shape[1] != self.student.hidden_dims[l]:
                    raise ad.DimensionError(
                        f"layer {l}: teacher hidden {teacher.hidden[l].shape[1]} vs student {self.student.hidden_dims[l]}"
                    )
            self.kernel = make_kernel(
                config.kernel, hidden_dims[self.layer_set[0]], self.rng,
                t=config.kernel_t, c=config.kernel_c, d=config.kernel_d, T=config.kernel_T,
                input_dim=g.feature_dim, nonlinearity=config.kernel_nonlinearity,
            )
            if config.kernel == "reverse":
                self.kernel_opt = ad.Adam(self.kernel.parameters(), lr=config.lr)
        params = self.student.parameters()
        if self.kernel is not None and config.kernel == "sigmoid" and config.train_kernel_proj:
            params = params + self.kernel.parameters()
        self.opt = ad.Adam(params, lr=config.lr, weight_decay=config.weight_decay)
        self.is_labeled = np.zeros(g.n, dtype=bool)
        self.is_labeled[view.labeled] = True
        self.matchable = g.degrees > 0
        self.epoch = 0

    def inputs(self, local_ids):
        if self.audit is not None:
            self.audit.touch(self.view.original(local_ids))
        x = self.view.graph.features[local_ids]
        pe_rows = None if self.pe is None else self.pe.vectors[local_ids]
        return x, pe_rows

    def batch_loss(self, batch: np.ndarray, trace) -> ad.Tensor:
        """``L_total`` for one minibatch given the student's forward trace."""
        labels = self.view.graph.labels
        lab = np.flatnonzero(self.is_labeled[batch])
        soft = np.flatnonzero(~self.is_labeled[batch])
        teacher, theta, tau = self.teacher, self.theta, self.config.tau
        if teacher is None:
            return ad.cross_entropy(ad.take_rows(trace.logits, lab), labels[batch[lab]])
        if lab.size == 0 or theta == 0:
            out = soft_loss(ad.take_rows(trace.logits, soft), teacher.logits[batch[soft]], tau) * (1.0 - theta)
        else:
            out = output_loss(
                ad.take_rows(trace.logits, lab), labels[batch[lab]],
                ad.take_rows(trace.logits, soft) if soft.size else None,
                teacher.logits[batch[soft]], theta, tau,
            )
        mats_s, mats_t = [], []
        if self.kernel is not None:
            # isolated nodes have no neighbourhood to transfer; leave them out
            rows = np.flatnonzero(self.matchable[batch])
            if rows.size >= 2:
                for l in self.layer_set:
                    hs = ad.take_rows(trace.hidden[l], rows)
                    mats_s.append(mapping_matrix(self.kernel, hs, detach_kernel=True))
                    with ad.no_grad():
                        mats_t.append(mapping_matrix(self.kernel, ad.Tensor(teacher.hidden[l][batch[rows]])))
        return total_loss(out, mats_s, mats_t, self.gamma)

    def step(self, batch: np.ndarray) -> tuple[float, float | None]:
        """One student update, then one kernel update for the reverse kernel."""
        x, pe_rows = self.inputs(batch)
        trace = mlp_forward(x, self.student, True, self.rng, pe_rows)
        loss = self.batch_loss(batch, trace)
        _check_finite(loss, "student", self.epoch)
        self.opt.zero_grad()
        ad.backward(loss)
        self.opt.step()
        re_value = None
        if self.kernel_opt is not None:
            h_last = self.teacher.hidden[self.layer_set[-1]][batch]
            x0 = self.view.graph.dense_features(batch)
            self.kernel_opt.zero_grad()
            re = reconstruction_loss(self.kernel, h_last, x0)
            _check_finite(re, "reverse kernel", self.epoch)
            ad.backward(re)
            self.kernel_opt.step()
            re_value = re.item()
        return loss.item(), re_value

    def validate(self) -> tuple[float, float]:
        view = self.view
        x, pe_rows = self.inputs(view.validation)
        logits = stage3_logits(self.student, x, pe_rows)
        y = view.graph.labels[view.validation]
        return accuracy_of(logits, y), ad.cross_entropy(ad.Tensor(logits), y).item()

    def fit(self) -> "StudentResult":
        cfg = self.config
        start = time.perf_counter()
        stopper = EarlyStopper(cfg.patience, self.student, cfg.ties)
        history = []
        for self.epoch in range(1, cfg.max_epochs + 1):
            order = self.rng.permutation(self.pool)
            epoch_loss = 0.0
            for lo in range(0, order.size, cfg.batch_size):
                batch = order[lo : lo + cfg.batch_size]
                epoch_loss += self.step(batch)[0] * batch.size
            val_acc, val_loss = self.validate()
            history.append((epoch_loss / max(self.pool.size, 1), val_acc))
            if stopper.update(val_acc, val_loss, self.student):
                break
        self.student.load_state(stopper.best_state)
        x, pe_rows = self.inputs(self.view.labeled)
        train_acc = accuracy_of(stage3_logits(self.student, x, pe_rows), self.view.graph.labels[self.view.labeled])
        return StudentResult(
            model=self.student, kernel=self.kernel, pe=self.pe, val_acc=stopper.best_acc, epochs=self.epoch,
            seconds=time.perf_counter() - start, train_acc=train_acc, history=history,
        )


def stage2_distill(
    view: View,
    teacher: TeacherResult | None,
    config: DistillConfig,
    seed: int,
    pe: PositionalEncoding | None = None,
    audit: AccessAudit | None = None,
) -> StudentResult:
    """Train the student MLP. ``teacher=None`` trains a plain MLP on labels only."""
    return Distiller(view, teacher, config, seed, pe, audit).fit()


# ---------------------------------------------------------------------------
# stage III


def stage3_logits(student: Model, features, pe_rows=None) -> np.ndarray:
    with ad.no_grad():
        return mlp_forward(features, student, False, None, pe_rows).logits.value


def stage3_infer(student: Model, features, pe_rows=None) -> np.ndarray:
    """Predicted class per row; reads features (and PE rows) only."""
    return stage3_logits(student, features, pe_rows).argmax(axis=1)


def student_test_accuracy(graph: Graph, split: SplitSpec, result: StudentResult, pe_k: int | None = None, pe_full: PositionalEncoding | None = None) -> float:
    """Accuracy on the split's test nodes.

    Inductive runs recompute the PE on the full graph, since unseen nodes had
    no PE row during training.
    """
    pe_rows = None
    if result.pe is not None:
        if split.mode == "inductive":
            full = pe_full if pe_full is not None else laplacian_pe(graph, result.pe.k)
            pe_rows = full.vectors[split.test]
        else:
            pe_rows = result.pe.vectors[split.test]
    logits = stage3_logits(result.model, graph.features[split.test], pe_rows)
    return accuracy_of(logits, graph.labels[split.test])


def with_overrides(config, **kw):
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
