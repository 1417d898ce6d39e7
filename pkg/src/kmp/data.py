"""Dataset bundles on disk, benchmark converters and synthetic graphs.

A bundle directory holds::

    features.bin   u64 n, u64 d (little-endian), then n*d float64 row-major
    edges.tsv      "u<TAB>v" per line, integer node ids
    labels.tsv     "node<TAB>class" per line
    meta.txt       optional "key = value" lines (name, classes, note)
"""

from __future__ import annotations

import importlib.util
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import UNLABELED, Graph, build_graph
from .storage import FormatError, _atomic_write, locked

log = logging.getLogger(__name__)

# (nodes, feature dim, classes) of named benchmarks, checked on load
KNOWN_SHAPES = {
    "cora": (2708, 1433, 7),
    "citeseer": (3327, 3703, 6),
    "pubmed": (19717, 500, 3),
}

CORA_CLASSES = [
    "Neural_Networks",
    "Rule_Learning",
    "Reinforcement_Learning",
    "Probabilistic_Methods",
    "Theory",
    "Genetic_Algorithms",
    "Case_Based",
]


class DatasetError(ValueError):
    pass


@dataclass
class DatasetBundle:
    name: str
    graph: Graph
    class_names: list[str] = field(default_factory=list)
    note: str = ""
    # link rows in the converter's source, before symmetrising and dedup
    source_links: int = 0

    def summary(self) -> tuple[int, int, int, int]:
        g = self.graph
        return g.n, g.num_edges, g.feature_dim, g.num_classes


# ---------------------------------------------------------------------------
# bundle format


def write_features(path, features) -> None:
    x = features.toarray() if sp.issparse(features) else np.asarray(features)
    x = np.ascontiguousarray(x, dtype="<f8")
    if x.ndim != 2:
        raise DatasetError(f"features must be 2-D, got shape {x.shape}")
    _atomic_write(Path(path), struct.pack("<QQ", *x.shape) + x.tobytes())


def read_features(path, sparse: bool = True):
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: header truncated at offset {len(raw)}, need 16 bytes")
    n, d = struct.unpack_from("<QQ", raw, 0)
    expected = 16 + 8 * n * d
    if n > 1 << 40 or d > 1 << 40:
        raise FormatError(f"{path}: implausible header n={n}, d={d} at offset 0")
    if len(raw) != expected:
        raise FormatError(f"{path}: {len(raw)} bytes, header at offset 0 implies {expected} (n={n}, d={d})")
    x = np.frombuffer(raw, dtype="<f8", count=n * d, offset=16).reshape(n, d).astype(np.float64)
    if sparse and x.size and np.count_nonzero(x) < 0.1 * x.size:
        return sp.csr_matrix(x)
    return x


def _read_int_pairs(path: Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected two integer columns, got {line!r}")
            try:
                rows.append((int(parts[0]), int(parts[1])))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-integer entry {line!r}") from exc
    return np.asarray(rows, dtype=np.int64).reshape(-1, 2)


def _read_meta(path: Path) -> dict[str, str]:
    meta = {}
    if not path.exists():
        return meta
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#") or "=" not in line:
            continue
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip().strip('"')
    return meta


def save_dataset(directory, bundle: DatasetBundle) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    g = bundle.graph
    write_features(out / "features.bin", g.features)
    with locked(out / "edges.tsv", "w") as fh:
        for u, v in g.edge_list():
            fh.write(f"{u}\t{v}\n")
    with locked(out / "labels.tsv", "w") as fh:
        for i, y in enumerate(g.labels):
            if y != UNLABELED:
                fh.write(f"{i}\t{y}\n")
    lines = [f"name = {bundle.name}", f"classes = {g.num_classes}"]
    if bundle.class_names:
        lines.append("class_names = " + ",".join(bundle.class_names))
    if bundle.note:
        lines.append(f"note = {bundle.note}")
    if bundle.source_links:
        lines.append(f"source_links = {bundle.source_links}")
    with locked(out / "meta.txt", "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return out


def load_dataset(directory, name: str | None = None) -> DatasetBundle:
    """Load and validate a bundle directory."""
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    for fname in ("features.bin", "edges.tsv", "labels.tsv"):
        if not (root / fname).exists():
            raise FileNotFoundError(f"{root}: missing {fname}")
    meta = _read_meta(root / "meta.txt")
    x = read_features(root / "features.bin")
    n = x.shape[0]
    edges = _read_int_pairs(root / "edges.tsv")
    lab = _read_int_pairs(root / "labels.tsv")
    labels = np.full(n, UNLABELED, dtype=np.int64)
    if lab.size:
        if lab[:, 0].min() < 0 or lab[:, 0].max() >= n:
            raise DatasetError(f"labels.tsv names node {lab[:, 0].max()} but features.bin has {n} rows")
        labels[lab[:, 0]] = lab[:, 1]
    if "classes" in meta:
        num_classes = int(meta["classes"])
        if lab.size and lab[:, 1].max() >= num_classes:
            raise DatasetError(f"label id {lab[:, 1].max()} is not below class count {num_classes}")
    else:
        num_classes = int(lab[:, 1].max()) + 1 if lab.size else 0
    if lab.size and lab[:, 1].min() < 0:
        raise DatasetError(f"negative class id {lab[:, 1].min()} in labels.tsv")
    graph = build_graph(edges, x, labels, num_classes)
    name = name or meta.get("name", root.name)
    check_known_shape(name, graph)
    names = meta["class_names"].split(",") if meta.get("class_names") else []
    return DatasetBundle(
        name=name, graph=graph, class_names=names, note=meta.get("note", ""), source_links=int(meta.get("source_links", 0))
    )


def check_known_shape(name: str, graph: Graph) -> None:
    want = KNOWN_SHAPES.get(name.lower())
    if want is None:
        return
    got = (graph.n, graph.feature_dim, graph.num_classes)
    if got != want:
        raise DatasetError(f"{name}: (nodes, features, classes) = {got}, expected {want}")


def resolve_dataset(spec: str, data_root: str | None = None) -> DatasetBundle:
    """Load ``spec`` as a path, else as a name under ``data_root``."""
    p = Path(spec)
    if p.is_dir():
        return load_dataset(p)
    if data_root is not None and (Path(data_root) / spec).is_dir():
        return load_dataset(Path(data_root) / spec)
    raise FileNotFoundError(f"cannot resolve dataset {spec!r} (data root: {data_root})")


# ---------------------------------------------------------------------------
# converters


def _assemble(node_keys, feats, label_names, cites, name, class_order=None, note="") -> DatasetBundle:
    index = {k: i for i, k in enumerate(node_keys)}
    classes = class_order or sorted(set(label_names))
    cid = {c: i for i, c in enumerate(classes)}
    labels = np.array([cid[c] for c in label_names], dtype=np.int64)
    edges = []
    dropped = 0
    for a, b in cites:
        if a in index and b in index:
            edges.append((index[a], index[b]))
        else:
            dropped += 1
    if dropped:
        log.warning("%s: dropped %d citation(s) naming unknown papers", name, dropped)
    graph = build_graph(np.asarray(edges, dtype=np.int64).reshape(-1, 2), sp.csr_matrix(feats), labels, len(classes))
    return DatasetBundle(name=name, graph=graph, class_names=list(classes), note=note, source_links=len(cites))


def convert_planetoid_raw(src, name: str | None = None) -> DatasetBundle:
    """Read the raw ``<name>.content`` / ``<name>.cites`` layout.

    ``.content`` rows are ``paper_id f_1 ... f_d class_label``; ``.cites``
    rows are ``cited citing``. Paper ids are kept as strings since some
    corpora use non-numeric ids.
    """
    src = Path(src)
    content = sorted(src.glob("*.content"))
    cites = sorted(src.glob("*.cites"))
    if not content or not cites:
        raise FileNotFoundError(f"{src}: expected <name>.content and <name>.cites")
    name = name or content[0].stem
    keys, feats, labs = [], [], []
    with open(content[0]) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 3:
                raise FormatError(f"{content[0]}:{lineno}: too few columns")
            keys.append(parts[0])
            feats.append(np.asarray(parts[1:-1], dtype=np.float64))
            labs.append(parts[-1])
    widths = {f.shape[0] for f in feats}
    if len(widths) != 1:
        raise FormatError(f"{content[0]}: ragged feature rows, widths {sorted(widths)}")
    pairs = []
    with open(cites[0]) as fh:
        for line in fh:
            parts = line.split()
            if len(parts) == 2:
                pairs.append((parts[0], parts[1]))
    order = CORA_CLASSES if name.lower() == "cora" and set(labs) == set(CORA_CLASSES) else None
    return _assemble(keys, np.vstack(feats), labs, pairs, name, order, note=f"converted from {src}")


def gds_cora_dir() -> Path:
    """Location of the Cora parquet files shipped inside the graphdatascience wheel.

    Found via the import system without importing the package (its import
    pulls in a database driver we do not need).
    """
    spec = importlib.util.find_spec("graphdatascience")
    if spec is None or not spec.submodule_search_locations:
        raise FileNotFoundError("graphdatascience is not installed; pip install --no-deps graphdatascience")
    path = Path(list(spec.submodule_search_locations)[0]) / "resources" / "cora"
    if not (path / "cora_nodes.parquet.gzip").exists():
        raise FileNotFoundError(f"no Cora parquet files under {path}")
    return path


def convert_gds_cora(src=None) -> DatasetBundle:
    """Build the Cora bundle from ``cora_nodes`` / ``cora_rels`` parquet files."""
    import pandas as pd

    src = Path(src) if src is not None else gds_cora_dir()
    nodes = pd.read_parquet(src / "cora_nodes.parquet.gzip")
    rels = pd.read_parquet(src / "cora_rels.parquet.gzip")
    keys = nodes["nodeId"].tolist()
    feats = np.vstack([np.asarray(f, dtype=np.float64) for f in nodes["features"]])
    labs = [CORA_CLASSES[int(s)] for s in nodes["subject"]]
    pairs = list(zip(rels["sourceNodeId"].tolist(), rels["targetNodeId"].tolist()))
    return _assemble(keys, feats, labs, pairs, "cora", CORA_CLASSES, note="converted from graphdatascience parquet")


def row_normalize(features):
    """Scale each row to sum 1 (zero rows stay zero)."""
    if sp.issparse(features):
        s = np.asarray(features.sum(axis=1)).ravel()
        inv = np.divide(1.0, s, out=np.zeros_like(s), where=s != 0)
        return sp.csr_matrix(sp.diags(inv) @ features)
    x = np.asarray(features, dtype=np.float64)
    s = x.sum(axis=1, keepdims=True)
    return np.divide(x, s, out=np.zeros_like(x), where=s != 0)


# ---------------------------------------------------------------------------
# synthetic graphs


def generate_sbm(
    blocks,
    p_in: float,
    p_out: float,
    feature_dim: int = 16,
    seed: int = 0,
    mean_offset: float = 1.0,
    sigma: float = 1.0,
) -> DatasetBundle:
    """Stochastic block model with Gaussian class-mean features.

    Block ``c`` draws features from ``N(mean_offset * e_c, sigma^2 I)``
    (the offset sits on feature dim ``c mod feature_dim``); labels are block ids.
    """
    sizes = [int(b) for b in blocks]
    if not sizes or min(sizes) <= 0:
        raise DatasetError(f"every block needs at least one node, got sizes {sizes}")
    if not (0 <= p_out <= 1 and 0 <= p_in <= 1):
        raise DatasetError(f"edge probabilities must lie in [0, 1], got {p_in}, {p_out}")
    if p_in <= p_out:
        log.warning("p_in=%s <= p_out=%s: structure carries no block signal", p_in, p_out)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(sizes)), sizes)
    n = labels.size
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    means = np.zeros((len(sizes), feature_dim))
    means[np.arange(len(sizes)), np.arange(len(sizes)) % feature_dim] = mean_offset
    x = means[labels] + sigma * rng.standard_normal((n, feature_dim))
    graph = build_graph(edges, x, labels, len(sizes))
    return DatasetBundle(
        name=f"sbm{len(sizes)}",
        graph=graph,
        class_names=[f"block{i}" for i in range(len(sizes))],
        note=f"sbm blocks={sizes} p_in={p_in} p_out={p_out} d={feature_dim} seed={seed} offset={mean_offset}",
    )


def karate_like_fixture() -> DatasetBundle:
    """Hand-made 12-node, 2-community graph with 4-dim features for unit tests."""
    edges = [
        (0, 1), (0, 2), (0, 3), (1, 2), (1, 4), (2, 3), (3, 4), (4, 5), (2, 5),
        (5, 6),
        (6, 7), (6, 8), (7, 8), (7, 9), (8, 10), (9, 10), (9, 11), (10, 11), (8, 11),
    ]
    labels = np.array([0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1])
    x = np.array(
        [
            [1.0, 0.2, 0.0, 0.1],
            [0.9, 0.1, 0.1, 0.0],
            [0.8, 0.3, 0.0, 0.2],
            [1.0, 0.0, 0.2, 0.1],
            [0.7, 0.2, 0.1, 0.3],
            [0.6, 0.4, 0.3, 0.2],
            [0.3, 0.5, 0.6, 0.4],
            [0.1, 0.8, 0.9, 0.2],
            [0.0, 0.9, 1.0, 0.1],
            [0.2, 0.7, 0.8, 0.0],
            [0.1, 1.0, 0.9, 0.3],
            [0.0, 0.8, 1.0, 0.2],
        ]
    )
    graph = build_graph(np.asarray(edges), x, labels, 2)
    return DatasetBundle(name="karate12", graph=graph, class_names=["left", "right"], note="hand-made fixture")
