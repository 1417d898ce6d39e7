"""Command-line entry point: ``kmp <command> [options]``.

Options may also come from a manifest (``--manifest FILE``), a flat
``key = value`` text file whose keys are the long option names with dashes or
underscores. Explicit flags win over the manifest, which wins over defaults.
Dataset names are resolved against ``$KMP_DATA_ROOT`` when they are not
directories. Every command writes under ``--run-dir`` and copies the
effective configuration there as ``manifest.txt``.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import distill as D
from .data import (
    convert_gds_cora,
    convert_planetoid_raw,
    generate_sbm,
    load_dataset,
    read_features,
    resolve_dataset,
    row_normalize,
    save_dataset,
)
from .evaluation import RunRecord, emit_report, emit_sweep, load_records, save_records
from .experiments import METHODS, PeProvider, distill_student, method_config
from .graph import add_feature_noise, make_split
from .kernels import KERNEL_KINDS
from .models import load_model, save_model, teacher_forward
from .spectral import laplacian_pe

log = logging.getLogger("kmp")

NOISE_GRID = (0.1, 0.2, 0.3, 0.4, 0.5)
GAMMA_GRID = (0.1, 0.3, 0.5, 0.7, 1.0, 3.0, 10.0, 30.0)
GAMMA_TUNING_GRID = (0.1, 0.3, 0.5, 0.7, 0.9, 1.0, 3.0, 10.0, 30.0)
PE_K_GRID = (4, 8, 16)
SWEEP_AXES = ("noise", "gamma", "kernel", "pe-k")

# option name -> (type, default); shared by every training command
TRAIN_OPTIONS = {
    "dataset": (str, None),
    "teacher": (str, "gcn"),
    "setting": (str, "trans"),
    "seeds": (str, "10"),
    "noise": (float, 0.0),
    "row_normalize": (bool, False),
    "method": (str, "kmp"),
    "kernel": (str, "gaussian"),
    "gamma": (float, None),
    "theta": (float, None),
    "tau": (float, None),
    "lr": (float, None),
    "weight_decay": (float, None),
    "dropout": (float, None),
    "pe": (str, None),
    "pe_k": (int, None),
    "kernel_T": (float, None),
    "fanout": (int, None),
    "max_epochs": (int, None),
    "patience": (int, None),
    "batch_size": (int, None),
    "ties": (str, None),
    "teacher_max_epochs": (int, None),
    "jobs": (int, 1),
    "run_dir": (str, None),
    "select_best_kernel": (bool, False),
    "axis": (str, None),
    "methods": (str, None),
}


class UsageError(ValueError):
    pass


def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {v!r}")


def read_manifest(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip().strip('"')
    return out


def resolve_options(ns: argparse.Namespace) -> dict:
    """Merge flags > manifest > defaults into a plain dict."""
    manifest = read_manifest(ns.manifest) if getattr(ns, "manifest", None) else {}
    unknown = set(manifest) - set(TRAIN_OPTIONS)
    if unknown:
        raise UsageError(f"unknown manifest key(s): {', '.join(sorted(unknown))}")
    opts = {}
    for name, (typ, default) in TRAIN_OPTIONS.items():
        flag = getattr(ns, name, None)
        if flag is not None and flag is not False:
            value = flag
        elif name in manifest:
            value = _parse_bool(manifest[name]) if typ is bool else typ(manifest[name])
        else:
            value = flag if flag is not None else default
        opts[name] = value
    return opts


def parse_seeds(spec: str) -> list[int]:
    """``"10"`` -> seeds 0..9; ``"3,5,7"`` -> those seeds; ``"2-4"`` -> 2, 3, 4."""
    spec = str(spec).strip()
    if "," in spec:
        return [int(s) for s in spec.split(",") if s.strip()]
    if "-" in spec:
        lo, hi = spec.split("-", 1)
        return list(range(int(lo), int(hi) + 1))
    n = int(spec)
    if n < 1:
        raise UsageError("--seeds needs at least one seed")
    return list(range(n))


def _setting_mode(tag: str) -> str:
    if tag in ("trans", "transductive"):
        return "transductive"
    if tag in ("induc", "inductive"):
        return "inductive"
    raise UsageError(f"unknown setting {tag!r}; expected trans or induc")


def teacher_config(opts) -> D.TeacherConfig:
    if opts["teacher"] not in ("gcn", "sage"):
        raise UsageError(f"unknown teacher {opts['teacher']!r}; expected gcn or sage")
    cfg = D.TeacherConfig(kind=opts["teacher"], fanout=opts["fanout"])
    if opts["teacher_max_epochs"] is not None:
        cfg = replace(cfg, max_epochs=opts["teacher_max_epochs"])
    return cfg


def student_config(opts, method: str, extra: dict | None = None) -> D.DistillConfig:
    """Defaults, then the method's and setting's defaults, then flags/manifest, then ``extra``."""
    if opts["kernel"] not in KERNEL_KINDS:
        raise UsageError(f"unknown kernel {opts['kernel']!r}; expected one of {', '.join(KERNEL_KINDS)}")
    names = {f.name for f in fields(D.DistillConfig)}
    over = {k: v for k, v in opts.items() if k in names and v is not None}
    over.update(extra or {})
    cfg = method_config(method, D.DistillConfig(), over, _setting_mode(opts["setting"] or "trans"))
    cfg.validate()
    return cfg


def _dataset(opts):
    if not opts["dataset"]:
        raise UsageError("--dataset is required")
    bundle = resolve_dataset(opts["dataset"], os.environ.get("KMP_DATA_ROOT"))
    graph = bundle.graph
    if opts["row_normalize"]:
        graph = graph.with_features(row_normalize(graph.features))
    return bundle.name, graph


def _run_dir(opts, command: str) -> Path:
    if opts["run_dir"]:
        out = Path(opts["run_dir"])
    else:
        out = Path("runs") / f"{Path(str(opts['dataset'])).name}-{opts['teacher']}-{opts['setting']}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(run_dir: Path, opts: dict, ns: argparse.Namespace, command: str) -> None:
    if getattr(ns, "manifest", None):
        shutil.copyfile(ns.manifest, run_dir / f"manifest.{command}.src.txt")
    lines = [f"# effective configuration for `kmp {command}`"]
    lines += [f"{k} = {v}" for k, v in opts.items() if v is not None]
    (run_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def _graph_for_seed(graph, noise: float, seed: int):
    if noise > 0:
        return graph.with_features(add_feature_noise(graph.features, noise, seed))
    return graph


def _teacher_path(run_dir: Path, seed: int) -> Path:
    return run_dir / "checkpoints" / f"teacher_seed{seed}.ckpt"


# ---------------------------------------------------------------------------
# pretrain


def _pretrain_one(args):
    name, graph, opts, seed, run_dir = args
    mode = _setting_mode(opts["setting"])
    g = _graph_for_seed(graph, opts["noise"], seed)
    split = make_split(g, mode, seed=seed)
    teacher, view = D.stage1_pretrain(g, split, teacher_config(opts), seed)
    acc = D.teacher_test_accuracy(g, split, teacher, view)
    save_model(
        _teacher_path(run_dir, seed),
        teacher.model,
        extra={"dataset": name, "seed": seed, "setting": mode, "noise": opts["noise"], "fingerprint": g.fingerprint().hex()},
        extra_arrays={"logits": teacher.logits},
    )
    return RunRecord(name, opts["teacher"], opts["teacher"], opts["setting"], seed, acc, teacher.val_acc, teacher.epochs, teacher.seconds)


def _map(fn, jobs_args, jobs: int):
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, jobs_args))
    return [fn(a) for a in jobs_args]


def cmd_pretrain(ns) -> int:
    opts = resolve_options(ns)
    teacher_config(opts)
    name, graph = _dataset(opts)
    run_dir = _run_dir(opts, "pretrain")
    _write_manifest(run_dir, opts, ns, "pretrain")
    seeds = parse_seeds(opts["seeds"])
    records = _map(_pretrain_one, [(name, graph, opts, s, run_dir) for s in seeds], opts["jobs"])
    save_records(run_dir / "metrics.csv", records)
    for r in records:
        print(f"seed {r.seed}: teacher {r.method} test {100 * r.test_acc:.2f}% ({r.epochs} epochs)")
    return 0


# ---------------------------------------------------------------------------
# distill


def load_teacher(run_dir: Path, graph, split, seed: int) -> tuple[D.TeacherResult, D.View]:
    path = _teacher_path(run_dir, seed)
    if not path.exists():
        raise FileNotFoundError(f"missing teacher checkpoint {path}; run `kmp pretrain` first")
    model, meta, extras = load_model(path)
    if meta.get("fingerprint") and meta["fingerprint"] != graph.fingerprint().hex():
        raise ValueError(f"{path} was trained on a different graph")
    view = D.make_view(graph, split)
    with D.ad.no_grad():
        trace = teacher_forward(view.graph, model, False)
    logits = trace.logits.value
    if "logits" in extras and not np.allclose(extras["logits"], logits, atol=1e-9):
        raise ValueError(f"{path}: stored soft logits disagree with a fresh eval-mode forward")
    result = D.TeacherResult(model, logits, [h.value for h in trace.hidden], float("nan"), 0, 0.0)
    return result, view


def _distill_one(args):
    name, graph, opts, seed, run_dir, method, cfg_over = args
    mode = _setting_mode(opts["setting"])
    g = _graph_for_seed(graph, opts["noise"], seed)
    split = make_split(g, mode, seed=seed)
    teacher, view = load_teacher(run_dir, g, split, seed)
    cfg = student_config(opts, method, cfg_over)
    pes = PeProvider(run_dir / "pe_cache")
    audit = D.AccessAudit() if mode == "inductive" else None
    res, kind = distill_student(
        view, None if method == "mlp" else teacher, cfg, seed, pes, audit,
        select_kernel=opts["select_best_kernel"] and method.startswith("kmp"),
    )
    if audit is not None:
        audit.assert_clean(np.setdiff1d(np.arange(g.n), split.observed))
    pe_full = pes.get(g, cfg.pe_k) if (res.pe is not None and mode == "inductive") else None
    acc = D.student_test_accuracy(g, split, res, pe_full=pe_full)
    tag = method.replace("+", "_")
    save_model(
        run_dir / "checkpoints" / f"student_{tag}_seed{seed}.ckpt",
        res.model,
        extra={"dataset": name, "seed": seed, "setting": mode, "method": method, "kernel": kind or cfg.kernel,
               "pe_k": cfg.pe_k if res.pe is not None else 0, "train_acc": res.train_acc},
    )
    rec = RunRecord(name, opts["teacher"], method, opts["setting"], seed, acc, res.val_acc, res.epochs, res.seconds)
    return rec, kind


def cmd_distill(ns) -> int:
    opts = resolve_options(ns)
    if opts["method"] not in METHODS:
        raise UsageError(f"unknown method {opts['method']!r}; expected one of {', '.join(METHODS)}")
    student_config(opts, opts["method"])
    name, graph = _dataset(opts)
    run_dir = _run_dir(opts, "distill")
    _write_manifest(run_dir, opts, ns, "distill")
    seeds = parse_seeds(opts["seeds"])
    for s in seeds:
        if not _teacher_path(run_dir, s).exists():
            raise FileNotFoundError(f"missing teacher checkpoint {_teacher_path(run_dir, s)}; run `kmp pretrain` first")
    out = _map(_distill_one, [(name, graph, opts, s, run_dir, opts["method"], {}) for s in seeds], opts["jobs"])
    save_records(run_dir / "metrics.csv", [r for r, _ in out])
    for r, kind in out:
        extra = f" kernel={kind}" if kind else ""
        print(f"seed {r.seed}: {r.method} test {100 * r.test_acc:.2f}% val {100 * r.val_acc:.2f}%{extra}")
    kinds = [k for _, k in out if k]
    if kinds:
        values, counts = np.unique(kinds, return_counts=True)
        print(f"{name}: best kernel by validation: {values[counts.argmax()]} ({counts.max()}/{len(kinds)} seeds)")
    return 0


# ---------------------------------------------------------------------------
# sweep


def _sweep_points(axis: str):
    return {"noise": NOISE_GRID, "gamma": GAMMA_GRID, "kernel": KERNEL_KINDS, "pe-k": PE_K_GRID}[axis]


def _sweep_one(args):
    name, graph, opts, seed, run_dir, axis, x, method = args
    o = dict(opts)
    over = {}
    if axis == "noise":
        o["noise"] = float(x)
    elif axis == "gamma":
        over["gamma"] = float(x)
    elif axis == "kernel":
        over["kernel"] = x
    elif axis == "pe-k":
        over["pe_k"] = int(x)
    mode = _setting_mode(o["setting"])
    g = _graph_for_seed(graph, o["noise"], seed)
    split = make_split(g, mode, seed=seed)
    teacher, view = D.stage1_pretrain(g, split, teacher_config(o), seed)
    cfg = student_config(o, method, over)
    pes = PeProvider(run_dir / "pe_cache")
    audit = D.AccessAudit() if mode == "inductive" else None
    res, _ = distill_student(view, teacher, cfg, seed, pes, audit)
    pe_full = pes.get(g, cfg.pe_k) if (res.pe is not None and mode == "inductive") else None
    acc = D.student_test_accuracy(g, split, res, pe_full=pe_full)
    setting = f"{o['setting']}:{axis}={x}"
    return RunRecord(name, o["teacher"], method, setting, seed, acc, res.val_acc, res.epochs, res.seconds)


def cmd_sweep(ns) -> int:
    opts = resolve_options(ns)
    axis = opts["axis"]
    if axis not in SWEEP_AXES:
        raise UsageError(f"--axis must be one of {', '.join(SWEEP_AXES)}")
    if opts["methods"]:
        methods = [m.strip() for m in opts["methods"].split(",")]
    elif axis == "noise":
        methods = ["glnn", "kmp"]
    elif axis == "pe-k":
        methods = ["kmp+pe"]
    else:
        methods = ["kmp"]
    bad = [m for m in methods if m not in METHODS or m == "mlp"]
    if bad:
        raise UsageError(f"sweep methods must be distilled methods, got {bad}")
    for m in methods:
        student_config(opts, m)
    name, graph = _dataset(opts)
    run_dir = _run_dir(opts, f"sweep-{axis}")
    _write_manifest(run_dir, opts, ns, f"sweep-{axis}")
    metrics = run_dir / "metrics.csv"
    done = {(r.method, r.setting, r.seed) for r in load_records(metrics)}
    todo = []
    for x in _sweep_points(axis):
        for method in methods:
            for s in parse_seeds(opts["seeds"]):
                if (method, f"{opts['setting']}:{axis}={x}", s) in done:
                    continue
                todo.append((name, graph, opts, s, run_dir, axis, x, method))
    log.info("sweep %s: %d run(s) to do, %d already recorded", axis, len(todo), len(done))
    if opts["jobs"] > 1:
        for rec in _map(_sweep_one, todo, opts["jobs"]):
            save_records(metrics, [rec])
    else:
        for job in todo:
            # persist each run as it finishes so an interrupted sweep resumes
            save_records(metrics, [_sweep_one(job)])
    records = [r for r in load_records(metrics) if r.setting.startswith(f"{opts['setting']}:{axis}=")]
    for method in methods:
        points: dict = {}
        for r in records:
            if r.method != method:
                continue
            x = r.setting.split("=", 1)[1]
            key = x if axis == "kernel" else float(x)
            points.setdefault(key, []).append(r.test_acc)
        path = run_dir / f"sweep_{axis}_{method.replace('+', '_')}.csv"
        if axis == "kernel":
            _write_kernel_sweep(path, points)
        else:
            emit_sweep(points, path)
        print(f"wrote {path}")
    return 0


def _write_kernel_sweep(path: Path, points: dict) -> None:
    from .evaluation import aggregate

    lines = ["x,mean,std,n"]
    for k in sorted(points):
        m, s, n = aggregate(points[k])
        lines.append(f"{k},{m!r},{s!r},{n}")
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# infer


def cmd_infer(ns) -> int:
    ckpt = Path(ns.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model, meta, _ = load_model(ckpt)
    if model.kind != "mlp":
        raise UsageError(f"{ckpt} holds a {model.kind} teacher; inference takes a student checkpoint")
    pe_rows = None
    if ns.features:
        features = read_features(ns.features)
        if model.fusion is not None:
            raise UsageError("this student fuses PE; pass --dataset so PE rows can be computed")
    else:
        if not ns.dataset:
            raise UsageError("pass --features FILE or --dataset DIR")
        graph = resolve_dataset(ns.dataset, os.environ.get("KMP_DATA_ROOT")).graph
        features = graph.features
        if model.fusion is not None:
            pe_rows = laplacian_pe(graph, model.fusion.k).vectors
    if features.shape[1] != model.dims[0]:
        raise D.ad.DimensionError(f"features have {features.shape[1]} columns, the student expects {model.dims[0]}")
    logits = D.stage3_logits(model, features, pe_rows)
    z = logits - logits.max(axis=1, keepdims=True)
    prob = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    pred = prob.argmax(axis=1)
    out = Path(ns.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write("node\tclass\tprob\n")
        for i, (c, p) in enumerate(zip(pred, prob.max(axis=1))):
            fh.write(f"{i}\t{c}\t{p:.6f}\n")
    print(f"wrote {len(pred)} predictions to {out}")
    return 0


# ---------------------------------------------------------------------------
# data and reports


def cmd_convert(ns) -> int:
    if ns.format == "gds-cora":
        bundle = convert_gds_cora(ns.src)
    else:
        if not ns.src:
            raise UsageError("planetoid conversion needs a source directory")
        bundle = convert_planetoid_raw(ns.src, ns.name)
    save_dataset(ns.out, bundle)
    n, m, d, c = bundle.summary()
    print(f"{bundle.name}: {n} nodes, {m} undirected edges, {d} features, {c} classes -> {ns.out}")
    return 0


def cmd_generate_sbm(ns) -> int:
    blocks = [int(b) for b in ns.blocks.split(",")]
    bundle = generate_sbm(blocks, ns.p_in, ns.p_out, ns.feature_dim, ns.seed, ns.mean_offset)
    save_dataset(ns.out, bundle)
    n, m, d, c = bundle.summary()
    print(f"{bundle.name}: {n} nodes, {m} edges, {d} features, {c} blocks -> {ns.out}")
    return 0


def cmd_report(ns) -> int:
    run_dir = Path(ns.run_dir)
    records = load_records(run_dir / "metrics.csv")
    _, table = emit_report(records, run_dir)
    sys.stdout.write(table)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p: argparse.ArgumentParser, method: bool = True) -> None:
    p.add_argument("--manifest", help="key = value file with defaults for any option below")
    p.add_argument("--dataset", help="bundle directory, or a name under $KMP_DATA_ROOT")
    p.add_argument("--teacher", help="gcn or sage")
    p.add_argument("--setting", help="trans or induc")
    p.add_argument("--seeds", help="count (10 -> 0..9), list (1,4,7) or range (2-5)")
    p.add_argument("--noise", type=float, help="feature-noise fraction in [0, 1]")
    p.add_argument("--row-normalize", action="store_true", help="scale feature rows to sum 1")
    p.add_argument("--fanout", type=int, help="sample at most this many neighbours per SAGE layer")
    p.add_argument("--teacher-max-epochs", type=int)
    p.add_argument("--jobs", type=int, help="parallel worker processes")
    p.add_argument("--run-dir", help="output directory (default runs/<dataset>-<teacher>-<setting>)")
    if method:
        p.add_argument("--method", help="mlp, glnn, kmp or kmp+pe")
        p.add_argument("--kernel", help="|".join(KERNEL_KINDS))
        p.add_argument("--select-best-kernel", action="store_true", help="try the four base kernels, keep the best on validation")
        p.add_argument("--gamma", type=float)
        p.add_argument("--theta", type=float)
        p.add_argument("--tau", type=float)
        p.add_argument("--lr", type=float)
        p.add_argument("--weight-decay", type=float)
        p.add_argument("--dropout", type=float)
        p.add_argument("--pe", help="off, concat or mul")
        p.add_argument("--pe-k", type=int)
        p.add_argument("--kernel-T", dest="kernel_T", type=float, help="gaussian kernel temperature")
        p.add_argument("--max-epochs", type=int)
        p.add_argument("--patience", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--ties", choices=["latest", "loss"], help="early-stopping tie policy on equal validation accuracy")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kmp", description="GNN-to-MLP distillation with kernel-matched hidden layers")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train teacher GNNs, one checkpoint per seed")
    _add_train_flags(p, method=False)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("distill", help="train student MLPs from saved teachers")
    _add_train_flags(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("sweep", help="noise / gamma / kernel / pe-k sweeps (resumable)")
    _add_train_flags(p)
    p.add_argument("--axis", choices=SWEEP_AXES)
    p.add_argument("--methods", help="comma-separated methods (default depends on axis)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("infer", help="predict classes with a student checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", help="features.bin file")
    p.add_argument("--dataset", help="bundle directory (needed for PE students)")
    p.add_argument("--out", default="predictions.tsv")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("convert", help="convert a benchmark into a bundle directory")
    p.add_argument("format", choices=["planetoid", "gds-cora"])
    p.add_argument("src", nargs="?", help="source directory (gds-cora defaults to the installed wheel)")
    p.add_argument("--out", required=True)
    p.add_argument("--name")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("generate-sbm", help="write a stochastic block model bundle")
    p.add_argument("--blocks", default="50,50,50,50")
    p.add_argument("--p-in", type=float, default=0.2)
    p.add_argument("--p-out", type=float, default=0.02)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--mean-offset", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_sbm)

    p = sub.add_parser("report", help="aggregate a run directory's metrics.csv")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(ns.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return ns.func(ns)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"kmp: error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError, ArithmeticError, RuntimeError, AssertionError) as exc:
        print(f"kmp: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
