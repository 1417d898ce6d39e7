"""Accuracy, multi-seed aggregation and CSV/text reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .storage import METRICS_COLUMNS, _atomic_write, append_metrics, read_metrics

REPORT_COLUMNS = ["dataset", "teacher", "method", "setting", "mean", "std", "n", "formatted"]
SWEEP_COLUMNS = ["x", "mean", "std", "n"]


def accuracy(predictions, labels, ids) -> float:
    """Fraction of ``ids`` whose prediction equals the label."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("accuracy over an empty id set")
    pred = np.asarray(predictions)
    if pred.ndim == 2:
        pred = pred.argmax(axis=1)
    return float((pred[ids] == np.asarray(labels)[ids]).mean())


def aggregate(values) -> tuple[float, float, int]:
    """Mean, sample standard deviation (n - 1) and count."""
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("cannot aggregate zero records")
    # sort first so the result does not depend on record order
    vals = np.sort(vals)
    mean = float(math.fsum(vals) / vals.size)
    std = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
    return mean, std, int(vals.size)


def format_pm(mean: float, std: float) -> str:
    """``(0.7903, 0.0119) -> "79.03±1.19"``."""
    return f"{100 * mean:.2f}±{100 * std:.2f}"


def config_fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RunRecord:
    dataset: str
    teacher: str
    method: str
    setting: str
    seed: int
    test_acc: float
    val_acc: float
    epochs: int
    seconds: float

    def __post_init__(self):
        for name in ("test_acc", "val_acc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def row(self) -> dict:
        return asdict(self)

    @classmethod
    def from_row(cls, row: dict) -> "RunRecord":
        return cls(**{k: row[k] for k in METRICS_COLUMNS})


def save_records(path, records: list[RunRecord]) -> None:
    append_metrics(path, [r.row() for r in records])


def load_records(path) -> list[RunRecord]:
    return [RunRecord.from_row(r) for r in read_metrics(path)]


def group_key(r: RunRecord) -> tuple[str, str, str, str]:
    return (r.dataset, r.teacher, r.method, r.setting)


def summarize(records: list[RunRecord]) -> list[dict]:
    groups: dict[tuple, list[float]] = {}
    for r in records:
        groups.setdefault(group_key(r), []).append(r.test_acc)
    rows = []
    for key in sorted(groups):
        mean, std, n = aggregate(groups[key])
        rows.append(dict(zip(REPORT_COLUMNS, (*key, mean, std, n, format_pm(mean, std)))))
    return rows


def _csv_text(columns: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({c: (repr(row[c]) if isinstance(row[c], float) else row[c]) for c in columns})
    return buf.getvalue()


def text_table(rows: list[dict]) -> str:
    header = ["dataset", "teacher", "method", "setting", "accuracy", "n"]
    body = [[r["dataset"], r["teacher"], r["method"], r["setting"], r["formatted"], str(r["n"])] for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"


def emit_report(records: list[RunRecord], out_dir=None) -> tuple[str, str]:
    """One CSV row per (dataset, teacher, method, setting) plus a text table.

    Writes ``report.csv`` and ``report.txt`` under ``out_dir`` when given.
    """
    rows = summarize(records)
    csv_text = _csv_text(REPORT_COLUMNS, rows)
    table = text_table(rows)
    if out_dir is not None:
        out = Path(out_dir)
        _atomic_write(out / "report.csv", csv_text.encode())
        _atomic_write(out / "report.txt", table.encode())
    return csv_text, table


def sweep_rows(points: dict[float, list[float]]) -> list[dict]:
    rows = []
    for x in sorted(points):
        mean, std, n = aggregate(points[x])
        rows.append({"x": float(x), "mean": mean, "std": std, "n": n})
    return rows


def emit_sweep(points: dict[float, list[float]], path=None) -> str:
    """Sweep CSV of ``(x, mean, std, n)`` with ascending ``x``."""
    text = _csv_text(SWEEP_COLUMNS, sweep_rows(points))
    if path is not None:
        _atomic_write(Path(path), text.encode())
    return text
