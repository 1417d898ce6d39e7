"""On-disk formats: model checkpoints, PE caches and the metrics CSV.

All numbers are little-endian; reals are float64, counts uint64. Loaders
check the magic, version and the total byte length implied by the header,
so truncated files are rejected rather than silently read short.
"""

from __future__ import annotations

import csv
import fcntl
import io
import json
import logging
import os
import struct
from contextlib import contextmanager
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CKPT_MAGIC = b"KMPCKPT\x00"
CKPT_VERSION = 1
PE_MAGIC = b"KMPPE\x00\x00\x00"
PE_VERSION = 1

METRICS_COLUMNS = ["dataset", "teacher", "method", "setting", "seed", "test_acc", "val_acc", "epochs", "seconds"]


class FormatError(ValueError):
    pass


class VersionError(FormatError):
    pass


@contextmanager
def locked(path: Path, mode: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, mode) as fh:
        fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
        try:
            yield fh
        finally:
            fh.flush()
            fcntl.flock(fh.fileno(), fcntl.LOCK_UN)


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
        fh.write(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# checkpoints


def write_checkpoint(path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named 2-D float64 arrays plus JSON metadata."""
    arrays = {k: np.atleast_2d(np.asarray(v, dtype="<f8")) for k, v in arrays.items()}
    header = {
        "kind": kind,
        "meta": meta or {},
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IQ", CKPT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for v in arrays.values():
        buf.write(np.ascontiguousarray(v).tobytes())
    _atomic_write(path, buf.getvalue())


def read_checkpoint(path) -> tuple[str, dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic at offset 0")
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated header at offset 8")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != CKPT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    start = 20 + hlen
    try:
        header = json.loads(raw[20:start])
    except ValueError as exc:
        raise FormatError(f"{path}: unreadable header at offset 20") from exc
    expected = start + sum(8 * int(np.prod(a["shape"])) for a in header["arrays"])
    if len(raw) != expected:
        raise FormatError(f"{path}: length {len(raw)} bytes, header implies {expected}")
    arrays = {}
    off = start
    for a in header["arrays"]:
        count = int(np.prod(a["shape"]))
        arrays[a["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(a["shape"]).copy()
        off += 8 * count
    return header["kind"], arrays, header["meta"]


# ---------------------------------------------------------------------------
# PE cache


def save_pe_cache(path, pe, graph) -> None:
    n, k = pe.vectors.shape
    buf = io.BytesIO()
    buf.write(PE_MAGIC)
    buf.write(struct.pack("<IQQ", PE_VERSION, n, k))
    buf.write(graph.fingerprint())
    buf.write(np.asarray(pe.eigenvalues, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(pe.vectors, dtype="<f8").tobytes())
    buf.write(np.asarray(pe.signs, dtype="<f8").tobytes())
    _atomic_write(path, buf.getvalue())


def load_pe_cache(path, graph=None):
    """Read a PE cache; ``None`` when it belongs to a different graph."""
    from .spectral import PositionalEncoding

    raw = Path(path).read_bytes()
    if raw[:8] != PE_MAGIC:
        raise FormatError(f"{path}: bad PE cache magic at offset 0")
    if len(raw) < 60:
        raise FormatError(f"{path}: truncated PE header at offset 8")
    version, n, k = struct.unpack_from("<IQQ", raw, 8)
    if version != PE_VERSION:
        raise VersionError(f"{path}: PE cache version {version}, expected {PE_VERSION}")
    fp = raw[28:60]
    expected = 60 + 8 * (k + n * k + k)
    if len(raw) != expected:
        raise FormatError(f"{path}: length {len(raw)} bytes, header implies {expected}")
    if graph is not None and (graph.n != n or graph.fingerprint() != fp):
        log.warning("PE cache %s was built for a different graph; ignoring", path)
        return None
    off = 60
    w = np.frombuffer(raw, "<f8", k, off).copy()
    off += 8 * k
    v = np.frombuffer(raw, "<f8", n * k, off).reshape(n, k).copy()
    off += 8 * n * k
    s = np.frombuffer(raw, "<f8", k, off).copy()
    return PositionalEncoding(k=int(k), vectors=v, eigenvalues=w, signs=s)


# ---------------------------------------------------------------------------
# metrics


def append_metrics(path, rows: list[dict]) -> None:
    """Append rows under an exclusive lock; header written once."""
    with locked(Path(path), "a+") as fh:
        fh.seek(0, os.SEEK_END)
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        if fh.tell() == 0:
            writer.writeheader()
        for row in rows:
            writer.writerow({c: _fmt(row[c]) for c in METRICS_COLUMNS})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_metrics(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
        r["epochs"] = int(r["epochs"])
        for c in ("test_acc", "val_acc", "seconds"):
            r[c] = float(r[c])
    return rows
