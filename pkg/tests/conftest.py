import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from kmp.data import generate_sbm, karate_like_fixture


@dataclass
class OracleCase:
    description: str
    seed: int
    tolerance: float
    kind: str  # finite-difference | brute-force | hand-value | eigenresidual
    passed: bool = False
    detail: str = ""


_CASES: list[OracleCase] = []
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_addoption(parser):
    parser.addoption("--oracle-report", action="store", default=None, help="write the oracle ledger to this file ('-' for the terminal)")


@pytest.fixture(scope="session")
def oracle():
    """Record an oracle comparison: ``oracle(desc, kind, tol, ok, seed=0, detail="")``."""

    def record(description, kind, tolerance, ok, seed=0, detail=""):
        _CASES.append(OracleCase(description, seed, tolerance, kind, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            ok, detail = ACCEPTANCE[k]
            terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    target = config.getoption("--oracle-report")
    if not target:
        return
    lines = [f"{'ok' if c.passed else 'FAIL':4s} {c.kind:17s} tol={c.tolerance:<8g} seed={c.seed:<4d} {c.description} {c.detail}" for c in _CASES]
    if target == "-":
        terminalreporter.section("oracle ledger")
        for line in lines:
            terminalreporter.write_line(line)
    else:
        Path(target).write_text("\n".join(lines) + "\n")


@pytest.fixture
def karate():
    return karate_like_fixture()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_sbm():
    return generate_sbm([30, 30, 30], 0.25, 0.02, feature_dim=8, seed=3)


def cora_dir() -> Path:
    """Cora bundle from $KMP_DATA_ROOT, else converted once into a user cache."""
    root = os.environ.get("KMP_DATA_ROOT")
    if root and (Path(root) / "cora" / "features.bin").exists():
        return Path(root) / "cora"
    cache = Path(os.environ.get("KMP_CACHE", Path.home() / ".cache" / "kmp")) / "cora"
    if not (cache / "features.bin").exists():
        from kmp.data import convert_gds_cora, save_dataset

        save_dataset(cache, convert_gds_cora())
    return cache
