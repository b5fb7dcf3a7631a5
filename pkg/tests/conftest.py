import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; returns the check result."""

    def record(number, name: str, ok: bool, detail: str = "") -> bool:
        ACCEPTANCE.append(f"[{'PASS' if ok else 'FAIL'}] {number}. {name}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
