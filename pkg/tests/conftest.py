from __future__ import annotations

import sqlite3
from pathlib import Path

import pytest

from fixturedb import build_employees_db, build_pets_db, build_shop_db


@pytest.fixture
def db_root(tmp_path: Path) -> Path:
    root = tmp_path / "database"
    build_pets_db(root)
    build_employees_db(root)
    build_shop_db(root)
    return root


@pytest.fixture
def pets_db(db_root: Path) -> Path:
    return db_root / "pets_1" / "pets_1.sqlite"


@pytest.fixture
def empty_db(tmp_path: Path) -> Path:
    path = tmp_path / "database" / "empty" / "empty.sqlite"
    path.parent.mkdir(parents=True)
    sqlite3.connect(path).close()
    return path


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
