"""Datasets, SQLite databases and mutated-pair files."""

from __future__ import annotations

import json
import sqlite3
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .model import (
    Column,
    ForeignKey,
    MRId,
    MutationTrace,
    QuestionPair,
    SchemaDescriptor,
    SourceCase,
    Table,
)

DEFAULT_TIMEOUT_S = 5.0
DEFAULT_ROW_CAP = 10_000


class DatasetError(Exception):
    pass


class DatabaseError(Exception):
    pass


class QueryRejected(DatabaseError):
    """The statement tried to do something other than read."""


class QueryLimitExceeded(DatabaseError):
    pass


@dataclass(frozen=True)
class DatasetManifest:
    dataset_name: str
    cases: tuple[SourceCase, ...]
    db_root: Path

    def case(self, case_id: str) -> SourceCase:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(case_id)


def database_path(db_root: str | Path, db_ref: str) -> Path:
    return Path(db_root) / db_ref / f"{db_ref}.sqlite"


def _case_from_record(rec: dict, where: str) -> SourceCase:
    if not isinstance(rec, dict):
        raise DatasetError(f"{where}: expected a JSON object")
    missing = [k for k in ("case_id", "question", "db_ref") if k not in rec]
    if missing:
        raise DatasetError(f"{where}: missing field(s) {', '.join(missing)}")
    label = rec.get("truth_label")
    if label is not None and not isinstance(label, bool):
        raise DatasetError(f"{where}: truth_label must be a boolean")
    try:
        return SourceCase(
            str(rec["case_id"]), str(rec["question"]), str(rec["db_ref"]),
            rec.get("evidence"), label,
        )
    except ValueError as exc:
        raise DatasetError(f"{where}: {exc}") from None


def load_dataset(path: str | Path, db_root: str | Path | None = None) -> DatasetManifest:
    """Read a JSON-lines case file.

    ``db_root`` defaults to a ``database`` directory next to the file. Every
    ``db_ref`` must have a directory under it.
    """
    path = Path(path)
    db_root = Path(db_root) if db_root is not None else path.parent / "database"
    cases: list[SourceCase] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
            case = _case_from_record(rec, f"{path}:{lineno}")
            if case.case_id in seen:
                raise DatasetError(f"{path}:{lineno}: duplicate case_id {case.case_id!r}")
            seen.add(case.case_id)
            cases.append(case)
    missing = sorted({c.db_ref for c in cases if not (db_root / c.db_ref).is_dir()})
    if missing:
        raise DatasetError(f"database directory missing under {db_root}: {', '.join(missing)}")
    return DatasetManifest(path.stem, tuple(cases), db_root)


def write_dataset(cases: Iterable[SourceCase], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in cases:
            rec = {"case_id": c.case_id, "question": c.question, "db_ref": c.db_ref}
            if c.evidence is not None:
                rec["evidence"] = c.evidence
            if c.truth_label is not None:
                rec["truth_label"] = c.truth_label
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


# --------------------------------------------------------------------------
# schemas


def _quote(name: str) -> str:
    return '"' + name.replace('"', '""') + '"'


def read_schema(conn: sqlite3.Connection, db_ref: str) -> SchemaDescriptor:
    names = [
        r[0] for r in conn.execute(
            "SELECT name FROM sqlite_master WHERE type='table' AND name NOT LIKE 'sqlite_%' ORDER BY rowid"
        )
    ]
    tables, pks, fks = [], [], []
    for name in names:
        info = conn.execute(f"PRAGMA table_info({_quote(name)})").fetchall()
        tables.append(Table(name, tuple(Column(r[1], r[2] or "") for r in info)))
        pks.extend((name, r[1]) for r in sorted(info, key=lambda r: r[5]) if r[5])
        cols = {r[1].lower(): r[1] for r in info}
        for r in conn.execute(f"PRAGMA foreign_key_list({_quote(name)})").fetchall():
            ref_table, from_col, to_col = r[2], r[3], r[4]
            target = next((t for t in names if t.lower() == ref_table.lower()), ref_table)
            if to_col is None:
                # FK to the referenced table's primary key
                ref_info = conn.execute(f"PRAGMA table_info({_quote(target)})").fetchall()
                to_col = next((x[1] for x in ref_info if x[5]), None)
            else:
                ref_info = conn.execute(f"PRAGMA table_info({_quote(target)})").fetchall()
                to_col = next((x[1] for x in ref_info if x[1].lower() == to_col.lower()), to_col)
            fks.append(ForeignKey(name, cols.get(from_col.lower(), from_col), target, to_col))
    return SchemaDescriptor(db_ref, tuple(tables), tuple(pks), tuple(fks))


def load_schema(db_root: str | Path, db_ref: str) -> SchemaDescriptor:
    path = database_path(db_root, db_ref)
    if not path.is_file():
        raise DatabaseError(f"database file not found: {path}")
    try:
        conn = sqlite3.connect(f"file:{path}?mode=ro", uri=True)
        try:
            return read_schema(conn, db_ref)
        finally:
            conn.close()
    except sqlite3.DatabaseError as exc:
        raise DatabaseError(f"cannot read schema of {path}: {exc}") from None


# --------------------------------------------------------------------------
# read-only handles

_ALLOWED_ACTIONS = {
    sqlite3.SQLITE_SELECT,
    sqlite3.SQLITE_READ,
    sqlite3.SQLITE_FUNCTION,
    getattr(sqlite3, "SQLITE_RECURSIVE", 33),
}


def _authorizer(action, arg1, arg2, dbname, source):
    if action in _ALLOWED_ACTIONS:
        return sqlite3.SQLITE_OK
    return sqlite3.SQLITE_DENY


class DatabaseHandle:
    """A read-only connection with a statement timeout and a row cap.

    Not shareable across threads; open one handle per worker.
    """

    def __init__(self, db_ref: str, path: Path, timeout: float, row_cap: int) -> None:
        self.db_ref = db_ref
        self.path = path
        self.timeout = timeout
        self.row_cap = row_cap
        try:
            self._conn = sqlite3.connect(f"file:{path}?mode=ro", uri=True)
            self._conn.execute("PRAGMA query_only = ON")
            self._conn.execute("SELECT count(*) FROM sqlite_master").fetchone()
        except sqlite3.Error as exc:
            raise DatabaseError(f"cannot open {path}: {exc}") from None
        self._conn.set_authorizer(_authorizer)
        self._deadline = float("inf")
        self._conn.set_progress_handler(self._check_deadline, 1000)

    def _check_deadline(self) -> int:
        return 1 if time.monotonic() > self._deadline else 0

    def query(self, sql: str) -> tuple[list[tuple], int]:
        """Run one read statement; returns (rows, column count)."""
        self._deadline = time.monotonic() + self.timeout
        try:
            cur = self._conn.execute(sql)
            width = len(cur.description or ())
            rows = cur.fetchmany(self.row_cap + 1)
        except sqlite3.DatabaseError as exc:
            msg = str(exc)
            if "not authorized" in msg or "readonly" in msg or "read-only" in msg:
                raise QueryRejected(f"statement rejected: {msg}") from None
            if "interrupted" in msg:
                raise QueryLimitExceeded(f"statement timeout after {self.timeout}s") from None
            raise DatabaseError(msg) from None
        except sqlite3.Warning as exc:
            raise DatabaseError(str(exc)) from None
        finally:
            self._deadline = float("inf")
        if cur.description is None:
            raise QueryRejected("statement returned no result columns")
        if len(rows) > self.row_cap:
            raise QueryLimitExceeded(f"row cap exceeded ({self.row_cap})")
        return rows, width

    def schema(self) -> SchemaDescriptor:
        # catalog pragmas are trusted; passing None only clears it on 3.11+
        self._conn.set_authorizer(lambda *args: sqlite3.SQLITE_OK)
        try:
            return read_schema(self._conn, self.db_ref)
        finally:
            self._conn.set_authorizer(_authorizer)

    def close(self) -> None:
        self._conn.close()

    def __enter__(self) -> "DatabaseHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def open_database(
    db_root: str | Path,
    db_ref: str,
    timeout: float = DEFAULT_TIMEOUT_S,
    row_cap: int = DEFAULT_ROW_CAP,
) -> DatabaseHandle:
    path = database_path(db_root, db_ref)
    if not path.is_file():
        raise DatabaseError(f"database file not found: {path}")
    return DatabaseHandle(db_ref, path, timeout, row_cap)


# --------------------------------------------------------------------------
# schema variants


def materialize_variant(
    db_root: str | Path, source: SchemaDescriptor, variant: SchemaDescriptor, rename_map: dict[str, str]
) -> Path:
    """Copy the source database into ``variant.db_ref`` under the renamed schema.

    Idempotent: an existing variant file is left alone.
    """
    target = database_path(db_root, variant.db_ref)
    if target.exists():
        return target
    src_path = database_path(db_root, source.db_ref)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_suffix(".tmp")
    tmp.unlink(missing_ok=True)
    # uri=True so the attached source is opened read-only
    conn = sqlite3.connect(f"file:{tmp}", uri=True)
    try:
        conn.execute("ATTACH DATABASE ? AS src", (f"file:{src_path}?mode=ro",))
        for old, new in zip(source.tables, variant.tables):
            conn.execute(_create_table_sql(variant, new))
            cols_new = ", ".join(_quote(c.name) for c in new.columns)
            cols_old = ", ".join(_quote(c.name) for c in old.columns)
            conn.execute(
                f"INSERT INTO main.{_quote(new.name)} ({cols_new}) SELECT {cols_old} FROM src.{_quote(old.name)}"
            )
        conn.commit()
        conn.execute("DETACH DATABASE src")
    finally:
        conn.close()
    tmp.replace(target)
    return target


def _create_table_sql(schema: SchemaDescriptor, table: Table) -> str:
    parts = [f"{_quote(c.name)} {c.declared_type}".rstrip() for c in table.columns]
    pk = [c for t, c in schema.primary_keys if t == table.name]
    if pk:
        parts.append(f"PRIMARY KEY ({', '.join(_quote(c) for c in pk)})")
    for fk in schema.foreign_keys:
        if fk.table == table.name:
            parts.append(
                f"FOREIGN KEY ({_quote(fk.column)}) REFERENCES {_quote(fk.ref_table)}({_quote(fk.ref_column)})"
            )
    return f"CREATE TABLE {_quote(table.name)} ({', '.join(parts)})"


# --------------------------------------------------------------------------
# mutated pairs


def pair_to_dict(pair: QuestionPair) -> dict:
    tr = pair.trace
    trace = {
        "fragment_original": tr.fragment_original,
        "fragment_replacement": tr.fragment_replacement,
        "char_span": list(tr.char_span),
    }
    if tr.schema_rename_map is not None:
        trace["schema_rename_map"] = dict(tr.schema_rename_map)
    return {
        "case_id": pair.case_ref,
        "mr": pair.mr.value,
        "source_question": pair.source_question,
        "followup_question": pair.followup_question,
        "followup_db_ref": pair.followup_db_ref,
        "trace": trace,
    }


def pair_from_dict(d: dict) -> QuestionPair:
    tr = d["trace"]
    rename = tr.get("schema_rename_map")
    trace = MutationTrace(
        tr["fragment_original"], tr.get("fragment_replacement"), tuple(tr["char_span"]),
        dict(rename) if rename is not None else None,
    )
    return QuestionPair(
        d["case_id"], MRId(d["mr"]), d["source_question"], d["followup_question"], trace, d["followup_db_ref"]
    )


def persist_mutated_dataset(pairs: Iterable[QuestionPair], path: str | Path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for p in pairs:
                fh.write(json.dumps(pair_to_dict(p), ensure_ascii=False, sort_keys=True) + "\n")
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}") from None


def load_mutated_dataset(path: str | Path) -> list[QuestionPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                pairs.append(pair_from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed pair ({exc})") from None
    return pairs
