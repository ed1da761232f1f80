"""Shared domain types and the metamorphic relation catalog."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping


class MRId(str, enum.Enum):
    SROCW = "SROCW"
    AROCW = "AROCW"
    ESR = "ESR"
    ENSR = "ENSR"
    RC = "RC"
    OS = "OS"
    SC = "SC"
    DSR = "DSR"
    PI = "PI"
    PR = "PR"
    PS = "PS"
    SROE = "SROE"
    AROE = "AROE"
    CRU = "CRU"
    CRE = "CRE"
    CWR = "CWR"
    DR = "DR"

    def __str__(self) -> str:
        return self.value


class Family(str, enum.Enum):
    SCHEMA_LINKING = "SchemaLinking"
    LOGICAL_SYNTHESIS = "LogicalSynthesis"

    def __str__(self) -> str:
        return self.value


class Category(str, enum.Enum):
    CWM = "CWM"  # comparative word metamorphosis
    ENM = "ENM"  # entity metamorphosis
    SEM = "SEM"  # sentence metamorphosis
    DSM = "DSM"  # database schema metamorphosis
    PWM = "PWM"  # prefix word metamorphose
    EXM = "EXM"  # extrema metamorphose
    CRM = "CRM"  # comparative range metamorphose
    DAM = "DAM"  # database metamorphose

    def __str__(self) -> str:
        return self.value


class Expectation(str, enum.Enum):
    LINKING_EQUAL = "LinkingEqual"
    LINKING_DIFFERENT = "LinkingDifferent"
    RESULT_EQUAL = "ResultEqual"
    RESULT_DIFFERENT = "ResultDifferent"
    FOLLOWUP_SUPERSET = "FollowupSuperset"
    FOLLOWUP_SUBSET = "FollowupSubset"
    FOLLOWUP_EXECUTES = "FollowupExecutes"


@dataclass(frozen=True)
class MetamorphicRelation:
    id: MRId
    family: Family
    category: Category
    expectation: Expectation
    name: str


_CATALOG: tuple[MetamorphicRelation, ...] = tuple(
    MetamorphicRelation(MRId(i), f, c, e, n)
    for i, f, c, e, n in [
        ("SROCW", Family.SCHEMA_LINKING, Category.CWM, Expectation.LINKING_EQUAL,
         "Synonym Replacement of Comparative Words"),
        ("AROCW", Family.SCHEMA_LINKING, Category.CWM, Expectation.LINKING_EQUAL,
         "Antonym Replacement of Comparative Words"),
        ("ESR", Family.SCHEMA_LINKING, Category.ENM, Expectation.LINKING_EQUAL,
         "Entity Synonymous Replacement"),
        ("ENSR", Family.SCHEMA_LINKING, Category.ENM, Expectation.LINKING_DIFFERENT,
         "Entity Non-Synonymous Replacement"),
        ("RC", Family.SCHEMA_LINKING, Category.SEM, Expectation.LINKING_EQUAL,
         "Remove Conditional"),
        ("OS", Family.SCHEMA_LINKING, Category.SEM, Expectation.LINKING_EQUAL,
         "Ordinary Simplification"),
        ("SC", Family.SCHEMA_LINKING, Category.SEM, Expectation.LINKING_EQUAL,
         "Sentence Complication"),
        ("DSR", Family.SCHEMA_LINKING, Category.DSM, Expectation.LINKING_DIFFERENT,
         "Database Schema Replacement"),
        ("PI", Family.LOGICAL_SYNTHESIS, Category.PWM, Expectation.RESULT_EQUAL,
         "Prefix Insertion"),
        ("PR", Family.LOGICAL_SYNTHESIS, Category.PWM, Expectation.RESULT_EQUAL,
         "Prefix Removal"),
        ("PS", Family.LOGICAL_SYNTHESIS, Category.PWM, Expectation.RESULT_EQUAL,
         "Prefix Substitution"),
        ("SROE", Family.LOGICAL_SYNTHESIS, Category.EXM, Expectation.RESULT_EQUAL,
         "Synonym Replacement of Extrema"),
        ("AROE", Family.LOGICAL_SYNTHESIS, Category.EXM, Expectation.RESULT_DIFFERENT,
         "Antonym Replacement of Extrema"),
        ("CRU", Family.LOGICAL_SYNTHESIS, Category.CRM, Expectation.RESULT_EQUAL,
         "Comparison Range Unchanged"),
        ("CRE", Family.LOGICAL_SYNTHESIS, Category.CRM, Expectation.FOLLOWUP_SUPERSET,
         "Comparison Range Expand"),
        ("CWR", Family.LOGICAL_SYNTHESIS, Category.CRM, Expectation.FOLLOWUP_SUBSET,
         "Comparative Words Reduce"),
        ("DR", Family.LOGICAL_SYNTHESIS, Category.DAM, Expectation.FOLLOWUP_EXECUTES,
         "Database Replacement"),
    ]
)
_BY_ID = {mr.id: mr for mr in _CATALOG}

SCHEMA_MRS: tuple[MRId, ...] = tuple(m.id for m in _CATALOG if m.family is Family.SCHEMA_LINKING)
LOGIC_MRS: tuple[MRId, ...] = tuple(m.id for m in _CATALOG if m.family is Family.LOGICAL_SYNTHESIS)

# MRs whose follow-up replaces one lexicon fragment with one lexicon candidate.
SUBSTITUTION_MRS = frozenset(
    MRId(x) for x in ("SROCW", "AROCW", "ESR", "ENSR", "PS", "SROE", "AROE", "CRU", "CRE", "CWR")
)
REMOVAL_MRS = frozenset({MRId.RC, MRId.OS, MRId.PR})
SCHEMA_VARIANT_MRS = frozenset({MRId.DSR, MRId.DR})


def mr_catalog(family: Family | None = None) -> list[MetamorphicRelation]:
    """Return the 17 relations in canonical order, optionally filtered by family."""
    return [mr for mr in _CATALOG if family is None or mr.family is family]


def lookup(mr: MRId | str) -> MetamorphicRelation:
    return _BY_ID[MRId(mr)]


def mr_order(mr: MRId | str) -> int:
    return _CATALOG.index(_BY_ID[MRId(mr)])


def parse_mr_list(text: str) -> list[MRId]:
    """Parse a comma separated MR filter such as ``"AROE,CRE"``."""
    out = []
    for part in text.split(","):
        part = part.strip().upper()
        if part:
            try:
                out.append(MRId(part))
            except ValueError:
                raise ValueError(f"unknown metamorphic relation {part!r}") from None
    return sorted(set(out), key=mr_order)


# --------------------------------------------------------------------------
# cases and pairs


@dataclass(frozen=True)
class SourceCase:
    case_id: str
    question: str
    db_ref: str
    evidence: str | None = None
    truth_label: bool | None = None

    def __post_init__(self) -> None:
        if not self.case_id:
            raise ValueError("case_id must be non-empty")
        if not self.question.strip():
            raise ValueError(f"case {self.case_id}: question is empty")
        if not self.db_ref:
            raise ValueError(f"case {self.case_id}: db_ref is empty")


@dataclass(frozen=True)
class MutationTrace:
    """Where and how the follow-up question was derived from the source.

    The follow-up is ``source[:start] + (fragment_replacement or "") + source[end:]``
    for every text-level relation. Schema relations leave the question untouched
    (empty span) and carry the rename map instead.
    """

    fragment_original: str
    fragment_replacement: str | None
    char_span: tuple[int, int]
    schema_rename_map: Mapping[str, str] | None = None

    def apply(self, question: str) -> str:
        start, end = self.char_span
        return question[:start] + (self.fragment_replacement or "") + question[end:]


@dataclass(frozen=True)
class QuestionPair:
    case_ref: str
    mr: MRId
    source_question: str
    followup_question: str
    trace: MutationTrace
    followup_db_ref: str


# --------------------------------------------------------------------------
# schemas and linkings


@dataclass(frozen=True)
class Column:
    name: str
    declared_type: str = ""


@dataclass(frozen=True)
class Table:
    name: str
    columns: tuple[Column, ...]

    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]


@dataclass(frozen=True)
class ForeignKey:
    table: str
    column: str
    ref_table: str
    ref_column: str

    def __str__(self) -> str:
        return f"{self.table}.{self.column} -> {self.ref_table}.{self.ref_column}"


@dataclass(frozen=True)
class SchemaDescriptor:
    db_ref: str
    tables: tuple[Table, ...]
    primary_keys: tuple[tuple[str, str], ...] = ()
    foreign_keys: tuple[ForeignKey, ...] = ()

    def __post_init__(self) -> None:
        seen = set()
        for t in self.tables:
            key = t.name.lower()
            if key in seen:
                raise ValueError(f"duplicate table {t.name!r} in {self.db_ref}")
            seen.add(key)
            cols = [c.lower() for c in t.column_names()]
            if len(cols) != len(set(cols)):
                raise ValueError(f"duplicate column in table {t.name!r}")
        for fk in self.foreign_keys:
            for tname, cname in ((fk.table, fk.column), (fk.ref_table, fk.ref_column)):
                table = self.table(tname)
                if table is None or cname.lower() not in (c.lower() for c in table.column_names()):
                    raise ValueError(f"foreign key endpoint {tname}.{cname} does not exist")

    def table(self, name: str) -> Table | None:
        for t in self.tables:
            if t.name.lower() == name.lower():
                return t
        return None

    def table_names(self) -> list[str]:
        return [t.name for t in self.tables]


_QUOTES = "\"'`[]"


def normalize_name(name: str) -> str:
    """Canonical form used for linking comparison: trimmed, unquoted, lowercase."""
    return name.strip().strip(_QUOTES).strip().lower()


def _split_qualified(ref: str) -> list[str]:
    # "Student"."Major", `student`.major, [student].[major]
    return [normalize_name(p) for p in ref.split(".")]


@dataclass(frozen=True)
class SchemaLinking:
    tables: frozenset[str] = frozenset()
    columns: frozenset[tuple[str, str]] = frozenset()
    joins: frozenset[frozenset[tuple[str, str]]] = frozenset()

    @classmethod
    def build(
        cls,
        tables: Iterable[str] = (),
        columns: Iterable[tuple[str, str] | str] = (),
        joins: Iterable[tuple[tuple[str, str] | str, tuple[str, str] | str]] = (),
    ) -> "SchemaLinking":
        """Normalize raw names and close the table set over columns and joins."""
        tset = {normalize_name(t) for t in tables}
        cset = {_column_ref(c) for c in columns}
        jset = set()
        for a, b in joins:
            ea, eb = _column_ref(a), _column_ref(b)
            jset.add(frozenset((ea, eb)))
            tset.update((ea[0], eb[0]))
        tset.update(t for t, _ in cset)
        tset.discard("")
        return cls(frozenset(tset), frozenset(cset), frozenset(jset))

    def to_dict(self) -> dict:
        return {
            "tables": sorted(self.tables),
            "columns": [list(c) for c in sorted(self.columns)],
            "joins": sorted([list(e) for e in sorted(j)] for j in self.joins),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "SchemaLinking":
        joins = []
        for j in data.get("joins") or []:
            ends = [tuple(e) if not isinstance(e, str) else e for e in j]
            if len(ends) == 1:
                ends = ends * 2
            joins.append((ends[0], ends[1]))
        return cls.build(
            data.get("tables") or [],
            [tuple(c) if not isinstance(c, str) else c for c in data.get("columns") or []],
            joins,
        )


def _column_ref(ref: tuple[str, str] | list | str) -> tuple[str, str]:
    if isinstance(ref, str):
        parts = _split_qualified(ref)
    else:
        parts = [normalize_name(p) for p in ref]
    if len(parts) != 2 or not all(parts):
        raise ValueError(f"column reference must be table.column, got {ref!r}")
    return parts[0], parts[1]


# --------------------------------------------------------------------------
# execution artifacts and verdicts


class Stage(str, enum.Enum):
    SOURCE = "SourceSide"
    FOLLOWUP = "FollowupSide"


@dataclass(frozen=True)
class SqlArtifact:
    sql_text: str
    stage: Stage
    prompt_digest: str

    def __post_init__(self) -> None:
        if not self.sql_text.strip():
            raise ValueError("sql_text is empty")


class ResultStatus(str, enum.Enum):
    OK = "Ok"
    ERROR = "Error"


NULL_TOKEN = ("null",)


@dataclass(frozen=True)
class ResultSet:
    """Outcome of one query execution; ``size`` is -1 exactly when it failed."""

    status: ResultStatus
    rows: tuple[tuple, ...] = ()
    width: int = 0
    error: str | None = None

    @property
    def size(self) -> int:
        return len(self.rows) if self.status is ResultStatus.OK else -1

    @property
    def ok(self) -> bool:
        return self.status is ResultStatus.OK

    @classmethod
    def failure(cls, message: str) -> "ResultSet":
        return cls(ResultStatus.ERROR, (), 0, message)

    @classmethod
    def from_rows(cls, rows: Iterable[Iterable], width: int | None = None) -> "ResultSet":
        normalized = tuple(tuple(normalize_cell(v) for v in row) for row in rows)
        if width is None:
            width = len(normalized[0]) if normalized else 0
        return cls(ResultStatus.OK, normalized, width)

    def __post_init__(self) -> None:
        if self.status is ResultStatus.ERROR and self.rows:
            raise ValueError("an errored result carries no rows")


_NUM_DIGITS = 9


def normalize_cell(value):
    """Map a raw cell to a hashable canonical token.

    Numbers (including numeric text) become ``("num", q)`` where ``q`` is the
    value rounded to 9 decimals; NULL becomes :data:`NULL_TOKEN`; everything else is
    compared as trimmed text.
    """
    if isinstance(value, tuple) and value and value[0] in ("num", "str", "null"):
        return value
    if value is None:
        return NULL_TOKEN
    if isinstance(value, bool):
        value = int(value)
    if isinstance(value, bytes):
        value = value.hex()
    if isinstance(value, (int, float)):
        num = value
    else:
        text = str(value).strip()
        try:
            num = int(text)
        except ValueError:
            try:
                num = float(text)
            except ValueError:
                return ("str", text)
    if isinstance(num, float):
        if num != num or num in (float("inf"), float("-inf")):
            return ("str", str(value).strip())
        if num.is_integer() and abs(num) < 2**53:
            return ("num", int(num))
        return ("num", round(num, _NUM_DIGITS))
    return ("num", num)


class Outcome(str, enum.Enum):
    PASS = "Pass"
    VIOLATION = "Violation"
    SUSPECT = "Suspect"
    SKIP = "Skip"


@dataclass(frozen=True)
class Verdict:
    case_ref: str
    mr: MRId
    stage: Family
    outcome: Outcome
    detail: str = ""
    reason: str | None = None

    def __post_init__(self) -> None:
        if self.outcome is Outcome.SKIP and not (self.reason or "").strip():
            raise ValueError("a Skip verdict needs a reason")
        if lookup(self.mr).family is not self.stage:
            raise ValueError(f"{self.mr} does not belong to stage {self.stage}")

    def to_dict(self) -> dict:
        d = {
            "case_id": self.case_ref,
            "mr": self.mr.value,
            "stage": self.stage.value,
            "outcome": self.outcome.value,
            "detail": self.detail,
        }
        if self.reason is not None:
            d["reason"] = self.reason
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Verdict":
        return cls(
            d["case_id"], MRId(d["mr"]), Family(d["stage"]), Outcome(d["outcome"]),
            d.get("detail", ""), d.get("reason"),
        )


@dataclass
class DetectionTally:
    hdn_total: int = 0
    per_mr: dict[MRId, int] = field(default_factory=dict)
    per_family: dict[Family, int] = field(default_factory=dict)
    per_category: dict[Category, int] = field(default_factory=dict)
    suspect: int = 0
    skip: int = 0

    def __add__(self, other: "DetectionTally") -> "DetectionTally":
        def merge(a: dict, b: dict) -> dict:
            out = dict(a)
            for k, v in b.items():
                out[k] = out.get(k, 0) + v
            return out

        return DetectionTally(
            self.hdn_total + other.hdn_total,
            merge(self.per_mr, other.per_mr),
            merge(self.per_family, other.per_family),
            merge(self.per_category, other.per_category),
            self.suspect + other.suspect,
            self.skip + other.skip,
        )

    def count(self, mr: MRId) -> int:
        return self.per_mr.get(mr, 0)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn
