"""Stage 2: hallucination detection over executed SQL results."""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .dataset import DatabaseError, DatabaseHandle
from .gateway import Backend, BackendUnavailable, GatewayError, request_schema_linking, request_sql
from .model import (
    LOGIC_MRS,
    Family,
    MRId,
    Outcome,
    QuestionPair,
    ResultSet,
    SchemaDescriptor,
    SchemaLinking,
    SourceCase,
    SqlArtifact,
    Stage,
    Verdict,
    lookup,
    mr_order,
)
from .schema_stage import skip_reason


class ResultRelation(str, enum.Enum):
    EQUAL = "Equal"
    FOLLOWUP_PROPER_SUPERSET = "FollowupProperSuperset"
    FOLLOWUP_PROPER_SUBSET = "FollowupProperSubset"
    INCOMPARABLE = "Incomparable"
    SOURCE_ERROR = "SourceError"
    FOLLOWUP_ERROR = "FollowupError"
    BOTH_ERROR = "BothError"


class ResultMode(str, enum.Enum):
    MULTISET = "multiset"
    SIZE_ONLY = "size-only"


def execute_sql(db: DatabaseHandle, sql: SqlArtifact | str) -> ResultSet:
    """Run a generated query; every failure becomes an Error result of size -1."""
    text = sql.sql_text if isinstance(sql, SqlArtifact) else sql
    try:
        rows, width = db.query(text)
    except DatabaseError as exc:
        return ResultSet.failure(str(exc))
    return ResultSet.from_rows(rows, width)


def compare_result_sets(
    source: ResultSet, followup: ResultSet, mode: ResultMode = ResultMode.MULTISET
) -> ResultRelation:
    if not source.ok and not followup.ok:
        return ResultRelation.BOTH_ERROR
    if not source.ok:
        return ResultRelation.SOURCE_ERROR
    if not followup.ok:
        return ResultRelation.FOLLOWUP_ERROR
    if mode is ResultMode.SIZE_ONLY:
        if source.size == followup.size:
            return ResultRelation.EQUAL
        return (ResultRelation.FOLLOWUP_PROPER_SUPERSET if followup.size > source.size
                else ResultRelation.FOLLOWUP_PROPER_SUBSET)
    if source.width != followup.width:
        return ResultRelation.INCOMPARABLE
    a, b = Counter(source.rows), Counter(followup.rows)
    if a == b:
        return ResultRelation.EQUAL
    # Counter subtraction drops non-positive counts: empty means contained
    if not (a - b):
        return ResultRelation.FOLLOWUP_PROPER_SUPERSET
    if not (b - a):
        return ResultRelation.FOLLOWUP_PROPER_SUBSET
    return ResultRelation.INCOMPARABLE


SOURCE_FAILURE = "source execution failure"


def _logic_table() -> dict[tuple[MRId, ResultRelation], tuple[Outcome, str]]:
    R, P, V = ResultRelation, Outcome.PASS, Outcome.VIOLATION
    table = {}
    for mr in LOGIC_MRS:
        for rel in ResultRelation:
            if rel in (R.SOURCE_ERROR, R.BOTH_ERROR):
                table[mr, rel] = (V, SOURCE_FAILURE)
            elif rel is R.FOLLOWUP_ERROR:
                table[mr, rel] = (V, "follow-up execution failure")
            elif mr is MRId.AROE:
                table[mr, rel] = (Outcome.SUSPECT, "extrema reversal left the result unchanged") \
                    if rel is R.EQUAL else (P, "")
            elif mr is MRId.CRE:
                table[mr, rel] = (P, "") if rel in (R.EQUAL, R.FOLLOWUP_PROPER_SUPERSET) \
                    else (V, "expanded range lost rows")
            elif mr is MRId.CWR:
                table[mr, rel] = (P, "") if rel in (R.EQUAL, R.FOLLOWUP_PROPER_SUBSET) \
                    else (V, "reduced range gained rows")
            elif mr is MRId.DR:
                table[mr, rel] = (P, "")
            else:
                table[mr, rel] = (P, "") if rel is R.EQUAL else (V, "result changed")
    return table


LOGIC_VERDICTS = _logic_table()


def verdict_for_logic(mr: MRId | str, relation: ResultRelation) -> Outcome:
    mr = MRId(mr)
    if lookup(mr).family is not Family.LOGICAL_SYNTHESIS:
        raise ValueError(f"{mr} is not a logical-synthesis relation")
    return LOGIC_VERDICTS[mr, relation][0]


@dataclass
class LogicStageReport:
    case_ref: str
    verdicts: list[Verdict] = field(default_factory=list)
    source_sql: str | None = None
    followup_sql_by_mr: dict[MRId, str] = field(default_factory=dict)
    source_result_size: int | None = None
    followup_sizes: dict[MRId, int] = field(default_factory=dict)
    errors: list[str] = field(default_factory=list)

    @property
    def hds_increment(self) -> int:
        return sum(v.outcome is Outcome.VIOLATION for v in self.verdicts)

    @property
    def detected(self) -> bool:
        return self.hds_increment > 0

    def to_dict(self) -> dict:
        def by_mr(d: dict) -> dict:
            return {mr.value: v for mr, v in sorted(d.items(), key=lambda x: mr_order(x[0]))}

        return {
            "source_sql": self.source_sql,
            "source_result_size": self.source_result_size,
            "followup_sql_by_mr": by_mr(self.followup_sql_by_mr),
            "followup_sizes": by_mr(self.followup_sizes),
            "verdicts": [v.to_dict() for v in self.verdicts],
            "hds_increment": self.hds_increment,
            "errors": list(self.errors),
        }

    @classmethod
    def from_dict(cls, case_ref: str, d: Mapping) -> "LogicStageReport":
        return cls(
            case_ref,
            [Verdict.from_dict(v) for v in d["verdicts"]],
            d.get("source_sql"),
            {MRId(k): v for k, v in d.get("followup_sql_by_mr", {}).items()},
            d.get("source_result_size"),
            {MRId(k): v for k, v in d.get("followup_sizes", {}).items()},
            list(d.get("errors", [])),
        )


def run_logic_stage(
    case: SourceCase,
    pairs: Sequence[QuestionPair],
    backend: Backend,
    schemas: Mapping[str, SchemaDescriptor],
    db_handles: Mapping[str, DatabaseHandle],
    ssl: SchemaLinking | None = None,
    result_mode: ResultMode = ResultMode.MULTISET,
) -> LogicStageReport:
    """Synthesize and execute source and follow-up SQL, then judge each pair.

    ``ssl`` is the stage-1 source linking when available; otherwise it is
    generated here. The follow-up linking is always regenerated.
    """
    for p in pairs:
        if p.case_ref != case.case_id:
            raise ValueError(f"pair for {p.case_ref} passed with case {case.case_id}")
        if lookup(p.mr).family is not Family.LOGICAL_SYNTHESIS:
            raise ValueError(f"{p.mr} is not a logical-synthesis relation")
    report = LogicStageReport(case.case_id)
    ordered = sorted(pairs, key=lambda p: mr_order(p.mr))
    if not ordered:
        return report
    stage = Family.LOGICAL_SYNTHESIS
    schema = schemas[case.db_ref]

    try:
        if ssl is None:
            ssl = request_schema_linking(case.question, schema, backend, case.evidence).parsed
        source_sql = request_sql(case.question, schema, ssl, backend, Stage.SOURCE, case.evidence).parsed
    except GatewayError as exc:
        if isinstance(exc, BackendUnavailable):
            report.errors.append(str(exc))
        for pair in ordered:
            report.verdicts.append(Verdict(case.case_id, pair.mr, stage, Outcome.SKIP,
                                           f"source SQL: {exc}", skip_reason(exc)))
        return report
    report.source_sql = source_sql.sql_text
    source_result = execute_sql(db_handles[case.db_ref], source_sql)
    report.source_result_size = source_result.size

    for pair in ordered:
        f_schema = schemas[pair.followup_db_ref]
        try:
            fsl = request_schema_linking(pair.followup_question, f_schema, backend, case.evidence).parsed
            f_sql = request_sql(pair.followup_question, f_schema, fsl, backend, Stage.FOLLOWUP, case.evidence).parsed
        except GatewayError as exc:
            if isinstance(exc, BackendUnavailable):
                report.errors.append(str(exc))
            report.verdicts.append(Verdict(case.case_id, pair.mr, stage, Outcome.SKIP,
                                           f"follow-up SQL: {exc}", skip_reason(exc)))
            continue
        report.followup_sql_by_mr[pair.mr] = f_sql.sql_text
        f_result = execute_sql(db_handles[pair.followup_db_ref], f_sql)
        report.followup_sizes[pair.mr] = f_result.size
        relation = compare_result_sets(source_result, f_result, result_mode)
        outcome, why = LOGIC_VERDICTS[pair.mr, relation]
        detail = f"{relation.value}: sizes {source_result.size} -> {f_result.size}"
        if why:
            detail += f"; {why}"
        errors = [e for e in (source_result.error, f_result.error) if e]
        if errors:
            detail += f" ({'; '.join(errors)})"
        report.verdicts.append(Verdict(case.case_id, pair.mr, stage, outcome, detail))
    return report
