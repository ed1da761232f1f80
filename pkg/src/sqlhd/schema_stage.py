"""Stage 1: hallucination detection over schema linkings."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .gateway import Backend, BackendUnavailable, FixtureMissing, GatewayError, UnparseableResponse, request_schema_linking
from .model import (
    Family,
    MRId,
    Outcome,
    QuestionPair,
    SchemaDescriptor,
    SchemaLinking,
    SourceCase,
    Verdict,
    lookup,
    mr_order,
)


class CompareMode(str, enum.Enum):
    STRICT = "strict"
    CONTAINMENT = "containment"


class LinkingComparison(str, enum.Enum):
    EQUAL = "Equal"
    DIFFERENT = "Different"
    FOLLOWUP_CONTAINED = "FollowupContained"


EQUALITY_GROUP = frozenset({MRId.SROCW, MRId.AROCW, MRId.ESR, MRId.RC, MRId.OS, MRId.SC})
INEQUALITY_GROUP = frozenset({MRId.ENSR, MRId.DSR})
# equality-group relations allowed to lose linked elements under containment mode
_RELAXABLE = frozenset({MRId.RC, MRId.OS})


def _items(linking: SchemaLinking, with_joins: bool) -> set:
    items = {("t", t) for t in linking.tables} | {("c", c) for c in linking.columns}
    if with_joins:
        items |= {("j", j) for j in linking.joins}
    return items


def compare_linkings(
    ssl: SchemaLinking, fsl: SchemaLinking, mode: CompareMode = CompareMode.STRICT
) -> LinkingComparison:
    # joins only count when both sides report some
    with_joins = bool(ssl.joins) and bool(fsl.joins)
    a, b = _items(ssl, with_joins), _items(fsl, with_joins)
    if a == b:
        return LinkingComparison.EQUAL
    if mode is CompareMode.CONTAINMENT and b < a:
        return LinkingComparison.FOLLOWUP_CONTAINED
    return LinkingComparison.DIFFERENT


def _schema_table() -> dict[tuple[MRId, LinkingComparison], Outcome]:
    table = {}
    for mr in EQUALITY_GROUP:
        table[mr, LinkingComparison.EQUAL] = Outcome.PASS
        table[mr, LinkingComparison.DIFFERENT] = Outcome.VIOLATION
        table[mr, LinkingComparison.FOLLOWUP_CONTAINED] = (
            Outcome.PASS if mr in _RELAXABLE else Outcome.VIOLATION
        )
    for mr in INEQUALITY_GROUP:
        table[mr, LinkingComparison.EQUAL] = Outcome.VIOLATION
        table[mr, LinkingComparison.DIFFERENT] = Outcome.PASS
        table[mr, LinkingComparison.FOLLOWUP_CONTAINED] = Outcome.PASS
    return table


SCHEMA_VERDICTS = _schema_table()


def verdict_for_schema(mr: MRId | str, comparison: LinkingComparison) -> Outcome:
    mr = MRId(mr)
    if lookup(mr).family is not Family.SCHEMA_LINKING:
        raise ValueError(f"{mr} is not a schema-linking relation")
    return SCHEMA_VERDICTS[mr, comparison]


def describe_diff(ssl: SchemaLinking, fsl: SchemaLinking) -> str:
    def fmt(items) -> str:
        out = []
        for kind, v in sorted(items, key=repr):
            if kind == "t":
                out.append(v)
            elif kind == "c":
                out.append(".".join(v))
            else:
                out.append("=".join(".".join(e) for e in sorted(v)))
        return ", ".join(out)

    with_joins = bool(ssl.joins) and bool(fsl.joins)
    a, b = _items(ssl, with_joins), _items(fsl, with_joins)
    parts = []
    if b - a:
        parts.append(f"+[{fmt(b - a)}]")
    if a - b:
        parts.append(f"-[{fmt(a - b)}]")
    return " ".join(parts) or "identical"


def skip_reason(exc: GatewayError) -> str:
    if isinstance(exc, UnparseableResponse):
        return "generator parse failure"
    if isinstance(exc, FixtureMissing):
        return "fixture missing"
    if isinstance(exc, BackendUnavailable):
        return "backend unavailable"
    return f"generator error: {exc}"


@dataclass
class SchemaStageReport:
    case_ref: str
    verdicts: list[Verdict] = field(default_factory=list)
    ssl: SchemaLinking | None = None
    fsl_by_mr: dict[MRId, SchemaLinking] = field(default_factory=dict)
    errors: list[str] = field(default_factory=list)

    @property
    def hds_increment(self) -> int:
        return sum(v.outcome is Outcome.VIOLATION for v in self.verdicts)

    @property
    def detected(self) -> bool:
        return self.hds_increment > 0

    def to_dict(self) -> dict:
        return {
            "ssl": self.ssl.to_dict() if self.ssl is not None else None,
            "fsl_by_mr": {mr.value: l.to_dict() for mr, l in sorted(self.fsl_by_mr.items(), key=lambda x: mr_order(x[0]))},
            "verdicts": [v.to_dict() for v in self.verdicts],
            "hds_increment": self.hds_increment,
            "errors": list(self.errors),
        }

    @classmethod
    def from_dict(cls, case_ref: str, d: Mapping) -> "SchemaStageReport":
        return cls(
            case_ref,
            [Verdict.from_dict(v) for v in d["verdicts"]],
            SchemaLinking.from_dict(d["ssl"]) if d.get("ssl") is not None else None,
            {MRId(k): SchemaLinking.from_dict(v) for k, v in d.get("fsl_by_mr", {}).items()},
            list(d.get("errors", [])),
        )


def run_schema_stage(
    case: SourceCase,
    pairs: Sequence[QuestionPair],
    backend: Backend,
    schemas: Mapping[str, SchemaDescriptor],
    mode: CompareMode = CompareMode.STRICT,
) -> SchemaStageReport:
    """Generate the source linking once and one follow-up linking per pair.

    Generator failures turn into Skip verdicts for the affected relation only.
    """
    for p in pairs:
        if p.case_ref != case.case_id:
            raise ValueError(f"pair for {p.case_ref} passed with case {case.case_id}")
        if lookup(p.mr).family is not Family.SCHEMA_LINKING:
            raise ValueError(f"{p.mr} is not a schema-linking relation")
    report = SchemaStageReport(case.case_id)
    ordered = sorted(pairs, key=lambda p: mr_order(p.mr))
    stage = Family.SCHEMA_LINKING
    source_failure = None
    try:
        report.ssl = request_schema_linking(case.question, schemas[case.db_ref], backend, case.evidence).parsed
    except GatewayError as exc:
        source_failure = exc
        if isinstance(exc, BackendUnavailable):
            report.errors.append(str(exc))

    for pair in ordered:
        if source_failure is not None:
            report.verdicts.append(Verdict(case.case_id, pair.mr, stage, Outcome.SKIP,
                                           f"source linking: {source_failure}", skip_reason(source_failure)))
            continue
        try:
            fsl = request_schema_linking(
                pair.followup_question, schemas[pair.followup_db_ref], backend, case.evidence
            ).parsed
        except GatewayError as exc:
            if isinstance(exc, BackendUnavailable):
                report.errors.append(str(exc))
            report.verdicts.append(Verdict(case.case_id, pair.mr, stage, Outcome.SKIP,
                                           f"follow-up linking: {exc}", skip_reason(exc)))
            continue
        report.fsl_by_mr[pair.mr] = fsl
        comparison = compare_linkings(report.ssl, fsl, mode)
        outcome = verdict_for_schema(pair.mr, comparison)
        detail = f"{comparison.value}: {describe_diff(report.ssl, fsl)}"
        report.verdicts.append(Verdict(case.case_id, pair.mr, stage, outcome, detail))
    return report
