from __future__ import annotations

import itertools

import pytest

from scripted import OFFLINE, Scripted

from sqlhd.model import SCHEMA_MRS, Column, Family, MRId, MutationTrace, Outcome, QuestionPair, SchemaDescriptor, SchemaLinking, SourceCase, Table
from sqlhd.schema_stage import (
    SCHEMA_VERDICTS,
    CompareMode,
    LinkingComparison,
    SchemaStageReport,
    compare_linkings,
    describe_diff,
    run_schema_stage,
    verdict_for_schema,
)

SCHEMA = SchemaDescriptor("db", (Table("t", (Column("a"), Column("b"))), Table("u", (Column("a"),))))
SCHEMAS = {"db": SCHEMA, "db__dsr": SCHEMA}
CASE = SourceCase("c1", "source?", "db")
L1 = {"tables": ["t"], "columns": [["t", "a"]]}
L2 = {"tables": ["t", "u"], "columns": [["t", "a"], ["u", "a"]]}


def pair(mr: MRId, question: str | None = None) -> QuestionPair:
    q = question or f"follow-up {mr.value}?"
    db = "db__dsr" if mr is MRId.DSR else "db"
    return QuestionPair(CASE.case_id, mr, CASE.question, q, MutationTrace("", None, (0, 0)), db)


def test_compare_linkings():
    a, b = SchemaLinking.from_dict(L1), SchemaLinking.from_dict(L2)
    assert compare_linkings(a, a) is LinkingComparison.EQUAL
    assert compare_linkings(b, a) is LinkingComparison.DIFFERENT
    assert compare_linkings(b, a, CompareMode.CONTAINMENT) is LinkingComparison.FOLLOWUP_CONTAINED
    assert compare_linkings(a, b, CompareMode.CONTAINMENT) is LinkingComparison.DIFFERENT


def test_joins_compared_only_when_both_sides_report_them():
    plain = SchemaLinking.build(["t", "u"])
    joined = SchemaLinking.build(["t", "u"], joins=[("t.a", "u.a")])
    other = SchemaLinking.build(["t", "u"], joins=[("t.b", "u.a")])
    assert compare_linkings(plain, joined) is LinkingComparison.EQUAL
    assert compare_linkings(joined, other) is LinkingComparison.DIFFERENT


def test_describe_diff():
    a, b = SchemaLinking.from_dict(L1), SchemaLinking.from_dict(L2)
    assert describe_diff(a, b) == "+[u.a, u]"
    assert describe_diff(b, a) == "-[u.a, u]"
    assert describe_diff(a, a) == "identical"


# expected verdicts, written out by hand
EQUAL_EXPECTED = {"SROCW", "AROCW", "ESR", "RC", "OS", "SC"}
CONTAINMENT_TOLERANT = {"RC", "OS", "ENSR", "DSR"}


@pytest.mark.parametrize("mr, comparison", list(itertools.product(SCHEMA_MRS, LinkingComparison)))
def test_schema_verdict_table(mr, comparison):
    if comparison is LinkingComparison.FOLLOWUP_CONTAINED:
        want = Outcome.PASS if mr.value in CONTAINMENT_TOLERANT else Outcome.VIOLATION
    elif mr.value in EQUAL_EXPECTED:
        want = Outcome.PASS if comparison is LinkingComparison.EQUAL else Outcome.VIOLATION
    else:
        want = Outcome.VIOLATION if comparison is LinkingComparison.EQUAL else Outcome.PASS
    assert verdict_for_schema(mr, comparison) is want
    assert SCHEMA_VERDICTS[mr, comparison] is want


def test_logic_relation_rejected_by_schema_table():
    with pytest.raises(ValueError):
        verdict_for_schema(MRId.PI, LinkingComparison.EQUAL)


def test_stage_counts_violations_in_canonical_order():
    pairs = [pair(MRId.SC), pair(MRId.ENSR), pair(MRId.SROCW), pair(MRId.DSR)]
    script = {CASE.question: L1, "follow-up SC?": L1, "follow-up ENSR?": L1,
              "follow-up SROCW?": L2, "follow-up DSR?": L2}
    report = run_schema_stage(CASE, pairs, Scripted(script), SCHEMAS)
    got = [(v.mr, v.outcome) for v in report.verdicts]
    assert got == [
        (MRId.SROCW, Outcome.VIOLATION), (MRId.ENSR, Outcome.VIOLATION),
        (MRId.SC, Outcome.PASS), (MRId.DSR, Outcome.PASS),
    ]
    assert report.hds_increment == 2 and report.detected
    assert all(v.stage is Family.SCHEMA_LINKING for v in report.verdicts)
    assert SchemaStageReport.from_dict(CASE.case_id, report.to_dict()).to_dict() == report.to_dict()


def test_one_bad_followup_only_skips_its_relation():
    pairs = [pair(MRId.OS), pair(MRId.SC)]
    script = {CASE.question: L1, "follow-up OS?": "!no json here", "follow-up SC?": L1}
    report = run_schema_stage(CASE, pairs, Scripted(script), SCHEMAS)
    os_v, sc_v = report.verdicts
    assert os_v.outcome is Outcome.SKIP and os_v.reason == "generator parse failure"
    assert sc_v.outcome is Outcome.PASS
    assert not report.errors


def test_source_failure_skips_everything():
    pairs = [pair(MRId.OS), pair(MRId.SC)]
    report = run_schema_stage(CASE, pairs, Scripted({}), SCHEMAS)
    assert [v.reason for v in report.verdicts] == ["fixture missing"] * 2
    assert report.hds_increment == 0

    report = run_schema_stage(CASE, pairs, Scripted({CASE.question: OFFLINE}), SCHEMAS)
    assert {v.reason for v in report.verdicts} == {"backend unavailable"}
    assert report.errors


def test_containment_mode_tolerates_dropped_condition():
    pairs = [pair(MRId.RC), pair(MRId.SC)]
    script = {CASE.question: L2, "follow-up RC?": L1, "follow-up SC?": L1}
    strict = run_schema_stage(CASE, pairs, Scripted(script), SCHEMAS)
    loose = run_schema_stage(CASE, pairs, Scripted(script), SCHEMAS, CompareMode.CONTAINMENT)
    assert [v.outcome for v in strict.verdicts] == [Outcome.VIOLATION, Outcome.VIOLATION]
    assert [v.outcome for v in loose.verdicts] == [Outcome.PASS, Outcome.VIOLATION]


def test_rejects_foreign_pairs():
    with pytest.raises(ValueError):
        run_schema_stage(CASE, [pair(MRId.PI)], Scripted(), SCHEMAS)
    stranger = QuestionPair("other", MRId.OS, "q", "q.", MutationTrace("", None, (0, 0)), "db")
    with pytest.raises(ValueError):
        run_schema_stage(CASE, [stranger], Scripted(), SCHEMAS)
