from __future__ import annotations

import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scripted import Scripted

from sqlhd.dataset import load_schema, materialize_variant, open_database
from sqlhd.gateway import RequestKind, render_schema
from sqlhd.model import LOGIC_MRS, MRId, MutationTrace, Outcome, QuestionPair, ResultSet, SourceCase
from sqlhd.mutation import derive_schema_variant
from sqlhd.logic_stage import (
    LOGIC_VERDICTS,
    SOURCE_FAILURE,
    LogicStageReport,
    ResultMode,
    ResultRelation,
    compare_result_sets,
    execute_sql,
    run_logic_stage,
    verdict_for_logic,
)

R = ResultRelation
LINK = {"tables": ["employee"], "columns": [["employee", "age"], ["employee", "name"]]}


def rs(*rows) -> ResultSet:
    return ResultSet.from_rows([(r,) if not isinstance(r, tuple) else r for r in rows], 1 if not rows else None)


def test_compare_basic_relations():
    assert compare_result_sets(rs(1, 2), rs(2, 1)) is R.EQUAL
    assert compare_result_sets(rs(1), rs(1, 2)) is R.FOLLOWUP_PROPER_SUPERSET
    assert compare_result_sets(rs(1, 1), rs(1)) is R.FOLLOWUP_PROPER_SUBSET
    assert compare_result_sets(rs(1, 2), rs(2, 3)) is R.INCOMPARABLE
    assert compare_result_sets(rs((1, 2)), rs(1)) is R.INCOMPARABLE
    bad = ResultSet.failure("no such table")
    assert compare_result_sets(bad, rs(1)) is R.SOURCE_ERROR
    assert compare_result_sets(rs(1), bad) is R.FOLLOWUP_ERROR
    assert compare_result_sets(bad, bad) is R.BOTH_ERROR


def test_multiplicity_matters():
    assert compare_result_sets(rs(1, 1, 2), rs(1, 2, 2)) is R.INCOMPARABLE


def test_empty_results_are_equal_and_contained():
    assert compare_result_sets(rs(), rs()) is R.EQUAL
    assert compare_result_sets(rs(), rs(4)) is R.FOLLOWUP_PROPER_SUPERSET


def test_size_only_mode():
    assert compare_result_sets(rs(1, 2), rs(3, 4), ResultMode.SIZE_ONLY) is R.EQUAL
    assert compare_result_sets(rs(1), rs(3, 4), ResultMode.SIZE_ONLY) is R.FOLLOWUP_PROPER_SUPERSET
    assert compare_result_sets(rs(1, 2), rs(3), ResultMode.SIZE_ONLY) is R.FOLLOWUP_PROPER_SUBSET


def _contained(small: list, big: list) -> bool:
    rest = list(big)
    for x in small:
        if x not in rest:
            return False
        rest.remove(x)
    return True


def _oracle(a: list, b: list) -> ResultRelation:
    fwd, back = _contained(a, b), _contained(b, a)
    if fwd and back:
        return R.EQUAL
    if fwd:
        return R.FOLLOWUP_PROPER_SUPERSET
    if back:
        return R.FOLLOWUP_PROPER_SUBSET
    return R.INCOMPARABLE


_DUAL = {R.EQUAL: R.EQUAL, R.INCOMPARABLE: R.INCOMPARABLE,
         R.FOLLOWUP_PROPER_SUPERSET: R.FOLLOWUP_PROPER_SUBSET,
         R.FOLLOWUP_PROPER_SUBSET: R.FOLLOWUP_PROPER_SUPERSET}

rows = st.lists(st.sampled_from([0, 1, 2, "a", None, 1.5]), max_size=6)


@settings(max_examples=300, deadline=None)
@given(rows, rows)
def test_comparison_matches_brute_force_and_is_dual(a, b):
    ra, rb = rs(*a), rs(*b)
    got = compare_result_sets(ra, rb)
    assert got is _oracle(list(ra.rows), list(rb.rows))
    assert compare_result_sets(rb, ra) is _DUAL[got]


@pytest.mark.parametrize("mr, rel", list(itertools.product(LOGIC_MRS, ResultRelation)))
def test_logic_verdict_table(mr, rel):
    if rel in (R.SOURCE_ERROR, R.BOTH_ERROR, R.FOLLOWUP_ERROR):
        want = Outcome.VIOLATION
    elif mr is MRId.AROE:
        want = Outcome.SUSPECT if rel is R.EQUAL else Outcome.PASS
    elif mr is MRId.CRE:
        want = Outcome.PASS if rel in (R.EQUAL, R.FOLLOWUP_PROPER_SUPERSET) else Outcome.VIOLATION
    elif mr is MRId.CWR:
        want = Outcome.PASS if rel in (R.EQUAL, R.FOLLOWUP_PROPER_SUBSET) else Outcome.VIOLATION
    elif mr is MRId.DR:
        want = Outcome.PASS
    else:
        want = Outcome.PASS if rel is R.EQUAL else Outcome.VIOLATION
    assert verdict_for_logic(mr, rel) is want
    if rel in (R.SOURCE_ERROR, R.BOTH_ERROR):
        assert LOGIC_VERDICTS[mr, rel][1] == SOURCE_FAILURE


def test_schema_relation_rejected_by_logic_table():
    with pytest.raises(ValueError):
        verdict_for_logic(MRId.SC, R.EQUAL)


def test_execute_sql_turns_failures_into_errors(db_root):
    db = open_database(db_root, "company")
    assert execute_sql(db, "SELECT name FROM employee WHERE age > 40").size == 4
    broken = execute_sql(db, "SELECT nope FROM employee")
    assert broken.size == -1 and "nope" in broken.error
    assert execute_sql(db, "DELETE FROM employee").size == -1


# --------------------------------------------------------------------------
# whole-stage runs against the company table

CASE = SourceCase("c1", "Who is at least 40?", "company")


def pair(mr: MRId, q: str, db: str = "company") -> QuestionPair:
    return QuestionPair(CASE.case_id, mr, CASE.question, q, MutationTrace("", None, (0, 0)), db)


def run(db_root, pairs, sql, extra_schemas=None, **kw) -> LogicStageReport:
    schemas = {"company": load_schema(db_root, "company"), **(extra_schemas or {})}
    handles = {ref: open_database(db_root, ref) for ref in schemas}
    linkings = {q: LINK for q in [CASE.question, *(p.followup_question for p in pairs)]}
    return run_logic_stage(CASE, pairs, Scripted(linkings, sql), schemas, handles, **kw)


def test_cwr_strict_comparison_passes_and_loosened_fails(db_root):
    good = pair(MRId.CWR, "Who is older than 40?")
    report = run(db_root, [good], {
        CASE.question: "SELECT name FROM employee WHERE age >= 40",
        good.followup_question: "SELECT name FROM employee WHERE age > 40",
    })
    (v,) = report.verdicts
    assert v.outcome is Outcome.PASS
    assert report.source_result_size == 5 and report.followup_sizes[MRId.CWR] == 4

    report = run(db_root, [good], {
        CASE.question: "SELECT name FROM employee WHERE age >= 40",
        good.followup_question: "SELECT name FROM employee WHERE age >= 30",
    })
    (v,) = report.verdicts
    assert v.outcome is Outcome.VIOLATION and "gained rows" in v.detail
    assert report.detected


def test_aroe_on_constant_column_is_suspect_not_violation(db_root):
    p = pair(MRId.AROE, "Who is at most 40?")
    report = run(db_root, [p], {
        CASE.question: "SELECT MAX(salary) FROM employee WHERE salary = 50000",
        p.followup_question: "SELECT MIN(salary) FROM employee WHERE salary = 50000",
    })
    (v,) = report.verdicts
    assert v.outcome is Outcome.SUSPECT
    assert report.hds_increment == 0


def test_source_failure_marks_every_relation(db_root):
    pairs = [pair(MRId.PI, "Tell me who is at least 40?"), pair(MRId.CRE, "Who is at least 30?")]
    report = run(db_root, pairs, {
        CASE.question: "SELECT name FROM staff",
        pairs[0].followup_question: "SELECT name FROM employee WHERE age >= 40",
        pairs[1].followup_question: "SELECT name FROM staff",
    })
    assert [v.outcome for v in report.verdicts] == [Outcome.VIOLATION, Outcome.VIOLATION]
    assert all(SOURCE_FAILURE in v.detail for v in report.verdicts)
    assert report.source_result_size == -1


def test_followup_failure_is_a_violation(db_root):
    p = pair(MRId.PI, "Tell me who is at least 40?")
    report = run(db_root, [p], {
        CASE.question: "SELECT name FROM employee WHERE age >= 40",
        p.followup_question: "SELECT nme FROM employee",
    })
    (v,) = report.verdicts
    assert v.outcome is Outcome.VIOLATION and report.followup_sizes[MRId.PI] == -1


def test_missing_followup_fixture_skips_only_that_relation(db_root):
    pairs = [pair(MRId.PI, "Tell me who is at least 40?"), pair(MRId.PS, "Who is at least 40, please?")]
    report = run(db_root, pairs, {
        CASE.question: "SELECT name FROM employee WHERE age >= 40",
        pairs[1].followup_question: "SELECT name FROM employee WHERE 40 <= age",
    })
    pi, ps = report.verdicts
    assert pi.outcome is Outcome.SKIP and pi.reason == "fixture missing"
    assert ps.outcome is Outcome.PASS
    assert LogicStageReport.from_dict("c1", report.to_dict()).to_dict() == report.to_dict()


class SchemaAware(Scripted):
    """Answers SQL requests on the renamed copy with ``renamed`` and all others with ``original``."""

    def __init__(self, variant, original: str, renamed: str) -> None:
        super().__init__({CASE.question: LINK})
        self.variant_text = render_schema(variant)
        self.original, self.renamed = original, renamed

    def complete(self, request):
        if request.kind is RequestKind.SQL:
            self.requests.append(request)
            sql = self.renamed if request.schema_text == self.variant_text else self.original
            return f"```sql\n{sql}\n```", True
        return super().complete(request)


def test_dr_runs_on_the_renamed_copy(db_root):
    schema = load_schema(db_root, "company")
    variant, rename = derive_schema_variant(schema, MRId.DR, seed=2)
    materialize_variant(db_root, schema, variant, rename)
    schemas = {"company": schema, variant.db_ref: variant}
    handles = {ref: open_database(db_root, ref) for ref in schemas}
    p = pair(MRId.DR, CASE.question, variant.db_ref)
    original = "SELECT name FROM employee WHERE age >= 40"

    # a generator ignoring the renaming writes SQL that fails on the copy
    report = run_logic_stage(CASE, [p], SchemaAware(variant, original, original), schemas, handles)
    assert report.verdicts[0].outcome is Outcome.VIOLATION

    renamed = f"SELECT {rename['employee.name']} FROM {rename['employee']} WHERE {rename['employee.age']} < 0"
    report = run_logic_stage(CASE, [p], SchemaAware(variant, original, renamed), schemas, handles)
    assert report.verdicts[0].outcome is Outcome.PASS
    assert report.followup_sizes[MRId.DR] == 0


def test_rejects_schema_pairs(db_root):
    with pytest.raises(ValueError):
        run(db_root, [pair(MRId.SC, "x?")], {})
