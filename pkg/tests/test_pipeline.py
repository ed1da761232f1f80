from __future__ import annotations

import pytest

from scripted import Scripted

from sqlhd.dataset import load_dataset, write_dataset
from sqlhd.gateway import RequestKind
from sqlhd.model import MRId, MutationTrace, Outcome, QuestionPair, SourceCase
from sqlhd.pipeline import DetectConfig, StageMode, run_detection

LINK = {"tables": ["employee"], "columns": [["employee", "age"], ["employee", "name"]]}
WRONG = {"tables": ["employee"], "columns": [["employee", "city"]]}
SQL = "SELECT name FROM employee WHERE age > 40"


@pytest.fixture
def setup(tmp_path, db_root):
    cases = [SourceCase("X", "Who is older than 40?", "company", truth_label=True),
             SourceCase("Y", "Who is older than 50?", "company", truth_label=False)]
    write_dataset(cases, tmp_path / "d.jsonl")
    manifest = load_dataset(tmp_path / "d.jsonl", db_root)
    pairs, linkings, sql = [], {}, {}
    for c in cases:
        sc = f"{c.question[:-1]}, if you could?"
        pi = f"Tell me who is older than {c.question.split()[-1][:-1]}?"
        pairs += [QuestionPair(c.case_id, MRId.SC, c.question, sc, MutationTrace("", None, (0, 0)), "company"),
                  QuestionPair(c.case_id, MRId.PI, c.question, pi, MutationTrace("", None, (0, 0)), "company")]
        # case X hallucinates a column for its follow-up linking
        linkings.update({c.question: LINK, sc: WRONG if c.case_id == "X" else LINK, pi: LINK})
        sql.update({c.question: SQL, pi: SQL})
    return manifest, pairs, linkings, sql


@pytest.mark.parametrize("mode, x_logic, y_schema", [
    (StageMode.GATED, False, True),
    (StageMode.BOTH, True, True),
    (StageMode.SCHEMA_ONLY, False, True),
    (StageMode.LOGIC_ONLY, True, False),
])
def test_stage_modes(setup, mode, x_logic, y_schema):
    manifest, pairs, linkings, sql = setup
    backend = Scripted(linkings, sql)
    report = run_detection(manifest, pairs, backend, DetectConfig(stage_mode=mode, workers=2))
    x, y = report.cases
    assert (x.logic is not None) is x_logic
    assert (y.schema is not None) is y_schema
    assert (y.logic is not None) is (mode is not StageMode.SCHEMA_ONLY)
    assert x.detected is (mode is not StageMode.LOGIC_ONLY)
    assert not y.detected

    x_questions = {"Who is older than 40?", *(p.followup_question for p in pairs if p.case_ref == "X")}
    sql_for_x = {r.question for r in backend.requests if r.kind is RequestKind.SQL} & x_questions
    assert bool(sql_for_x) is x_logic


def test_scores_and_manifest_order(setup):
    manifest, pairs, linkings, sql = setup
    report = run_detection(manifest, pairs, Scripted(linkings, sql), DetectConfig(workers=4))
    assert [c.case_id for c in report.cases] == ["X", "Y"]
    assert (report.confusion.tp, report.confusion.tn) == (1, 1)
    assert report.scores.accuracy == 1.0
    assert report.tally.hdn_total == 1
    assert report.verdicts()[0].outcome is Outcome.VIOLATION


def test_pairs_for_unknown_cases_are_rejected(setup):
    manifest, pairs, linkings, sql = setup
    stray = QuestionPair("Q", MRId.SC, "q", "q.", MutationTrace("", None, (0, 0)), "company")
    with pytest.raises(ValueError, match="'Q'"):
        run_detection(manifest, [*pairs, stray], Scripted(linkings, sql))
