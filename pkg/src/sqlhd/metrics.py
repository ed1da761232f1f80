"""Detection tallies, confusion-matrix scores and report rendering."""

from __future__ import annotations

import enum
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .logic_stage import LogicStageReport
from .model import (
    Category,
    ConfusionMatrix,
    DetectionTally,
    Family,
    MRId,
    Outcome,
    Verdict,
    lookup,
    mr_catalog,
)
from .schema_stage import SchemaStageReport

REPORT_SCHEMA = "sqlhd-report/1"


class PositiveClass(str, enum.Enum):
    HALLUCINATION_DETECTED = "HallucinationDetected"
    HALLUCINATION_FREE = "HallucinationFree"


def tally(verdicts: Iterable[Verdict]) -> DetectionTally:
    """Count Violations; Suspect and Skip are kept apart and never add to HDN."""
    t = DetectionTally()
    for v in verdicts:
        if v.outcome is Outcome.SUSPECT:
            t.suspect += 1
        elif v.outcome is Outcome.SKIP:
            t.skip += 1
        elif v.outcome is Outcome.VIOLATION:
            mr = lookup(v.mr)
            t.hdn_total += 1
            t.per_mr[mr.id] = t.per_mr.get(mr.id, 0) + 1
            t.per_family[mr.family] = t.per_family.get(mr.family, 0) + 1
            t.per_category[mr.category] = t.per_category.get(mr.category, 0) + 1
    return t


def hdr(child_hdn: int, parent_hdn: int) -> Fraction:
    if parent_hdn == 0:
        raise ZeroDivisionError("HDR is undefined when the parent detects nothing")
    return Fraction(child_hdn, parent_hdn)


def format_ratio(value: Fraction | float) -> str:
    return f"{float(value):.4f}"


def confusion(
    per_case_detection: Mapping[str, bool],
    truth: Mapping[str, bool | None],
    positive_class: PositiveClass = PositiveClass.HALLUCINATION_DETECTED,
) -> ConfusionMatrix:
    """Per-case confusion matrix.

    ``truth[case]`` is True when the case really contains a hallucination.
    With ``HALLUCINATION_FREE`` as the positive class, both sides are negated.
    """
    missing = sorted(set(per_case_detection) ^ set(truth))
    if missing:
        raise KeyError(f"label/detection mismatch for case {missing[0]!r}")
    tp = fp = fn = tn = 0
    flip = positive_class is PositiveClass.HALLUCINATION_FREE
    for case_id, detected in per_case_detection.items():
        label = truth[case_id]
        if label is None:
            raise KeyError(f"missing truth label for case {case_id!r}")
        predicted, actual = bool(detected) ^ flip, bool(label) ^ flip
        if predicted and actual:
            tp += 1
        elif predicted:
            fp += 1
        elif actual:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fp, fn, tn)


@dataclass(frozen=True)
class Scores:
    accuracy: float
    precision: float
    recall: float
    f1: float
    precision_defined: bool = True
    recall_defined: bool = True

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "precision_defined": self.precision_defined,
            "recall_defined": self.recall_defined,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scores":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def scores(cm: ConfusionMatrix) -> Scores:
    if cm.total == 0:
        raise ValueError("cannot score an empty confusion matrix")
    accuracy = (cm.tp + cm.tn) / cm.total
    p_def, r_def = cm.tp + cm.fp > 0, cm.tp + cm.fn > 0
    precision = cm.tp / (cm.tp + cm.fp) if p_def else 0.0
    recall = cm.tp / (cm.tp + cm.fn) if r_def else 0.0
    f1 = f1_score(precision, recall) if p_def and r_def else 0.0
    return Scores(accuracy, precision, recall, f1, p_def, r_def)


# --------------------------------------------------------------------------
# tally (de)serialization


def tally_to_dict(t: DetectionTally) -> dict:
    return {
        "hdn_total": t.hdn_total,
        "per_family": {f.value: t.per_family.get(f, 0) for f in Family},
        "per_category": {c.value: t.per_category.get(c, 0) for c in Category},
        "per_mr": {m.id.value: t.per_mr.get(m.id, 0) for m in mr_catalog()},
        "suspect": t.suspect,
        "skip": t.skip,
    }


def tally_from_dict(d: Mapping) -> DetectionTally:
    return DetectionTally(
        d["hdn_total"],
        {MRId(k): v for k, v in d["per_mr"].items() if v},
        {Family(k): v for k, v in d["per_family"].items() if v},
        {Category(k): v for k, v in d.get("per_category", {}).items() if v},
        d.get("suspect", 0),
        d.get("skip", 0),
    )


def hdr_rows(t: DetectionTally) -> list[tuple[str, str, int, str]]:
    """(level, name, HDN, HDR) rows: families against the total, categories
    against their family, relations against their category."""
    def ratio(child: int, parent: int) -> str:
        return format_ratio(hdr(child, parent)) if parent else "n/a"

    rows = []
    for fam in Family:
        fam_n = t.per_family.get(fam, 0)
        rows.append(("family", fam.value, fam_n, ratio(fam_n, t.hdn_total)))
        cats = []
        for m in mr_catalog(fam):
            if m.category not in cats:
                cats.append(m.category)
        for cat in cats:
            cat_n = t.per_category.get(cat, 0)
            rows.append(("category", cat.value, cat_n, ratio(cat_n, fam_n)))
            for m in mr_catalog(fam):
                if m.category is cat:
                    n = t.per_mr.get(m.id, 0)
                    rows.append(("mr", m.id.value, n, ratio(n, cat_n)))
    return rows


# --------------------------------------------------------------------------
# reports


@dataclass
class CaseResult:
    case_id: str
    schema: SchemaStageReport | None = None
    logic: LogicStageReport | None = None

    @property
    def verdicts(self) -> list[Verdict]:
        out = []
        if self.schema is not None:
            out += self.schema.verdicts
        if self.logic is not None:
            out += self.logic.verdicts
        return out

    @property
    def detected(self) -> bool:
        return any(v.outcome is Outcome.VIOLATION for v in self.verdicts)


@dataclass
class Report:
    cases: list[CaseResult] = field(default_factory=list)
    tally: DetectionTally = field(default_factory=DetectionTally)
    confusion: ConfusionMatrix | None = None
    scores: Scores | None = None
    positive_class: PositiveClass | None = None
    run: dict = field(default_factory=dict)
    partial: bool = False
    coverage: dict = field(default_factory=dict)

    def verdicts(self) -> list[Verdict]:
        return [v for c in self.cases for v in c.verdicts]

    def detections(self) -> dict[str, bool]:
        return {c.case_id: c.detected for c in self.cases}

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "partial": self.partial,
            "run": self.run,
            "coverage": self.coverage,
            "cases": [
                {
                    "case_id": c.case_id,
                    "detected": c.detected,
                    "schema_stage": c.schema.to_dict() if c.schema is not None else None,
                    "logic_stage": c.logic.to_dict() if c.logic is not None else None,
                }
                for c in self.cases
            ],
            "tally": tally_to_dict(self.tally),
            "hdr": [list(r) for r in hdr_rows(self.tally)],
            "confusion": (
                {"tp": self.confusion.tp, "fp": self.confusion.fp,
                 "fn": self.confusion.fn, "tn": self.confusion.tn}
                if self.confusion is not None else None
            ),
            "positive_class": self.positive_class.value if self.positive_class else None,
            "scores": self.scores.to_dict() if self.scores is not None else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Report":
        if d.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema {d.get('schema')!r}")
        cases = []
        for c in d["cases"]:
            cid = c["case_id"]
            cases.append(CaseResult(
                cid,
                SchemaStageReport.from_dict(cid, c["schema_stage"]) if c.get("schema_stage") else None,
                LogicStageReport.from_dict(cid, c["logic_stage"]) if c.get("logic_stage") else None,
            ))
        cm = d.get("confusion")
        return cls(
            cases,
            tally_from_dict(d["tally"]),
            ConfusionMatrix(**cm) if cm else None,
            Scores.from_dict(d["scores"]) if d.get("scores") else None,
            PositiveClass(d["positive_class"]) if d.get("positive_class") else None,
            dict(d.get("run", {})),
            bool(d.get("partial", False)),
            dict(d.get("coverage", {})),
        )


def build_report(
    schema_reports: Sequence[SchemaStageReport],
    logic_reports: Sequence[LogicStageReport],
    t: DetectionTally | None = None,
    cm: ConfusionMatrix | None = None,
    sc: Scores | None = None,
    **extra,
) -> Report:
    by_case: dict[str, CaseResult] = {}
    for r in schema_reports:
        by_case.setdefault(r.case_ref, CaseResult(r.case_ref)).schema = r
    for r in logic_reports:
        by_case.setdefault(r.case_ref, CaseResult(r.case_ref)).logic = r
    report = Report(list(by_case.values()), confusion=cm, scores=sc, **extra)
    report.tally = t if t is not None else tally(report.verdicts())
    return report


def render_report(
    schema_reports: Sequence[SchemaStageReport],
    logic_reports: Sequence[LogicStageReport],
    t: DetectionTally | None = None,
    cm: ConfusionMatrix | None = None,
    sc: Scores | None = None,
    fmt: str = "json",
    **extra,
) -> str:
    report = build_report(schema_reports, logic_reports, t, cm, sc, **extra)
    return dump_report(report, fmt)


def dump_report(report: Report, fmt: str = "json") -> str:
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=False, ensure_ascii=False) + "\n"
    if fmt == "text":
        return render_text(report)
    raise ValueError(f"unknown report format {fmt!r}")


def parse_report(text: str) -> Report:
    return Report.from_dict(json.loads(text))


def render_text(report: Report) -> str:
    out = io.StringIO()
    w = out.write
    detected = sum(c.detected for c in report.cases)
    w(f"SQLHD detection report ({REPORT_SCHEMA})\n")
    w(f"cases: {len(report.cases)}  flagged: {detected}  partial: {'yes' if report.partial else 'no'}\n")
    if report.coverage.get("missing_fixtures"):
        w(f"coverage gap: {report.coverage['missing_fixtures']} prompt(s) without a recorded response\n")
    w("\nverdicts\n")
    for c in report.cases:
        for v in c.verdicts:
            note = v.reason if v.outcome is Outcome.SKIP else v.detail
            w(f"  {c.case_id:<12} {v.stage.value:<16} {v.mr.value:<6} {v.outcome.value:<9} {note}\n")
        if not c.verdicts:
            w(f"  {c.case_id:<12} (no applicable relations)\n")
    w("\nhallucination detections\n")
    w(f"  {'level':<9} {'name':<16} {'HDN':>6} {'HDR':>7}\n")
    for level, name, n, r in hdr_rows(report.tally):
        w(f"  {level:<9} {name:<16} {n:>6} {r:>7}\n")
    w(f"  total HDN: {report.tally.hdn_total}\n")
    w(f"  suspect: {report.tally.suspect}  skip: {report.tally.skip}\n")
    if report.confusion is not None:
        cm = report.confusion
        pc = report.positive_class.value if report.positive_class else PositiveClass.HALLUCINATION_DETECTED.value
        w(f"\nconfusion (positive = {pc}): TP={cm.tp} FP={cm.fp} FN={cm.fn} TN={cm.tn}\n")
    if report.scores is not None:
        s = report.scores
        flags = []
        if not s.precision_defined:
            flags.append("precision undefined")
        if not s.recall_defined:
            flags.append("recall undefined")
        w(f"accuracy {s.accuracy:.4f}  precision {s.precision:.4f}  recall {s.recall:.4f}  f1 {s.f1:.4f}")
        w(f"  ({', '.join(flags)})\n" if flags else "\n")
    return out.getvalue()
