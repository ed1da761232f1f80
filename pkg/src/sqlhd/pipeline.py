"""Wiring of datasets, mutation, both detection stages and reporting."""

from __future__ import annotations

import enum
import hashlib
import logging
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from . import __version__
from .dataset import (
    DEFAULT_ROW_CAP,
    DEFAULT_TIMEOUT_S,
    DatabaseError,
    DatabaseHandle,
    DatasetManifest,
    database_path,
    load_schema,
    materialize_variant,
    open_database,
)
from .gateway import Backend, GatewayError, template_versions
from .logic_stage import ResultMode, run_logic_stage
from .metrics import CaseResult, PositiveClass, Report, confusion, scores, tally
from .model import SCHEMA_VARIANT_MRS, Family, MRId, QuestionPair, SchemaDescriptor, lookup, mr_order
from .mutation import Lexicon, NotApplicable, ValidationFailure, applicable_relations, apply_rename, mutate, validate_pair
from .schema_stage import CompareMode, run_schema_stage

log = logging.getLogger(__name__)


class StageMode(str, enum.Enum):
    GATED = "gated"
    BOTH = "both"
    SCHEMA_ONLY = "schema-only"
    LOGIC_ONLY = "logic-only"


@dataclass
class DetectConfig:
    stage_mode: StageMode = StageMode.GATED
    compare_mode: CompareMode = CompareMode.STRICT
    result_mode: ResultMode = ResultMode.MULTISET
    workers: int | None = None
    timeout: float = DEFAULT_TIMEOUT_S
    row_cap: int = DEFAULT_ROW_CAP
    positive_class: PositiveClass = PositiveClass.HALLUCINATION_DETECTED

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("workers")  # scheduling only; must not affect report bytes
        return {k: (v.value if isinstance(v, enum.Enum) else v) for k, v in d.items()}


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# mutation


@dataclass
class MutationRun:
    pairs: list[QuestionPair] = field(default_factory=list)
    applicable: Counter = field(default_factory=Counter)
    rejected: list[tuple[str, MRId, str]] = field(default_factory=list)
    variants: list[str] = field(default_factory=list)


def run_mutation(
    manifest: DatasetManifest,
    lexicon: Lexicon,
    seed: int,
    mrs: Iterable[MRId] | None = None,
    materialize: bool = True,
) -> MutationRun:
    wanted = set(MRId) if mrs is None else set(mrs)
    run = MutationRun()
    schemas: dict[str, SchemaDescriptor] = {}
    for case in manifest.cases:
        if case.db_ref not in schemas:
            schemas[case.db_ref] = load_schema(manifest.db_root, case.db_ref)
        schema = schemas[case.db_ref]
        for mr in sorted(applicable_relations(case.question, schema, lexicon) & wanted, key=mr_order):
            run.applicable[mr] += 1
            try:
                pair = validate_pair(mutate(case, mr, lexicon, schema, seed), lexicon, schema)
            except (NotApplicable, ValidationFailure) as exc:
                reason = exc.reason if isinstance(exc, ValidationFailure) else "not applicable"
                run.rejected.append((case.case_id, mr, reason))
                continue
            run.pairs.append(pair)
            if mr in SCHEMA_VARIANT_MRS and materialize:
                variant = apply_rename(schema, pair.trace.schema_rename_map, pair.followup_db_ref)
                if pair.followup_db_ref not in run.variants:
                    materialize_variant(manifest.db_root, schema, variant, dict(pair.trace.schema_rename_map))
                    run.variants.append(pair.followup_db_ref)
    return run


# --------------------------------------------------------------------------
# detection


class HandlePool:
    """Lazily opened read-only handles, owned by one worker."""

    def __init__(self, db_root: Path, timeout: float, row_cap: int) -> None:
        self.db_root = db_root
        self.timeout = timeout
        self.row_cap = row_cap
        self._handles: dict[str, DatabaseHandle] = {}

    def __getitem__(self, db_ref: str) -> DatabaseHandle:
        if db_ref not in self._handles:
            self._handles[db_ref] = open_database(self.db_root, db_ref, self.timeout, self.row_cap)
        return self._handles[db_ref]

    def close(self) -> None:
        for h in self._handles.values():
            h.close()
        self._handles.clear()


def resolve_schemas(manifest: DatasetManifest, pairs: Sequence[QuestionPair]) -> dict[str, SchemaDescriptor]:
    schemas = {ref: load_schema(manifest.db_root, ref) for ref in sorted({c.db_ref for c in manifest.cases})}
    sources = {c.case_id: c.db_ref for c in manifest.cases}
    for p in pairs:
        if p.followup_db_ref in schemas:
            continue
        if database_path(manifest.db_root, p.followup_db_ref).is_file():
            schemas[p.followup_db_ref] = load_schema(manifest.db_root, p.followup_db_ref)
        elif p.trace.schema_rename_map:
            source = schemas[sources[p.case_ref]]
            schemas[p.followup_db_ref] = apply_rename(source, p.trace.schema_rename_map, p.followup_db_ref)
        else:
            raise DatabaseError(f"unknown database {p.followup_db_ref!r} for case {p.case_ref}")
    return schemas


def detect_case(
    case,
    pairs: Sequence[QuestionPair],
    backend: Backend,
    schemas: dict[str, SchemaDescriptor],
    handles,
    config: DetectConfig,
) -> CaseResult:
    schema_pairs = [p for p in pairs if lookup(p.mr).family is Family.SCHEMA_LINKING]
    logic_pairs = [p for p in pairs if lookup(p.mr).family is Family.LOGICAL_SYNTHESIS]
    result = CaseResult(case.case_id)
    mode = config.stage_mode
    if mode is not StageMode.LOGIC_ONLY:
        result.schema = run_schema_stage(case, schema_pairs, backend, schemas, config.compare_mode)
    if mode is StageMode.SCHEMA_ONLY:
        return result
    if mode is StageMode.GATED and result.schema.detected:
        return result
    ssl = result.schema.ssl if result.schema is not None else None
    result.logic = run_logic_stage(case, logic_pairs, backend, schemas, handles, ssl, config.result_mode)
    return result


def run_detection(
    manifest: DatasetManifest,
    pairs: Sequence[QuestionPair],
    backend: Backend,
    config: DetectConfig | None = None,
    run_info: dict | None = None,
) -> Report:
    """Run both stages over every case; the report is ordered like the dataset."""
    config = config or DetectConfig()
    known = {c.case_id for c in manifest.cases}
    stray = sorted({p.case_ref for p in pairs} - known)
    if stray:
        raise ValueError(f"pairs reference unknown case {stray[0]!r}")
    by_case: dict[str, list[QuestionPair]] = {c.case_id: [] for c in manifest.cases}
    for p in pairs:
        by_case[p.case_ref].append(p)
    schemas = resolve_schemas(manifest, pairs)

    def work(case) -> CaseResult | Exception:
        handles = HandlePool(manifest.db_root, config.timeout, config.row_cap)
        try:
            return detect_case(case, by_case[case.case_id], backend, schemas, handles, config)
        except (GatewayError, DatabaseError, OSError) as exc:
            log.error("case %s aborted: %s", case.case_id, exc)
            return exc
        finally:
            handles.close()

    workers = config.workers or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=workers) as pool:
        outcomes = list(pool.map(work, manifest.cases))

    report = Report(run=dict(run_info or {}))
    errors = []
    for case, out in zip(manifest.cases, outcomes):
        if isinstance(out, Exception):
            errors.append(f"{case.case_id}: {out}")
            continue
        report.cases.append(out)
        for stage in (out.schema, out.logic):
            if stage is not None:
                errors.extend(f"{case.case_id}: {e}" for e in stage.errors)
    report.tally = tally(report.verdicts())
    report.partial = bool(errors)
    skips = [v for v in report.verdicts() if v.reason is not None]
    report.coverage = {
        "missing_fixtures": sum(v.reason == "fixture missing" for v in skips),
        "parse_failures": sum(v.reason == "generator parse failure" for v in skips),
        "errors": errors,
    }
    labels = {c.case_id: c.truth_label for c in manifest.cases}
    done = {c.case_id for c in report.cases}
    if report.cases and all(labels[cid] is not None for cid in done):
        report.confusion = confusion(report.detections(), {k: labels[k] for k in done}, config.positive_class)
        report.scores = scores(report.confusion)
        report.positive_class = config.positive_class
    return report


def run_manifest(
    manifest: DatasetManifest,
    dataset_path: Path,
    pairs_path: Path,
    backend: Backend,
    config: DetectConfig,
    mutation_meta: dict | None = None,
) -> dict:
    return {
        "tool": "sqlhd",
        "version": __version__,
        "dataset": manifest.dataset_name,
        "dataset_sha256": file_digest(dataset_path),
        "pairs_sha256": file_digest(pairs_path),
        "mutation": mutation_meta or {},
        "backend": backend.backend_id,
        "backend_deterministic": bool(getattr(backend, "deterministic", False)),
        "templates": template_versions(),
        "config": config.to_dict(),
    }
