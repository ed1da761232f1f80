"""``sqlhd`` command line: mutate, detect, evaluate, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .dataset import DatabaseError, DatasetError, load_dataset, load_mutated_dataset, persist_mutated_dataset
from .gateway import FixtureStore, GatewayError, LiveBackend, RecordingBackend, ReplayBackend
from .logic_stage import ResultMode
from .metrics import PositiveClass, confusion, dump_report, hdr_rows, parse_report, scores
from .model import mr_catalog, parse_mr_list
from .mutation import Lexicon, LexiconError
from .pipeline import DetectConfig, StageMode, run_detection, run_manifest, run_mutation
from .schema_stage import CompareMode

log = logging.getLogger("sqlhd")

EXIT_OK = 0
EXIT_FAILURE = 1

_POSITIVE = {
    "hallucination-detected": PositiveClass.HALLUCINATION_DETECTED,
    "hallucination-free": PositiveClass.HALLUCINATION_FREE,
}


def _meta_path(pairs_path: Path) -> Path:
    return pairs_path.with_name(pairs_path.name + ".meta.json")


def cmd_mutate(args: argparse.Namespace) -> int:
    manifest = load_dataset(args.dataset, args.db_root)
    lexicon = Lexicon.load(args.lexicon) if args.lexicon else Lexicon.default()
    mrs = parse_mr_list(args.mrs) if args.mrs else None
    run = run_mutation(manifest, lexicon, args.seed, mrs)
    out = Path(args.out)
    persist_mutated_dataset(run.pairs, out)
    meta = {
        "seed": args.seed,
        "lexicon": lexicon.digest(),
        "mrs": [m.value for m in mrs] if mrs else "all",
        "pairs": len(run.pairs),
    }
    _meta_path(out).write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")

    emitted = {}
    for p in run.pairs:
        emitted[p.mr] = emitted.get(p.mr, 0) + 1
    print(f"{'MR':<6} {'applicable':>10} {'emitted':>8}")
    for m in mr_catalog():
        if mrs is None or m.id in mrs:
            print(f"{m.id.value:<6} {run.applicable.get(m.id, 0):>10} {emitted.get(m.id, 0):>8}")
    print(f"total pairs: {len(run.pairs)}  variants materialized: {len(run.variants)}")
    if not run.pairs:
        log.warning("no applicable relations in %s; wrote an empty pair file", args.dataset)
    if run.rejected:
        for case_id, mr, reason in run.rejected:
            log.error("rejected %s/%s: %s", case_id, mr.value, reason)
        print(f"rejected pairs: {len(run.rejected)}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def make_backend(spec: str, record: str | None = None, max_in_flight: int = 4):
    if spec.startswith("replay:"):
        root = Path(spec.split(":", 1)[1])
        if not root.is_dir():
            raise GatewayError(f"replay directory not found: {root}")
        return ReplayBackend(root)
    if spec == "live":
        backend = LiveBackend.from_env(max_in_flight=max_in_flight)
        return RecordingBackend(backend, FixtureStore(record)) if record else backend
    raise GatewayError(f"unknown backend {spec!r} (expected replay:<dir> or live)")


def cmd_detect(args: argparse.Namespace) -> int:
    manifest = load_dataset(args.dataset, args.db_root)
    pairs_path = Path(args.pairs)
    pairs = load_mutated_dataset(pairs_path)
    if args.mrs:
        keep = set(parse_mr_list(args.mrs))
        pairs = [p for p in pairs if p.mr in keep]
    backend = make_backend(args.backend, args.record, args.max_in_flight)
    config = DetectConfig(
        stage_mode=StageMode(args.stage_mode),
        compare_mode=CompareMode(args.compare_mode),
        result_mode=ResultMode(args.result_mode),
        workers=args.workers,
        timeout=args.timeout,
        row_cap=args.row_cap,
        positive_class=_POSITIVE[args.positive_class],
    )
    meta_file = _meta_path(pairs_path)
    meta = json.loads(meta_file.read_text(encoding="utf-8")) if meta_file.is_file() else {}
    info = run_manifest(manifest, Path(args.dataset), pairs_path, backend, config, meta)
    report = run_detection(manifest, pairs, backend, config, info)
    Path(args.out).write_text(dump_report(report, "json"), encoding="utf-8")
    if not args.quiet:
        sys.stdout.write(dump_report(report, "text"))
    if report.coverage.get("missing_fixtures"):
        log.warning("%d prompt(s) had no recorded response", report.coverage["missing_fixtures"])
    if report.partial:
        log.error("report is partial: %s", "; ".join(report.coverage.get("errors", [])[:3]))
        return EXIT_FAILURE
    return EXIT_OK


def _load_labels(path: str) -> dict[str, bool | None]:
    labels = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "case_id" not in rec:
                raise DatasetError(f"{path}:{lineno}: missing case_id")
            labels[str(rec["case_id"])] = rec.get("truth_label")
    return labels


def cmd_evaluate(args: argparse.Namespace) -> int:
    report = parse_report(Path(args.report).read_text(encoding="utf-8"))
    labels = _load_labels(args.labels)
    detections = report.detections()
    for case_id in detections:
        if labels.get(case_id) is None:
            raise DatasetError(f"no truth label for case {case_id!r}")
    extra = sorted(set(labels) - set(detections))
    if extra:
        raise DatasetError(f"labels name case {extra[0]!r} which is not in the report")
    positive = _POSITIVE[args.positive_class]
    report.confusion = confusion(detections, labels, positive)
    report.scores = scores(report.confusion)
    report.positive_class = positive
    cm, s = report.confusion, report.scores
    print(f"positive class: {positive.value}")
    print(f"TP={cm.tp} FP={cm.fp} FN={cm.fn} TN={cm.tn}")
    print(f"accuracy  {s.accuracy:.4f}")
    print(f"precision {s.precision:.4f}{'' if s.precision_defined else ' (undefined)'}")
    print(f"recall    {s.recall:.4f}{'' if s.recall_defined else ' (undefined)'}")
    print(f"f1        {s.f1:.4f}")
    print(f"\n{'level':<9} {'name':<16} {'HDN':>6} {'HDR':>7}")
    for level, name, n, r in hdr_rows(report.tally):
        print(f"{level:<9} {name:<16} {n:>6} {r:>7}")
    if args.out:
        Path(args.out).write_text(dump_report(report, "json"), encoding="utf-8")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    report = parse_report(Path(args.report).read_text(encoding="utf-8"))
    sys.stdout.write(dump_report(report, args.format))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sqlhd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mutate", help="generate validated follow-up questions")
    p.add_argument("--dataset", required=True)
    p.add_argument("--db-root", help="directory holding <db_ref>/<db_ref>.sqlite (default: ./database next to the dataset)")
    p.add_argument("--lexicon", help="lexicon YAML (default: bundled en-default)")
    p.add_argument("--mrs", help="comma separated relation filter, e.g. AROE,CRE")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mutate)

    p = sub.add_parser("detect", help="run the detection stages")
    p.add_argument("--dataset", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--db-root")
    p.add_argument("--backend", required=True, help="replay:<dir> or live")
    p.add_argument("--record", help="with --backend live: store responses in this fixture directory")
    p.add_argument("--mrs", help="only judge these relations")
    p.add_argument("--stage-mode", choices=[m.value for m in StageMode], default=StageMode.GATED.value)
    p.add_argument("--compare-mode", choices=[m.value for m in CompareMode], default=CompareMode.STRICT.value)
    p.add_argument("--result-mode", choices=[m.value for m in ResultMode], default=ResultMode.MULTISET.value)
    p.add_argument("--positive-class", choices=sorted(_POSITIVE), default="hallucination-detected")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--max-in-flight", type=int, default=4)
    p.add_argument("--timeout", type=float, default=5.0, help="statement timeout in seconds")
    p.add_argument("--row-cap", type=int, default=10_000)
    p.add_argument("--out", required=True)
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="score a report against truth labels")
    p.add_argument("--report", required=True)
    p.add_argument("--labels", required=True, help="JSON-lines with case_id and truth_label")
    p.add_argument("--positive-class", choices=sorted(_POSITIVE), default="hallucination-detected")
    p.add_argument("--out", help="write the scored report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="re-render a JSON report")
    p.add_argument("--report", required=True)
    p.add_argument("--format", choices=["text", "json"], default="text")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DatasetError, DatabaseError, GatewayError, LexiconError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"sqlhd: error: {msg}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    raise SystemExit(main())
