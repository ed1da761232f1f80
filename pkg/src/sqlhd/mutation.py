"""Lexicon-driven follow-up question generation and pair validation."""

from __future__ import annotations

import hashlib
import json
import random
import re
import string
from dataclasses import dataclass, field, fields
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping

import yaml

from .model import (
    REMOVAL_MRS,
    SCHEMA_VARIANT_MRS,
    SUBSTITUTION_MRS,
    Column,
    ForeignKey,
    MRId,
    MutationTrace,
    QuestionPair,
    SchemaDescriptor,
    SourceCase,
    Table,
    mr_order,
)

# used when a lexicon ships no prefixes / fillers, so PI and SC stay applicable
DEFAULT_PREFIXES = ("Show me", "Tell me")
DEFAULT_FILLERS = ("Thanks in advance.",)
_TERMINAL_PUNCT = "?.!"


class NotApplicable(Exception):
    """The relation has no trigger fragment in the question."""


class LexiconError(ValueError):
    pass


class ValidationFailure(Exception):
    def __init__(self, reason: str, detail: str = "") -> None:
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


def _norm_phrase(text: str) -> str:
    return " ".join(text.lower().split())


def _phrase_map(raw: Mapping | None) -> dict[str, tuple[str, ...]]:
    out = {}
    for key, values in (raw or {}).items():
        if isinstance(values, str):
            values = [values]
        out[_norm_phrase(str(key))] = tuple(str(v).strip() for v in values or ())
    return out


@dataclass(frozen=True)
class Lexicon:
    comparative_synonyms: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    comparative_antonyms: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    comparative_expanders: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    comparative_reducers: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    extrema_synonyms: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    extrema_antonyms: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    entity_synonyms: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    entity_non_synonyms: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    prefixes: tuple[str, ...] = ()
    filler_phrases: tuple[str, ...] = ()
    irrelevant_words: tuple[str, ...] = ()
    conditional_cues: tuple[str, ...] = ()
    equality_phrases: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for name in ("comparative_antonyms", "entity_non_synonyms",
                     "comparative_expanders", "comparative_reducers"):
            for key, values in getattr(self, name).items():
                if key in (_norm_phrase(v) for v in values):
                    raise LexiconError(f"{name}: {key!r} maps to itself")
        for key, values in self.comparative_expanders.items():
            for v in values:
                back = self.comparative_reducers.get(_norm_phrase(v))
                if back is not None and key not in (_norm_phrase(b) for b in back):
                    raise LexiconError(
                        f"expander {key!r} -> {v!r} has no inverse reducer {v!r} -> {key!r}"
                    )

    @classmethod
    def from_dict(cls, data: Mapping) -> "Lexicon":
        kwargs = {}
        for f in fields(cls):
            raw = data.get(f.name)
            if f.name.startswith(("comparative_", "extrema_", "entity_")):
                kwargs[f.name] = _phrase_map(raw)
            else:
                kwargs[f.name] = tuple(str(x).strip() for x in raw or ())
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise LexiconError(f"unknown lexicon sections: {sorted(unknown)}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "Lexicon":
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise LexiconError(f"{path}: expected a mapping of sections")
        return cls.from_dict(data)

    @classmethod
    def default(cls) -> "Lexicon":
        return _default_lexicon()

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = {k: list(v) for k, v in value.items()} if isinstance(value, Mapping) else list(value)
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def map_for(self, mr: MRId) -> Mapping[str, tuple[str, ...]]:
        return {
            MRId.SROCW: self.comparative_synonyms,
            MRId.CRU: self.comparative_synonyms,
            MRId.AROCW: self.comparative_antonyms,
            MRId.CRE: self.comparative_expanders,
            MRId.CWR: self.comparative_reducers,
            MRId.ESR: self.entity_synonyms,
            MRId.ENSR: self.entity_non_synonyms,
            MRId.SROE: self.extrema_synonyms,
            MRId.AROE: self.extrema_antonyms,
        }[mr]

    def comparative_keys(self) -> set[str]:
        keys: set[str] = set()
        for m in (self.comparative_synonyms, self.comparative_antonyms,
                  self.comparative_expanders, self.comparative_reducers):
            keys.update(m)
        return keys

    def effective_prefixes(self) -> tuple[str, ...]:
        return self.prefixes or DEFAULT_PREFIXES

    def effective_fillers(self) -> tuple[str, ...]:
        return self.filler_phrases or DEFAULT_FILLERS


@lru_cache(maxsize=1)
def _default_lexicon() -> Lexicon:
    ref = resources.files("sqlhd") / "lexicons" / "en-default.yaml"
    return Lexicon.from_dict(yaml.safe_load(ref.read_text(encoding="utf-8")))


# --------------------------------------------------------------------------
# matching helpers


@lru_cache(maxsize=256)
def _phrase_regex(phrases: tuple[str, ...]) -> re.Pattern | None:
    if not phrases:
        return None
    alts = sorted(set(phrases), key=lambda p: (-len(p), p))
    body = "|".join(r"\s+".join(re.escape(w) for w in p.split()) for p in alts)
    return re.compile(rf"(?<!\w)(?:{body})(?!\w)", re.IGNORECASE)


def _find_leftmost(text: str, phrases) -> re.Match | None:
    rx = _phrase_regex(tuple(sorted(_norm_phrase(p) for p in phrases)))
    return rx.search(text) if rx else None


def _occurs(text: str, phrase: str) -> bool:
    return _find_leftmost(text, [phrase]) is not None


def _match_case(original: str, replacement: str) -> str:
    if original[:1].isupper() and replacement:
        return replacement[0].upper() + replacement[1:]
    return replacement


def _leading_prefix(question: str, prefixes) -> re.Match | None:
    m = _find_leftmost(question, prefixes)
    if m and m.start() == 0 and question[m.end():m.end() + 1].isspace():
        return m
    return None


def _decapitalize(question: str) -> bool:
    word = re.match(r"[A-Za-z]+", question)
    if not word:
        return False
    w = word.group(0)
    return w != "I" and w[0].isupper() and w[1:] == w[1:].lower()


def _schema_terms(schema: SchemaDescriptor | None) -> set[str]:
    terms: set[str] = set()
    if schema is None:
        return terms
    for t in schema.tables:
        for name in [t.name, *t.column_names()]:
            low = name.lower()
            terms.add(low)
            terms.update(p for p in re.split(r"[^a-z0-9]+", low) if len(p) > 2)
    return terms


@dataclass(frozen=True)
class _Plan:
    start: int
    end: int
    original: str
    candidates: tuple[str | None, ...]


def _substitution_plan(question: str, mapping: Mapping[str, tuple[str, ...]]) -> _Plan | None:
    m = _find_leftmost(question, mapping.keys())
    if m is None:
        return None
    original = m.group(0)
    key = _norm_phrase(original)
    candidates = tuple(
        _match_case(original, c)
        for c in mapping[key]
        if _norm_phrase(c) != key and not _occurs(question, c)
    )
    if not mapping[key]:
        raise LexiconError(f"lexicon key {key!r} has no candidates")
    if not candidates:
        return None
    return _Plan(m.start(), m.end(), original, candidates)


def _clause_end(question: str, pos: int) -> int:
    m = re.compile(r"[,;?.!]").search(question, pos)
    end = m.start() if m else len(question)
    while end > pos and question[end - 1].isspace():
        end -= 1
    return end


def _conditional_plan(question: str, lexicon: Lexicon) -> _Plan | None:
    cue_rx = _phrase_regex(tuple(sorted(_norm_phrase(c) for c in lexicon.conditional_cues)))
    if cue_rx is None:
        return None
    triggers = tuple(lexicon.comparative_keys() | {_norm_phrase(p) for p in lexicon.equality_phrases})
    for cue in cue_rx.finditer(question):
        if cue.start() == 0:
            continue
        end = _clause_end(question, cue.end())
        clause = question[cue.start():end]
        if not triggers or _find_leftmost(clause[len(cue.group(0)):], triggers) is None:
            continue
        start = cue.start()
        while start > 0 and question[start - 1].isspace():
            start -= 1
        rest = (question[:start] + question[end:]).strip()
        if not rest or not re.search(r"\w", rest):
            continue
        return _Plan(start, end, question[start:end], (None,))
    return None


def _simplification_plan(question: str, lexicon: Lexicon) -> _Plan | None:
    m = _find_leftmost(question, lexicon.irrelevant_words) if lexicon.irrelevant_words else None
    if m is not None:
        start, end = m.start(), m.end()
        if end < len(question) and question[end].isspace():
            while end < len(question) and question[end].isspace():
                end += 1
        else:
            while start > 0 and question[start - 1].isspace():
                start -= 1
        rest = question[:start] + question[end:]
        if re.search(r"\w", rest):
            return _Plan(start, end, question[start:end], (None,))
    stripped = question.rstrip()
    if stripped and stripped[-1] in _TERMINAL_PUNCT and re.search(r"\w", stripped[:-1]):
        return _Plan(len(stripped) - 1, len(question), question[len(stripped) - 1:], (None,))
    return None


def _plan(question: str, mr: MRId, lexicon: Lexicon, schema: SchemaDescriptor | None) -> _Plan | None:
    if mr in SUBSTITUTION_MRS and mr is not MRId.PS:
        return _substitution_plan(question, lexicon.map_for(mr))
    if mr in (MRId.PR, MRId.PS):
        m = _leading_prefix(question, lexicon.prefixes)
        if m is None:
            return None
        if mr is MRId.PR:
            end = m.end()
            while end < len(question) and question[end].isspace():
                end += 1
            return _Plan(0, end, question[:end], (None,))
        key = _norm_phrase(m.group(0))
        candidates = tuple(
            _match_case(m.group(0), p) for p in lexicon.prefixes
            if _norm_phrase(p) != key and not _occurs(question, p)
        )
        return _Plan(0, m.end(), m.group(0), candidates) if candidates else None
    if mr is MRId.PI:
        current = _leading_prefix(question, lexicon.effective_prefixes())
        prefixes = [
            p for p in lexicon.effective_prefixes()
            if current is None or _norm_phrase(p) != _norm_phrase(current.group(0))
        ]
        if not prefixes:
            return None
        if _decapitalize(question):
            return _Plan(0, 1, question[0], tuple(f"{p} {question[0].lower()}" for p in prefixes))
        return _Plan(0, 0, "", tuple(f"{p} " for p in prefixes))
    if mr is MRId.RC:
        return _conditional_plan(question, lexicon)
    if mr is MRId.OS:
        return _simplification_plan(question, lexicon)
    if mr is MRId.SC:
        terms = _schema_terms(schema)
        fillers = tuple(
            " " + f for f in lexicon.effective_fillers()
            if not (set(re.findall(r"[a-z0-9]+", f.lower())) & terms) and not _occurs(question, f)
        )
        n = len(question)
        return _Plan(n, n, "", fillers) if fillers else None
    raise AssertionError(mr)


def applicable_relations(question: str, schema: SchemaDescriptor | None, lexicon: Lexicon) -> set[MRId]:
    """Relations whose trigger fragment is present in ``question``."""
    out = set()
    for mr in MRId:
        if mr in SCHEMA_VARIANT_MRS:
            if schema is None or schema.tables:
                out.add(mr)
        elif _plan(question, mr, lexicon, schema) is not None:
            out.add(mr)
    return out


def _rng(*parts) -> random.Random:
    # str seeds hash through sha512, so this is stable across processes
    return random.Random("|".join(str(p) for p in parts))


def mutate(case: SourceCase, mr: MRId | str, lexicon: Lexicon, schema: SchemaDescriptor, seed: int) -> QuestionPair:
    """Derive the follow-up question for one relation.

    The leftmost trigger fragment is mutated; the replacement is a seeded
    uniform pick among the lexicon candidates. Schema relations keep the
    question and point at a renamed database variant.
    """
    mr = MRId(mr)
    question = case.question
    if mr in SCHEMA_VARIANT_MRS:
        if not schema.tables:
            raise NotApplicable(f"{mr}: schema {schema.db_ref} has no tables")
        variant, rename_map = derive_schema_variant(schema, mr, seed)
        trace = MutationTrace("", None, (0, 0), dict(rename_map))
        return QuestionPair(case.case_id, mr, question, question, trace, variant.db_ref)
    plan = _plan(question, mr, lexicon, schema)
    if plan is None:
        raise NotApplicable(f"{mr} does not apply to case {case.case_id}")
    replacement = _rng(seed, case.case_id, mr.value).choice(plan.candidates)
    trace = MutationTrace(plan.original, replacement, (plan.start, plan.end))
    return QuestionPair(case.case_id, mr, question, trace.apply(question), trace, case.db_ref)


# --------------------------------------------------------------------------
# schema variants


def _fresh_name(base: str, rng: random.Random, taken: set[str]) -> str:
    while True:
        name = f"{base}_{''.join(rng.choice(string.ascii_lowercase) for _ in range(3))}"
        if name.lower() not in taken:
            taken.add(name.lower())
            return name


def variant_db_ref(db_ref: str, mr: MRId, rename_map: Mapping[str, str]) -> str:
    blob = json.dumps(sorted(rename_map.items())).encode()
    return f"{db_ref}__{mr.value.lower()}_{hashlib.sha1(blob).hexdigest()[:8]}"


def derive_schema_variant(
    schema: SchemaDescriptor, mr: MRId | str, seed: int
) -> tuple[SchemaDescriptor, dict[str, str]]:
    """Rename tables (DSR: a seeded non-empty subset) or everything (DR).

    Map keys are original table names and ``table.column`` references; values
    are the new bare names.
    """
    mr = MRId(mr)
    if mr not in SCHEMA_VARIANT_MRS:
        raise ValueError(f"{mr} does not derive schema variants")
    if not schema.tables:
        raise ValueError(f"schema {schema.db_ref} has no tables")
    rng = _rng(seed, schema.db_ref, mr.value)
    taken = {t.name.lower() for t in schema.tables}
    taken.update(c.lower() for t in schema.tables for c in t.column_names())
    rename: dict[str, str] = {}
    names = schema.table_names()
    if mr is MRId.DSR:
        k = rng.randint(1, len(names))
        chosen = set(rng.sample(names, k))
        for name in names:
            if name in chosen:
                rename[name] = _fresh_name(name, rng, taken)
    else:
        for t in schema.tables:
            rename[t.name] = _fresh_name(t.name, rng, taken)
            for c in t.column_names():
                rename[f"{t.name}.{c}"] = _fresh_name(c, rng, taken)
    variant = apply_rename(schema, rename, variant_db_ref(schema.db_ref, mr, rename))
    return variant, rename


def apply_rename(schema: SchemaDescriptor, rename_map: Mapping[str, str], db_ref: str | None = None) -> SchemaDescriptor:
    def tname(t: str) -> str:
        return rename_map.get(t, t)

    def cname(t: str, c: str) -> str:
        return rename_map.get(f"{t}.{c}", c)

    tables = tuple(
        Table(tname(t.name), tuple(Column(cname(t.name, c.name), c.declared_type) for c in t.columns))
        for t in schema.tables
    )
    pks = tuple((tname(t), cname(t, c)) for t, c in schema.primary_keys)
    fks = tuple(
        ForeignKey(tname(fk.table), cname(fk.table, fk.column), tname(fk.ref_table), cname(fk.ref_table, fk.ref_column))
        for fk in schema.foreign_keys
    )
    return SchemaDescriptor(db_ref or schema.db_ref, tables, pks, fks)


def invert_rename_map(rename_map: Mapping[str, str]) -> dict[str, str]:
    inverse = {}
    for old, new in rename_map.items():
        if "." in old:
            table, col = old.split(".", 1)
            inverse[f"{rename_map.get(table, table)}.{new}"] = col
        else:
            inverse[new] = old
    if len(inverse) != len(rename_map):
        raise ValueError("rename map is not injective")
    return inverse


# --------------------------------------------------------------------------
# validation


def validate_pair(pair: QuestionPair, lexicon: Lexicon, schema: SchemaDescriptor | None = None) -> QuestionPair:
    """Re-check a pair against its relation's contract; returns it unchanged.

    Raises :class:`ValidationFailure` whose ``reason`` is a stable code.
    """
    sq, fuq, tr, mr = pair.source_question, pair.followup_question, pair.trace, MRId(pair.mr)
    if not sq.strip() or not fuq.strip():
        raise ValidationFailure("empty question")
    start, end = tr.char_span
    if not (0 <= start <= end <= len(sq)) or sq[start:end] != tr.fragment_original:
        raise ValidationFailure("span mismatch", f"{tr.char_span} does not address {tr.fragment_original!r}")
    if mr in SCHEMA_VARIANT_MRS:
        if not tr.schema_rename_map:
            raise ValidationFailure("rename map missing")
        if fuq != sq:
            raise ValidationFailure("question changed", "schema relations keep the question")
        try:
            invert_rename_map(tr.schema_rename_map)
        except ValueError:
            raise ValidationFailure("rename map not injective") from None
        if schema is not None:
            _check_rename_coverage(mr, tr.schema_rename_map, schema)
        return pair
    if tr.schema_rename_map:
        raise ValidationFailure("unexpected rename map")
    if mr is MRId.PI:
        _check_prefix_insertion(sq, fuq, lexicon)
    if tr.apply(sq) != fuq:
        raise ValidationFailure("non-local edit", "follow-up differs from the traced edit")
    if fuq == sq:
        raise ValidationFailure("no-op")

    if mr in SUBSTITUTION_MRS:
        if tr.fragment_replacement is None:
            raise ValidationFailure("missing replacement")
        if mr is MRId.PS:
            if start != 0 or _leading_prefix(sq, lexicon.prefixes) is None:
                raise ValidationFailure("unknown fragment", "PS needs a leading prefix")
            table = {_norm_phrase(tr.fragment_original): tuple(lexicon.prefixes)}
        else:
            table = lexicon.map_for(mr)
        key = _norm_phrase(tr.fragment_original)
        if key not in table or _find_leftmost(tr.fragment_original, [key]) is None:
            raise ValidationFailure("unknown fragment", repr(tr.fragment_original))
        if _norm_phrase(tr.fragment_replacement) not in {_norm_phrase(c) for c in table[key]}:
            raise ValidationFailure("replacement not a candidate", repr(tr.fragment_replacement))
        if _norm_phrase(tr.fragment_replacement) == key:
            raise ValidationFailure("no-op")
        if _occurs(sq, tr.fragment_replacement):
            raise ValidationFailure("ambiguous replacement", f"{tr.fragment_replacement!r} already in question")
    elif mr in REMOVAL_MRS:
        if tr.fragment_replacement:
            raise ValidationFailure("unexpected replacement")
        if mr is MRId.PR:
            m = _leading_prefix(sq, lexicon.prefixes)
            if start != 0 or m is None or tr.fragment_original.strip().lower() != m.group(0).lower():
                raise ValidationFailure("unknown fragment", "PR removes a leading prefix")
        elif mr is MRId.OS:
            frag = tr.fragment_original.strip()
            if _norm_phrase(frag) not in {_norm_phrase(w) for w in lexicon.irrelevant_words} and not (
                frag and frag in _TERMINAL_PUNCT
            ):
                raise ValidationFailure("unknown fragment", repr(frag))
        elif mr is MRId.RC:
            cue = _find_leftmost(tr.fragment_original, lexicon.conditional_cues) if lexicon.conditional_cues else None
            if cue is None or tr.fragment_original[:cue.start()].strip():
                raise ValidationFailure("unknown fragment", "RC removes a cue-word clause")
    elif mr is MRId.SC:
        filler = (tr.fragment_replacement or "").strip()
        if start != len(sq) or filler not in lexicon.effective_fillers():
            raise ValidationFailure("unknown fragment", "SC appends a filler phrase")
        if schema is not None and set(re.findall(r"[a-z0-9]+", filler.lower())) & _schema_terms(schema):
            raise ValidationFailure("filler mentions schema")
    return pair


def _check_prefix_insertion(sq: str, fuq: str, lexicon: Lexicon) -> None:
    # FUQ = prefix + " " + SQ, where SQ's first letter may have been lowercased
    offset = len(fuq) - len(sq)
    if offset <= 0 or fuq[offset + 1:] != sq[1:] or fuq[offset:offset + 1].lower() != sq[:1].lower():
        raise ValidationFailure("prefix insertion broken", "follow-up must end with the source question")
    head = fuq[:offset].rstrip()
    if _norm_phrase(head) not in {_norm_phrase(p) for p in lexicon.effective_prefixes()}:
        raise ValidationFailure("unknown fragment", f"{head!r} is not a known prefix")


def _check_rename_coverage(mr: MRId, rename_map: Mapping[str, str], schema: SchemaDescriptor) -> None:
    tables = schema.table_names()
    renamed = [t for t in tables if t in rename_map]
    if not renamed:
        raise ValidationFailure("rename map missing", "at least one table must be renamed")
    if mr is MRId.DR:
        missing = [t for t in tables if t not in rename_map]
        missing += [f"{t.name}.{c}" for t in schema.tables for c in t.column_names() if f"{t.name}.{c}" not in rename_map]
        if missing:
            raise ValidationFailure("partial replacement", f"DR leaves {missing[:3]} unchanged")
    originals = {t.lower() for t in tables} | {c.lower() for t in schema.tables for c in t.column_names()}
    clashes = [v for v in rename_map.values() if v.lower() in originals]
    if clashes:
        raise ValidationFailure("stale name", f"{clashes[0]!r} exists in the original schema")


def generate_pairs(
    case: SourceCase,
    lexicon: Lexicon,
    schema: SchemaDescriptor,
    seed: int,
    mrs=None,
) -> list[QuestionPair]:
    """Mutate and validate every applicable relation (optionally filtered)."""
    wanted = set(MRId) if mrs is None else {MRId(m) for m in mrs}
    applicable = applicable_relations(case.question, schema, lexicon) & wanted
    pairs = []
    for mr in sorted(applicable, key=mr_order):
        pairs.append(validate_pair(mutate(case, mr, lexicon, schema, seed), lexicon, schema))
    return pairs
