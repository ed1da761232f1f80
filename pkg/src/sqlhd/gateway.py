"""Access to the Text-to-SQL generator under test.

Two request kinds exist: a schema-linking request (stage 1) and an SQL request
(stage 2). Every request is rendered from a versioned template and keyed by the
SHA-256 of its prompt text, which is what the replay backend looks up.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from string import Template
from typing import Protocol

import httpx

from .model import SchemaDescriptor, SchemaLinking, SqlArtifact, Stage

LINKING_TEMPLATE = "linking-v1"
SQL_TEMPLATE = "sql-v1"
REPAIR_SUFFIX = "\n\nRespond only in the required format."

ENV_API_BASE = "SQLHD_API_BASE"
ENV_MODEL = "SQLHD_MODEL"
ENV_API_KEY = "SQLHD_API_KEY"


class GatewayError(Exception):
    pass


class BackendUnavailable(GatewayError):
    pass


class FixtureMissing(GatewayError):
    def __init__(self, digest: str) -> None:
        super().__init__(f"no recorded response for prompt {digest}")
        self.digest = digest


class FixtureConflict(GatewayError):
    pass


class UnparseableResponse(GatewayError):
    def __init__(self, message: str, raw_text: str) -> None:
        super().__init__(message)
        self.raw_text = raw_text


class RequestKind(str, enum.Enum):
    LINKING = "LinkingRequest"
    SQL = "SqlRequest"


def digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class GeneratorRequest:
    kind: RequestKind
    question: str
    schema_text: str
    prompt_text: str
    linking: SchemaLinking | None = None

    @property
    def prompt_digest(self) -> str:
        return digest(self.prompt_text)

    def repaired(self) -> "GeneratorRequest":
        return GeneratorRequest(self.kind, self.question, self.schema_text,
                                self.prompt_text + REPAIR_SUFFIX, self.linking)


@dataclass(frozen=True)
class GeneratorResponse:
    raw_text: str
    parsed: SchemaLinking | SqlArtifact
    backend_id: str
    deterministic: bool
    prompt_digest: str


# --------------------------------------------------------------------------
# prompt rendering


@lru_cache(maxsize=None)
def _template(name: str) -> Template:
    ref = resources.files("sqlhd") / "prompts" / f"{name}.txt"
    return Template(ref.read_text(encoding="utf-8"))


def template_versions() -> dict[str, str]:
    return {name: digest(_template(name).template)[:12] for name in (LINKING_TEMPLATE, SQL_TEMPLATE)}


def render_schema(schema: SchemaDescriptor) -> str:
    lines = []
    for t in schema.tables:
        cols = ", ".join(f"{c.name} {c.declared_type}".rstrip() for c in t.columns)
        lines.append(f"Table {t.name} ({cols})")
    if schema.primary_keys:
        lines.append("Primary keys: " + ", ".join(f"{t}.{c}" for t, c in schema.primary_keys))
    if schema.foreign_keys:
        lines.append("Foreign keys: " + ", ".join(str(fk) for fk in schema.foreign_keys))
    return "\n".join(lines)


def _evidence_block(evidence: str | None) -> str:
    return f"Evidence: {evidence.strip()}\n" if evidence and evidence.strip() else ""


def linking_request(question: str, schema: SchemaDescriptor, evidence: str | None = None) -> GeneratorRequest:
    schema_text = render_schema(schema)
    prompt = _template(LINKING_TEMPLATE).substitute(
        schema=schema_text, question=question.strip(), evidence=_evidence_block(evidence)
    )
    return GeneratorRequest(RequestKind.LINKING, question, schema_text, prompt)


def sql_request(
    question: str, schema: SchemaDescriptor, linking: SchemaLinking, evidence: str | None = None
) -> GeneratorRequest:
    schema_text = render_schema(schema)
    prompt = _template(SQL_TEMPLATE).substitute(
        schema=schema_text,
        question=question.strip(),
        evidence=_evidence_block(evidence),
        linking=json.dumps(linking.to_dict(), sort_keys=True),
    )
    return GeneratorRequest(RequestKind.SQL, question, schema_text, prompt, linking)


# --------------------------------------------------------------------------
# response parsing

_FENCE_RX = re.compile(r"```[ \t]*([A-Za-z0-9_-]*)[ \t]*\n(.*?)```", re.DOTALL)


def parse_linking(raw: str) -> SchemaLinking:
    text = raw.strip()
    fence = _FENCE_RX.search(text)
    if fence:
        text = fence.group(2).strip()
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end < start:
        raise UnparseableResponse("no JSON object in linking response", raw)
    try:
        data = json.loads(text[start:end + 1])
    except json.JSONDecodeError as exc:
        raise UnparseableResponse(f"invalid JSON in linking response: {exc.msg}", raw) from None
    if not isinstance(data, dict) or not isinstance(data.get("tables"), list) or not isinstance(
        data.get("columns"), list
    ):
        raise UnparseableResponse("linking object needs 'tables' and 'columns' lists", raw)
    if not isinstance(data.get("joins", []), list):
        raise UnparseableResponse("'joins' must be a list", raw)
    try:
        if not all(isinstance(t, str) for t in data["tables"]):
            raise ValueError("table names must be strings")
        return SchemaLinking.from_dict(data)
    except (ValueError, TypeError, IndexError) as exc:
        raise UnparseableResponse(f"malformed linking: {exc}", raw) from None


def _first_statement(sql: str) -> str:
    quote = None
    i = 0
    while i < len(sql):
        ch = sql[i]
        if quote:
            if ch == quote:
                quote = None
        elif ch in ("'", '"', "`"):
            quote = ch
        elif ch == "-" and sql.startswith("--", i):
            nl = sql.find("\n", i)
            i = len(sql) if nl < 0 else nl
            continue
        elif ch == ";":
            return sql[:i + 1]
        i += 1
    return sql


def parse_sql(raw: str) -> str:
    fence = _FENCE_RX.search(raw)
    body = fence.group(2) if fence else raw
    sql = _first_statement(body.strip()).strip()
    if not sql:
        raise UnparseableResponse("empty SQL response", raw)
    if not re.match(r"\(?\s*(SELECT|WITH)\b", sql, re.IGNORECASE):
        raise UnparseableResponse("response is not a SELECT statement", raw)
    return sql


# --------------------------------------------------------------------------
# fixture store and backends


class FixtureStore:
    """Directory of ``<prompt_digest>.txt`` files; write-once per digest."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self._lock = threading.Lock()

    def path(self, prompt_digest: str) -> Path:
        return self.root / f"{prompt_digest}.txt"

    def get(self, prompt_digest: str) -> str | None:
        p = self.path(prompt_digest)
        return p.read_bytes().decode("utf-8") if p.is_file() else None

    def put(self, prompt_digest: str, raw: str) -> None:
        with self._lock:
            existing = self.get(prompt_digest)
            if existing is not None:
                if existing != raw:
                    raise FixtureConflict(f"fixture conflict for {prompt_digest}")
                return
            try:
                self.root.mkdir(parents=True, exist_ok=True)
                tmp = self.path(prompt_digest).with_suffix(".tmp")
                tmp.write_bytes(raw.encode("utf-8"))
                tmp.replace(self.path(prompt_digest))
            except OSError as exc:
                raise GatewayError(f"fixture store unwritable: {exc}") from None


def record_fixture(request: GeneratorRequest, raw_response: str, store: FixtureStore) -> None:
    store.put(request.prompt_digest, raw_response)


class Backend(Protocol):
    backend_id: str

    def complete(self, request: GeneratorRequest) -> tuple[str, bool]:
        """Return (raw text, deterministic)."""


class ReplayBackend:
    """Serves recorded responses; a pure function of the prompt digest."""

    deterministic = True

    def __init__(self, root: str | Path) -> None:
        self.store = FixtureStore(root)
        self.backend_id = f"replay:{Path(root).name}"
        self.access_log: list[str] = []
        self.missing: list[str] = []
        self._lock = threading.Lock()

    def complete(self, request: GeneratorRequest) -> tuple[str, bool]:
        d = request.prompt_digest
        raw = self.store.get(d)
        with self._lock:
            self.access_log.append(d)
            if raw is None:
                self.missing.append(d)
        if raw is None:
            raise FixtureMissing(d)
        return raw, True


class RecordingBackend:
    """Consults a fixture store first and records anything the inner backend says."""

    def __init__(self, inner: Backend, store: FixtureStore) -> None:
        self.inner = inner
        self.store = store
        self.deterministic = getattr(inner, "deterministic", False)
        self.backend_id = f"{inner.backend_id}+record"

    def complete(self, request: GeneratorRequest) -> tuple[str, bool]:
        raw = self.store.get(request.prompt_digest)
        if raw is not None:
            return raw, True
        raw, deterministic = self.inner.complete(request)
        record_fixture(request, raw, self.store)
        return raw, deterministic


class TokenBucket:
    def __init__(self, rate: float, capacity: int) -> None:
        self.rate = rate
        self.capacity = capacity
        self._tokens = float(capacity)
        self._stamp = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(self.capacity, self._tokens + (now - self._stamp) * self.rate)
                self._stamp = now
                if self._tokens >= 1:
                    self._tokens -= 1
                    return
                wait = (1 - self._tokens) / self.rate
            time.sleep(wait)


class LiveBackend:
    """OpenAI-compatible chat-completions endpoint, temperature 0, one sample."""

    deterministic = False

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str = "",
        max_in_flight: int = 4,
        requests_per_second: float = 4.0,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.backend_id = f"live:{model}"
        self._headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._bucket = TokenBucket(requests_per_second, max(1, max_in_flight))
        self._client = httpx.Client(timeout=timeout, transport=transport)

    @classmethod
    def from_env(cls, **kwargs) -> "LiveBackend":
        base, model = os.environ.get(ENV_API_BASE), os.environ.get(ENV_MODEL)
        if not base or not model:
            raise BackendUnavailable(f"live backend needs {ENV_API_BASE} and {ENV_MODEL}")
        return cls(base, model, os.environ.get(ENV_API_KEY, ""), **kwargs)

    def complete(self, request: GeneratorRequest) -> tuple[str, bool]:
        payload = {
            "model": self.model,
            "temperature": 0,
            "n": 1,
            "messages": [{"role": "user", "content": request.prompt_text}],
        }
        self._bucket.acquire()
        with self._slots:
            try:
                resp = self._client.post(f"{self.base_url}/chat/completions", json=payload, headers=self._headers)
                resp.raise_for_status()
                content = resp.json()["choices"][0]["message"]["content"]
            except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                raise BackendUnavailable(f"{self.backend_id}: {exc}") from None
        return content or "", False


# --------------------------------------------------------------------------
# generation


def _generate(request: GeneratorRequest, backend: Backend, parse) -> tuple[str, object, bool, str]:
    raw, deterministic = backend.complete(request)
    try:
        return raw, parse(raw), deterministic, request.prompt_digest
    except UnparseableResponse as first:
        retry = request.repaired()
        try:
            raw2, det2 = backend.complete(retry)
        except FixtureMissing:
            raise first from None
        try:
            return raw2, parse(raw2), det2, retry.prompt_digest
        except UnparseableResponse as second:
            raise UnparseableResponse(f"{second} (after repair retry)", raw2) from None


def request_schema_linking(
    question: str, schema: SchemaDescriptor, backend: Backend, evidence: str | None = None
) -> GeneratorResponse:
    raw, parsed, det, d = _generate(linking_request(question, schema, evidence), backend, parse_linking)
    return GeneratorResponse(raw, parsed, backend.backend_id, det, d)


def request_sql(
    question: str,
    schema: SchemaDescriptor,
    linking: SchemaLinking,
    backend: Backend,
    stage: Stage = Stage.SOURCE,
    evidence: str | None = None,
) -> GeneratorResponse:
    req = sql_request(question, schema, linking, evidence)
    raw, sql, det, d = _generate(req, backend, parse_sql)
    return GeneratorResponse(raw, SqlArtifact(sql, stage, d), backend.backend_id, det, d)


def generate_schema_linking(
    question: str, schema: SchemaDescriptor, backend: Backend, evidence: str | None = None
) -> SchemaLinking:
    return request_schema_linking(question, schema, backend, evidence).parsed


def generate_sql(
    question: str,
    schema: SchemaDescriptor,
    linking: SchemaLinking,
    backend: Backend,
    stage: Stage = Stage.SOURCE,
    evidence: str | None = None,
) -> SqlArtifact:
    return request_sql(question, schema, linking, backend, stage, evidence).parsed
