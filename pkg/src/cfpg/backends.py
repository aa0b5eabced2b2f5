"""Chat-completion backends: scripted playback, OpenAI-compatible HTTP, disk cache.

Every backend exposes ``identity`` (what produced a response), ``decoding``
(default sampling settings for requests built against it) and
``complete(request) -> str``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Mapping, Sequence

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")


class BackendError(RuntimeError):
    pass


class TransportError(BackendError):
    """Network or auth failure that survived the retry budget."""


class FixtureError(BackendError):
    def __init__(self, fingerprint: str, message: str | None = None):
        self.fingerprint = fingerprint
        super().__init__(message or f"no scripted fixture for request fingerprint {fingerprint}")


class TruncatedOutputError(BackendError):
    pass


class JudgeParseError(BackendError):
    def __init__(self, message: str, raw: str = ""):
        self.raw = raw
        super().__init__(message)


# --- requests ---------------------------------------------------------------


@dataclass(frozen=True)
class Decoding:
    temperature: float = 0.0
    max_output_sentences: int | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_sentences is not None and self.max_output_sentences < 1:
            raise ValueError("max_output_sentences must be positive or None")


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"bad role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    decoding: Decoding = Decoding()

    def __post_init__(self):
        object.__setattr__(
            self, "messages", tuple(m if isinstance(m, Message) else Message(*m) for m in self.messages)
        )
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        for a, b in zip(self.messages, self.messages[1:]):
            if a.role == b.role == "assistant":
                raise ValueError("two consecutive assistant messages")

    @classmethod
    def build(cls, user: str, system: str | None = None, decoding: Decoding = Decoding()) -> "ChatRequest":
        msgs = [Message("system", system)] if system else []
        msgs.append(Message("user", user))
        return cls(tuple(msgs), decoding)

    def followup(self, assistant: str, user: str) -> "ChatRequest":
        return ChatRequest(self.messages + (Message("assistant", assistant), Message("user", user)), self.decoding)

    @property
    def text(self) -> str:
        """All message contents joined; what a prompt-capture test inspects."""
        return "\n".join(m.content for m in self.messages)

    def to_dict(self) -> dict:
        return {
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
            "decoding": asdict(self.decoding),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChatRequest":
        return cls(
            tuple(Message(m["role"], m["content"]) for m in d["messages"]),
            Decoding(**d.get("decoding", {})),
        )


def _normalize(text: str) -> str:
    return " ".join(text.split())


def fingerprint(request: ChatRequest) -> str:
    """Stable hash of a request; insensitive to whitespace layout only."""
    payload = {
        "messages": [[m.role, _normalize(m.content)] for m in request.messages],
        "decoding": asdict(request.decoding),
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# --- process-wide parallelism cap ----------------------------------------------

_call_slots = threading.BoundedSemaphore(4)


def set_parallelism(n: int) -> None:
    global _call_slots
    if n < 1:
        raise ValueError("parallelism must be >= 1")
    _call_slots = threading.BoundedSemaphore(n)


# --- backends -------------------------------------------------------------------


class Backend:
    identity: str = "abstract"
    decoding: Decoding = Decoding()

    def complete(self, request: ChatRequest) -> str:
        raise NotImplementedError

    def request(self, user: str, system: str | None = None, **overrides) -> ChatRequest:
        dec = Decoding(**{**asdict(self.decoding), **overrides}) if overrides else self.decoding
        return ChatRequest.build(user, system, dec)


Responder = Callable[[ChatRequest], "str | None"]


@dataclass
class Rule:
    """Respond with ``response`` when every string in ``match`` occurs in the request text."""

    match: tuple[str, ...]
    response: str
    absent: tuple[str, ...] = ()

    def __call__(self, request: ChatRequest) -> str | None:
        text = request.text
        if all(m in text for m in self.match) and not any(a in text for a in self.absent):
            return self.response
        return None

    def to_dict(self) -> dict:
        d = {"match": list(self.match), "response": self.response}
        if self.absent:
            d["absent"] = list(self.absent)
        return d


class ScriptedBackend(Backend):
    """Deterministic playback backend for tests and offline runs.

    Lookup order: exact fingerprint fixtures, then responders (rules or
    callables) in order. A request nothing answers raises FixtureError naming
    its fingerprint. Every request seen is appended to ``calls``.
    """

    def __init__(
        self,
        fixtures: Mapping[str, str] | None = None,
        responders: Sequence[Responder] = (),
        name: str = "scripted",
        decoding: Decoding = Decoding(),
    ):
        self.fixtures = dict(fixtures or {})
        self.responders = list(responders)
        self.name = name
        self.decoding = decoding
        self.calls: list[ChatRequest] = []
        self._lock = threading.Lock()

    @property
    def identity(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.fixtures, sort_keys=True).encode())
        for r in self.responders:
            h.update(json.dumps(r.to_dict() if isinstance(r, Rule) else getattr(r, "__qualname__", repr(r))).encode())
        return f"scripted:{self.name}:{h.hexdigest()[:16]}"

    @classmethod
    def from_file(cls, path: str | os.PathLike, name: str = "scripted", decoding: Decoding = Decoding()):
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = [Rule(tuple(r["match"]), r["response"], tuple(r.get("absent", ()))) for r in data.get("rules", [])]
        return cls(data.get("fingerprints", {}), rules, name=name, decoding=decoding)

    def complete(self, request: ChatRequest) -> str:
        with self._lock:
            self.calls.append(request)
        fp = fingerprint(request)
        if fp in self.fixtures:
            return self.fixtures[fp]
        for responder in self.responders:
            out = responder(request)
            if out is not None:
                if not out:
                    raise BackendError("scripted responder returned empty text")
                return out
        raise FixtureError(fp)


class HTTPBackend(Backend):
    """OpenAI-compatible ``/chat/completions`` client."""

    TRANSIENT = {408, 409, 425, 429, 500, 502, 503, 504}

    def __init__(
        self,
        endpoint: str,
        model: str,
        decoding: Decoding = Decoding(),
        api_key_env: str = "OPENAI_API_KEY",
        max_retries: int = 3,
        backoff: float = 0.5,
        timeout: float = 120.0,
        client=None,
    ):
        import httpx

        self.endpoint = endpoint.rstrip("/")
        if not self.endpoint.endswith("/chat/completions"):
            self.endpoint += "/chat/completions"
        self.model = model
        self.decoding = decoding
        self.api_key_env = api_key_env
        self.max_retries = max_retries
        self.backoff = backoff
        self._client = client or httpx.Client(timeout=timeout)

    @property
    def identity(self) -> str:
        return f"http:{self.endpoint}:{self.model}"

    def payload(self, request: ChatRequest) -> dict:
        body = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.decoding.temperature,
        }
        if request.decoding.seed is not None:
            body["seed"] = request.decoding.seed
        return body

    def complete(self, request: ChatRequest) -> str:
        import httpx

        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = self.payload(request)
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with _call_slots:
                    resp = self._client.post(self.endpoint, json=body, headers=headers)
            except httpx.TransportError as e:
                last = e
                log.warning("transport error on attempt %d: %s", attempt + 1, e)
                continue
            if resp.status_code in (401, 403):
                raise TransportError(f"authentication failed ({resp.status_code}) at {self.endpoint}")
            if resp.status_code in self.TRANSIENT:
                last = TransportError(f"HTTP {resp.status_code}")
                log.warning("HTTP %d on attempt %d", resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                choice = resp.json()["choices"][0]
                text = choice["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as e:
                raise BackendError(f"malformed completion response: {e}") from e
            if choice.get("finish_reason") == "length":
                raise TruncatedOutputError(f"{self.model} hit its output limit")
            if not text or not text.strip():
                raise BackendError("empty completion")
            return text
        raise TransportError(f"giving up after {self.max_retries + 1} attempts: {last}") from last


class CachedBackend(Backend):
    """Serve repeated requests from ``cache_dir``; one file per (identity, fingerprint).

    File layout: a JSON header line (fingerprint, identity, request, timestamp)
    followed by the raw response body.
    """

    def __init__(self, inner: Backend, cache_dir: str | os.PathLike):
        self.inner = inner
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    @property
    def identity(self) -> str:
        return self.inner.identity

    @property
    def decoding(self) -> Decoding:
        return self.inner.decoding

    def path_for(self, fp: str) -> Path:
        key = hashlib.sha256(f"{self.identity}\n{fp}".encode()).hexdigest()
        return self.cache_dir / f"{key}.txt"

    def _read(self, path: Path, fp: str) -> str | None:
        if not path.exists():
            return None
        try:
            raw = path.read_text(encoding="utf-8")
            header_line, _, body = raw.partition("\n")
            header = json.loads(header_line)
            if header["fingerprint"] != fp or header["identity"] != self.identity or not body:
                raise ValueError("header does not match request")
            return body
        except (ValueError, KeyError, UnicodeDecodeError) as e:
            log.warning("ignoring corrupt cache entry %s: %s", path.name, e)
            return None

    def _write(self, path: Path, fp: str, request: ChatRequest, response: str) -> None:
        header = {
            "fingerprint": fp,
            "identity": self.identity,
            "request": request.to_dict(),
            "timestamp": datetime.now(timezone.utc).isoformat(),
        }
        fd, tmp = tempfile.mkstemp(dir=self.cache_dir, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(json.dumps(header, ensure_ascii=False) + "\n" + response)
        os.replace(tmp, path)

    def complete(self, request: ChatRequest) -> str:
        fp = fingerprint(request)
        with self._guard:
            lock = self._locks.setdefault(fp, threading.Lock())
        with lock:
            path = self.path_for(fp)
            body = self._read(path, fp)
            if body is not None:
                with self._guard:
                    self.hits += 1
                return body
            response = self.inner.complete(request)
            self._write(path, fp, request, response)
            with self._guard:
                self.misses += 1
            return response

    def stats(self) -> dict:
        return {"hits": self.hits, "misses": self.misses}


def cached(backend: Backend, cache_dir: str | os.PathLike) -> CachedBackend:
    return CachedBackend(backend, cache_dir)


# --- verdicts -------------------------------------------------------------------

TAXONOMY = ("Premature", "Confusion", "DeferredNYO", "StateFailure", "Conservative", "IndirectFailure")

_LABELS = {
    "boolean": {"yes": True, "true": True, "no": False, "false": False},
    "entailment3": {
        "entails": "entails",
        "entail": "entails",
        "entailment": "entails",
        "neutral": "neutral",
        "contradicts": "contradicts",
        "contradict": "contradicts",
        "contradiction": "contradicts",
    },
    "taxonomy6": {
        **{t.lower(): t for t in TAXONOMY},
        "deferred": "DeferredNYO",
        "deferrednotyetobservable": "DeferredNYO",
        "deferredpayoffnotyetobservable": "DeferredNYO",
        "premature": "Premature",
        "prematurepayofftriggering": "Premature",
        "thematicconfusion": "Confusion",
        "thematicoreventlevelconfusion": "Confusion",
        "narrativestatetrackingfailure": "StateFailure",
        "overlyconservativetriggering": "Conservative",
        "indirectorretrospectivepayofflinkingfailure": "IndirectFailure",
    },
}
SCHEMAS = tuple(_LABELS)

FORMAT_REMINDER = {
    "boolean": "Reply using exactly this format:\nANSWER: yes|no\nCONFIDENCE: <number between 0 and 1>\nRATIONALE: <one sentence>",
    "entailment3": "Reply using exactly this format:\nANSWER: entails|neutral|contradicts\nCONFIDENCE: <number between 0 and 1>\nRATIONALE: <one sentence>",
    "taxonomy6": "Reply using exactly this format:\nANSWER: " + "|".join(TAXONOMY)
    + "\nCONFIDENCE: <number between 0 and 1>\nRATIONALE: <one sentence>",
}

_FIELD = re.compile(r"\b(ANSWER|CONFIDENCE|RATIONALE)\s*:", re.IGNORECASE)


@dataclass(frozen=True)
class JudgeVerdict:
    label: object
    confidence: float = 1.0
    rationale: str = ""
    schema: str = "boolean"

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def activation(self) -> float:
        """Probability-like score for a yes/no decision: c for yes, 1 - c for no."""
        if self.schema != "boolean":
            raise ValueError("activation is defined for boolean verdicts only")
        return self.confidence if self.label else 1.0 - self.confidence

    def to_dict(self) -> dict:
        return {"label": self.label, "confidence": self.confidence, "rationale": self.rationale, "schema": self.schema}

    @classmethod
    def from_dict(cls, d: dict) -> "JudgeVerdict":
        return cls(d["label"], d["confidence"], d.get("rationale", ""), d.get("schema", "boolean"))


def split_fields(text: str) -> dict[str, str]:
    """Pull ``KEY: value`` fields out of line-oriented (or single-line) output."""
    out: dict[str, str] = {}
    matches = list(_FIELD.finditer(text))
    for m, nxt in zip(matches, matches[1:] + [None]):
        key = m.group(1).upper()
        end = nxt.start() if nxt else len(text)
        out.setdefault(key, text[m.end() : end].strip())
    return out


def parse_label(value: str, schema: str):
    table = _LABELS[schema]
    words = value.strip().strip("*`\"'.").split()
    candidates = [re.sub(r"[^a-z]", "", value.lower())]
    if words:
        candidates.append(re.sub(r"[^a-z]", "", words[0].lower()))
    for c in candidates:
        if c in table:
            return table[c]
    raise JudgeParseError(f"label {value!r} not in {schema} schema", value)


def parse_confidence(value: str | None) -> float:
    if value is None:
        return 1.0
    m = re.match(r"\s*([0-9]*\.?[0-9]+)\s*(%?)", value)
    if not m:
        raise JudgeParseError(f"unreadable confidence {value!r}", value)
    c = float(m.group(1))
    if m.group(2) or 1.0 < c <= 100.0:
        c /= 100.0
    if not 0.0 <= c <= 1.0:
        raise JudgeParseError(f"confidence {c} outside [0, 1]", value)
    return c


def parse_verdict(text: str, schema: str) -> JudgeVerdict:
    if schema not in _LABELS:
        raise ValueError(f"unknown verdict schema {schema!r}")
    fields = split_fields(text)
    if "ANSWER" not in fields or not fields["ANSWER"]:
        raise JudgeParseError("no ANSWER line", text)
    return JudgeVerdict(
        label=parse_label(fields["ANSWER"], schema),
        confidence=parse_confidence(fields.get("CONFIDENCE")),
        rationale=fields.get("RATIONALE", ""),
        schema=schema,
    )


def elicit(backend: Backend, request: ChatRequest, parse: Callable[[str], object], reminder: str):
    """Complete and parse; on a parse failure reprompt once with ``reminder``, then give up."""
    first = backend.complete(request)
    try:
        return parse(first)
    except JudgeParseError as e:
        log.info("unparseable judge output (%s); reprompting once", e)
    second = backend.complete(request.followup(first, "Your previous reply could not be parsed. " + reminder))
    try:
        return parse(second)
    except JudgeParseError as e:
        raise JudgeParseError(f"judge output unparseable after reprompt: {e}", second) from e


def judge(backend: Backend, request: ChatRequest, schema: str) -> JudgeVerdict:
    if schema not in _LABELS:
        raise ValueError(f"schema must be one of {SCHEMAS}")
    return elicit(backend, request, lambda text: parse_verdict(text, schema), FORMAT_REMINDER[schema])


@dataclass
class BackendSet:
    """Backends by role. Unset roles fall back to ``generator``."""

    generator: Backend
    judge: Backend | None = None
    extractor: Backend | None = None
    verifiers: tuple[Backend, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.judge = self.judge or self.generator
        self.extractor = self.extractor or self.generator

    def all(self) -> dict[str, Backend]:
        out = {"generator": self.generator, "judge": self.judge, "extractor": self.extractor}
        for i, v in enumerate(self.verifiers):
            out[f"verifier_{'ab'[i] if i < 2 else i}"] = v
        return out

    def identities(self) -> dict[str, str]:
        return {role: b.identity for role, b in self.all().items()}

    def cache_stats(self) -> dict[str, dict]:
        return {role: b.stats() for role, b in self.all().items() if isinstance(b, CachedBackend)}
