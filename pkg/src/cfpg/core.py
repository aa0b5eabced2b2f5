"""Narrative commitments, the foreshadow pool, and sentence segmentation.

All types here are frozen; every pool operation returns a new pool.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from typing import Iterable, Sequence

SEGMENTER_VERSION = "rules-1"


class Category(str, enum.Enum):
    OBJECT = "object"
    EVENT = "event"
    SPEECH_ACT = "speech-act"
    RULE = "rule"
    SYMBOL = "symbol"

    @classmethod
    def parse(cls, text: str) -> "Category":
        key = re.sub(r"[^a-z]", "", text.lower())
        for member in cls:
            if re.sub(r"[^a-z]", "", member.value) == key:
                return member
        # "physical object", "speech act foreshadow" and similar
        for member in cls:
            if re.sub(r"[^a-z]", "", member.value) in key:
                return member
        raise ValueError(f"unknown foreshadow category: {text!r}")


class Status(str, enum.Enum):
    PENDING = "pending"
    ELIGIBLE = "eligible"
    RESOLVED = "resolved"
    VIOLATED = "violated"


_TRANSITIONS = {
    Status.PENDING: {Status.ELIGIBLE, Status.VIOLATED},
    Status.ELIGIBLE: {Status.RESOLVED, Status.PENDING, Status.VIOLATED},
    Status.RESOLVED: set(),
    Status.VIOLATED: set(),
}


class IllegalTransition(ValueError):
    """A status change the commitment state machine does not allow."""


class TripleNotFound(KeyError):
    pass


@dataclass(frozen=True)
class FTPTriple:
    """One narrative commitment: a setup, the condition that activates it, and its resolution."""

    id: str
    foreshadow: str
    trigger: str
    payoff: str
    category: Category = Category.EVENT
    status: Status = Status.PENDING

    def __post_init__(self):
        for name in ("foreshadow", "trigger", "payoff"):
            if not getattr(self, name).strip():
                raise ValueError(f"triple {self.id!r}: {name} must be non-empty")
        object.__setattr__(self, "category", Category(self.category))
        object.__setattr__(self, "status", Status(self.status))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "foreshadow": self.foreshadow,
            "trigger": self.trigger,
            "payoff": self.payoff,
            "category": self.category.value,
            "status": self.status.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FTPTriple":
        return cls(
            id=d["id"],
            foreshadow=d["foreshadow"],
            trigger=d["trigger"],
            payoff=d["payoff"],
            category=Category(d.get("category", "event")),
            status=Status(d.get("status", "pending")),
        )


@dataclass(frozen=True)
class ForeshadowPool:
    triples: tuple[FTPTriple, ...] = ()

    def __post_init__(self):
        ids = [t.id for t in self.triples]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate triple ids in pool: {ids}")

    def __len__(self) -> int:
        return len(self.triples)

    def __iter__(self):
        return iter(self.triples)

    def __contains__(self, triple_id: str) -> bool:
        return any(t.id == triple_id for t in self.triples)

    def get(self, triple_id: str) -> FTPTriple:
        for t in self.triples:
            if t.id == triple_id:
                return t
        raise TripleNotFound(triple_id)

    def add(self, *triples: FTPTriple) -> "ForeshadowPool":
        return ForeshadowPool(self.triples + tuple(triples))

    def pending(self) -> list[FTPTriple]:
        return [t for t in self.triples if t.status in (Status.PENDING, Status.ELIGIBLE)]

    def with_status(self, triple_id: str, status: Status) -> "ForeshadowPool":
        current = self.get(triple_id)
        if status not in _TRANSITIONS[current.status]:
            raise IllegalTransition(
                f"triple {triple_id!r}: {current.status.value} -> {Status(status).value} is not allowed"
            )
        return ForeshadowPool(
            tuple(replace(t, status=status) if t.id == triple_id else t for t in self.triples)
        )

    def resolve(self, ids: Iterable[str]) -> "ForeshadowPool":
        pool = self
        for triple_id in ids:
            if pool.get(triple_id).status is not Status.ELIGIBLE:
                raise IllegalTransition(
                    f"triple {triple_id!r} is {pool.get(triple_id).status.value}, only eligible triples resolve"
                )
            pool = pool.with_status(triple_id, Status.RESOLVED)
        return pool

    def mark_violated(self, triple_id: str) -> "ForeshadowPool":
        return self.with_status(triple_id, Status.VIOLATED)

    def counts(self) -> dict[str, int]:
        out = {s.value: 0 for s in Status}
        for t in self.triples:
            out[t.status.value] += 1
        return out


def pool_pending(pool: ForeshadowPool) -> list[FTPTriple]:
    """Unfulfilled commitments (pending or eligible), in insertion order."""
    return pool.pending()


def pool_resolve(pool: ForeshadowPool, ids: Iterable[str]) -> ForeshadowPool:
    return pool.resolve(ids)


@dataclass(frozen=True)
class NarrativeState:
    sentences: tuple[str, ...] = ()
    pool: ForeshadowPool = field(default_factory=ForeshadowPool)
    step: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))
        if self.step < 0:
            raise ValueError("step must be non-negative")

    @classmethod
    def from_text(cls, text: str, triples: Sequence[FTPTriple] = ()) -> "NarrativeState":
        return cls(tuple(segment_sentences(text)), ForeshadowPool(tuple(triples)))


def check_index(value: int, sentences: Sequence[str]) -> int:
    if not 0 <= value < len(sentences):
        raise IndexError(f"sentence index {value} out of range for {len(sentences)} sentences")
    return value


# --- segmentation ---------------------------------------------------------

_OPENERS = "\"'“‘([{«"
_CLOSERS = "\"'”’)]}»"
_TERMINALS = ".!?…"
_INITIAL = re.compile(r"^[A-Z]\.$")


@lru_cache(maxsize=None)
def abbreviations() -> frozenset[str]:
    text = resources.files("cfpg").joinpath("data/abbreviations.txt").read_text(encoding="utf-8")
    return frozenset(
        line.strip().lower() for line in text.splitlines() if line.strip() and not line.startswith("#")
    )


def _ends_sentence(token: str) -> bool:
    core = token.rstrip(_CLOSERS)
    if not core or core[-1] not in _TERMINALS:
        return False
    if core.endswith(".") and not core.endswith(".."):
        word = core.lstrip(_OPENERS)
        if word.lower() in abbreviations() or _INITIAL.match(word):
            return False
    return True


def _starts_sentence(token: str) -> bool:
    head = token.lstrip(_OPENERS)
    return bool(head) and (head[0].isupper() or head[0].isdigit())


def segment_sentences(text: str) -> list[str]:
    """Split text into sentences.

    A token closes a sentence when it ends in terminal punctuation (optionally
    followed by closing quotes or brackets), is not a listed abbreviation or a
    single-capital initial, and the next token opens with a capital or digit.
    Whitespace inside a sentence is collapsed to single spaces.
    """
    tokens = text.split()
    sentences: list[str] = []
    current: list[str] = []
    for i, token in enumerate(tokens):
        current.append(token)
        nxt = tokens[i + 1] if i + 1 < len(tokens) else None
        if nxt is None or (_ends_sentence(token) and _starts_sentence(nxt)):
            sentences.append(" ".join(current))
            current = []
    return sentences
