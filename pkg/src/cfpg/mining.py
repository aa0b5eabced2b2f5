"""Three-stage foreshadow-payoff mining over sentence-segmented summaries.

Stage 1 proposes quote-anchored pairs, stage 2 checks alignment over local
context windows, stage 3 applies a four-part rubric with two verifiers that
must both accept on every criterion.
"""
from __future__ import annotations

import difflib
import json
import logging
import re
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .backends import Backend, JudgeParseError, JudgeVerdict, elicit, judge, parse_confidence, split_fields
from .core import SEGMENTER_VERSION, Category, segment_sentences
from .engine import parse_blocks
from .prompts import DEFAULT_TEMPLATES, Templates

log = logging.getLogger(__name__)

SCHEMA_VERSION = "cfpg-dataset/1"
FUZZY_FLOOR = 0.9
RUBRIC_KEYS = ("SETUP_VALID", "PAYOFF_VALID", "TEMPORAL_SEPARATION", "HINDSIGHT_JUSTIFIED")


@dataclass
class MiningConfig:
    window: int = 3
    min_gap: int = 2
    parallelism: int = 1
    templates: Templates = field(default_factory=lambda: DEFAULT_TEMPLATES)

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.min_gap < 1:
            raise ValueError("min_gap must be >= 1 (setup and payoff must be distinct sentences)")


@dataclass(frozen=True)
class Candidate:
    t_f: int
    t_p: int
    description: str
    category: Category
    trigger: str = ""


@dataclass(frozen=True)
class RubricVerdict:
    setup_valid: bool
    payoff_valid: bool
    temporal_separated: bool
    hindsight_justified: bool
    verifier_id: str
    confidence: float = 1.0

    @property
    def accepted(self) -> bool:
        return self.setup_valid and self.payoff_valid and self.temporal_separated and self.hindsight_justified

    def to_dict(self) -> dict:
        return {
            "setup_valid": self.setup_valid,
            "payoff_valid": self.payoff_valid,
            "temporal_separated": self.temporal_separated,
            "hindsight_justified": self.hindsight_justified,
            "verifier_id": self.verifier_id,
            "confidence": self.confidence,
        }


@dataclass(frozen=True)
class DatasetRecord:
    book_id: str
    sentences: tuple[str, ...]
    t_f: int
    t_p: int
    description: str
    category: Category
    confidence: float = 1.0
    provenance: dict = field(default_factory=dict, compare=False)
    trigger: str = ""

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))
        object.__setattr__(self, "category", Category(self.category))
        if not 0 <= self.t_f < self.t_p < len(self.sentences):
            raise ValueError(f"bad anchors t_f={self.t_f}, t_p={self.t_p} for {len(self.sentences)} sentences")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence outside [0, 1]")

    @property
    def record_id(self) -> str:
        return f"{self.book_id}#{self.t_f}-{self.t_p}"

    @property
    def foreshadow(self) -> str:
        return self.sentences[self.t_f]

    @property
    def payoff(self) -> str:
        return self.sentences[self.t_p]

    def to_dict(self) -> dict:
        return {
            "book_id": self.book_id,
            "record_id": self.record_id,
            "sentences": list(self.sentences),
            "t_f": self.t_f,
            "t_p": self.t_p,
            "description": self.description,
            "trigger": self.trigger,
            "category": self.category.value,
            "confidence": self.confidence,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict, index_base: int = 0) -> "DatasetRecord":
        return cls(
            book_id=str(d["book_id"]),
            sentences=tuple(d["sentences"]),
            t_f=int(d["t_f"]) - index_base,
            t_p=int(d["t_p"]) - index_base,
            description=d.get("description", ""),
            category=Category.parse(d.get("category", "event")),
            confidence=float(d.get("confidence", 1.0)),
            provenance=d.get("provenance", {}),
            trigger=d.get("trigger", ""),
        )


# --- anchoring ---------------------------------------------------------------


def _norm(s: str) -> str:
    return " ".join(s.strip().strip("\"'“”‘’").split()).casefold()


def anchor_quote(quote: str, sentences: Sequence[str], floor: float = FUZZY_FLOOR) -> int | None:
    """Index of the sentence ``quote`` refers to: exact match first, then best fuzzy ratio >= floor."""
    q = _norm(quote)
    if not q:
        return None
    normed = [_norm(s) for s in sentences]
    for i, s in enumerate(normed):
        if s == q:
            return i
    best, best_ratio = None, floor
    for i, s in enumerate(normed):
        ratio = difflib.SequenceMatcher(None, q, s, autojunk=False).ratio()
        if ratio >= best_ratio and (best is None or ratio > best_ratio):
            best, best_ratio = i, ratio
    return best


def _numbered(sentences: Sequence[str]) -> str:
    return "\n".join(f"[{i}] {s}" for i, s in enumerate(sentences))


_INDEX_PREFIX = re.compile(r"^\s*\[\d+\]\s*")


def stage1_candidates(
    summary: Sequence[str], extractor: Backend, config: MiningConfig | None = None
) -> tuple[list[Candidate], int]:
    """Recall-oriented candidate pairs. Returns (candidates, number dropped)."""
    config = config or MiningConfig()
    if len(summary) < 2:
        raise ValueError("a summary needs at least two sentences")
    request = config.templates["mine_candidates"].render(extractor, summary=_numbered(summary))
    blocks = parse_blocks(extractor.complete(request))
    out: list[Candidate] = []
    seen: set[tuple[int, int]] = set()
    dropped = 0
    for block in blocks:
        setup_q = _INDEX_PREFIX.sub("", block.get("SETUP", ""))
        payoff_q = _INDEX_PREFIX.sub("", block.get("PAYOFF", ""))
        t_f, t_p = anchor_quote(setup_q, summary), anchor_quote(payoff_q, summary)
        reason = None
        if t_f is None or t_p is None:
            reason = "quoted sentence not found in summary"
        elif t_p - t_f < config.min_gap:
            reason = f"anchors ({t_f}, {t_p}) not separated by at least {config.min_gap} sentences"
        elif (t_f, t_p) in seen:
            reason = f"duplicate pair ({t_f}, {t_p})"
        try:
            category = Category.parse(block.get("CATEGORY", ""))
        except ValueError:
            reason = reason or f"unknown category {block.get('CATEGORY')!r}"
        if reason:
            log.warning("stage 1: dropping candidate: %s", reason)
            dropped += 1
            continue
        seen.add((t_f, t_p))
        out.append(Candidate(t_f, t_p, block.get("DESCRIPTION", ""), category, block.get("TRIGGER", "")))
    return out, dropped


def context_window(sentences: Sequence[str], center: int, window: int) -> tuple[int, int]:
    """Inclusive [lo, hi] of ``window`` sentences either side of ``center``, clipped to the text."""
    return max(0, center - window), min(len(sentences) - 1, center + window)


def _window_text(sentences: Sequence[str], center: int, window: int) -> str:
    lo, hi = context_window(sentences, center, window)
    return "\n".join(f"[{i}] {sentences[i]}" for i in range(lo, hi + 1))


def stage2_verify(
    candidate: Candidate, summary: Sequence[str], judge_backend: Backend, window: int = 3, config: MiningConfig | None = None
) -> JudgeVerdict:
    config = config or MiningConfig()
    request = config.templates["mine_align"].render(
        judge_backend,
        setup_window=_window_text(summary, candidate.t_f, window),
        payoff_window=_window_text(summary, candidate.t_p, window),
        description=candidate.description,
    )
    return judge(judge_backend, request, "boolean")


def parse_rubric(text: str, verifier_id: str) -> RubricVerdict:
    fields = {}
    for line in text.splitlines():
        m = re.match(r"\s*([A-Z_]+)\s*:\s*(.*)", line.strip().upper())
        if m:
            fields[m.group(1)] = m.group(2).strip()
    values = []
    for key in RUBRIC_KEYS:
        raw = re.sub(r"[^A-Z]", "", fields.get(key, ""))
        if raw in ("YES", "TRUE"):
            values.append(True)
        elif raw in ("NO", "FALSE"):
            values.append(False)
        else:
            raise JudgeParseError(f"rubric field {key} missing or unreadable", text)
    conf = parse_confidence(split_fields(text).get("CONFIDENCE"))
    return RubricVerdict(*values, verifier_id=verifier_id, confidence=conf)


RUBRIC_REMINDER = "Reply using exactly these lines:\n" + "\n".join(f"{k}: yes|no" for k in RUBRIC_KEYS) + "\nCONFIDENCE: <number between 0 and 1>"


def stage3_rubric(
    candidate: Candidate, summary: Sequence[str], verifiers: Sequence[Backend], config: MiningConfig | None = None
) -> tuple[bool, list[RubricVerdict]]:
    """Retain only if both verifiers accept all four criteria."""
    config = config or MiningConfig()
    if len(verifiers) != 2:
        raise ValueError("stage 3 needs exactly two verifiers")
    a, b = verifiers
    if a is b or (a.identity, a.decoding) == (b.identity, b.decoding):
        raise ValueError("stage 3 verifiers must be distinct configurations")
    verdicts = []
    for vid, backend in zip(("A", "B"), verifiers):
        request = config.templates["mine_rubric"].render(
            backend,
            setup_index=candidate.t_f,
            setup=summary[candidate.t_f],
            payoff_index=candidate.t_p,
            payoff=summary[candidate.t_p],
            gap=candidate.t_p - candidate.t_f - 1,
            description=candidate.description,
        )
        verdicts.append(elicit(backend, request, lambda text, vid=vid: parse_rubric(text, vid), RUBRIC_REMINDER))
    return all(v.accepted for v in verdicts), verdicts


@dataclass
class Funnel:
    candidates: int = 0
    stage2: int = 0
    retained: int = 0
    dropped_stage1: int = 0
    error: str | None = None

    def as_dict(self) -> dict:
        d = {"candidates": self.candidates, "stage2": self.stage2, "retained": self.retained, "dropped_stage1": self.dropped_stage1}
        if self.error:
            d["error"] = self.error
        return d


@dataclass
class MiningReport:
    books: dict[str, Funnel] = field(default_factory=dict)

    @property
    def total(self) -> Funnel:
        t = Funnel()
        for f in self.books.values():
            t.candidates += f.candidates
            t.stage2 += f.stage2
            t.retained += f.retained
            t.dropped_stage1 += f.dropped_stage1
        return t

    @property
    def errored(self) -> list[str]:
        return [b for b, f in self.books.items() if f.error]

    def as_dict(self) -> dict:
        return {"books": {b: f.as_dict() for b, f in self.books.items()}, "total": self.total.as_dict() if self.books else {}}


def mine_book(book_id: str, summary_text: str, backends, config: MiningConfig) -> tuple[list[DatasetRecord], Funnel]:
    sentences = segment_sentences(summary_text)
    funnel = Funnel()
    candidates, funnel.dropped_stage1 = stage1_candidates(sentences, backends.extractor, config)
    funnel.candidates = len(candidates)
    records = []
    for cand in candidates:
        v2 = stage2_verify(cand, sentences, backends.judge, config.window, config)
        if not v2.label:
            log.info("%s: stage 2 rejected (%d, %d): %s", book_id, cand.t_f, cand.t_p, v2.rationale)
            continue
        funnel.stage2 += 1
        retained, rubric = stage3_rubric(cand, sentences, backends.verifiers, config)
        if not retained:
            continue
        funnel.retained += 1
        confidences = [v2.confidence] + [r.confidence for r in rubric]
        records.append(
            DatasetRecord(
                book_id=book_id,
                sentences=tuple(sentences),
                t_f=cand.t_f,
                t_p=cand.t_p,
                description=cand.description,
                category=cand.category,
                confidence=statistics.fmean(confidences),
                provenance={"stage2": v2.to_dict(), "stage3": [r.to_dict() for r in rubric]},
                trigger=cand.trigger,
            )
        )
    return records, funnel


def mine(corpus: Iterable[tuple[str, str]], backends, config: MiningConfig | None = None) -> tuple[list[DatasetRecord], MiningReport]:
    """Run all three stages per book; a failing book is logged and skipped."""
    config = config or MiningConfig()
    if len(backends.verifiers) != 2:
        raise ValueError("mining needs exactly two stage-3 verifiers")
    corpus = list(corpus)
    report = MiningReport()

    def one(item):
        book_id, text = item
        try:
            return mine_book(book_id, text, backends, config)
        except Exception as e:  # isolate per-book failures
            log.error("book %s failed: %s", book_id, e)
            return [], Funnel(error=f"{type(e).__name__}: {e}")

    with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
        results = list(pool.map(one, corpus))
    records: list[DatasetRecord] = []
    for (book_id, _), (recs, funnel) in zip(corpus, results):
        report.books[book_id] = funnel
        records.extend(recs)
    return records, report


# --- files ---------------------------------------------------------------------


def read_corpus(path: str | Path) -> list[tuple[str, str]]:
    out = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if "book_id" not in obj or "summary" not in obj:
                raise ValueError(f"{path}:{n}: corpus lines need book_id and summary")
            out.append((str(obj["book_id"]), obj["summary"]))
    return out


def dataset_header() -> dict:
    return {"schema_version": SCHEMA_VERSION, "segmenter_version": SEGMENTER_VERSION, "index_base": 0}


def write_dataset(records: Sequence[DatasetRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"header": dataset_header()}, ensure_ascii=False) + "\n")
        for r in records:
            f.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")


def read_dataset(path: str | Path) -> list[DatasetRecord]:
    """Read a dataset JSONL. A ``header`` line may declare ``index_base`` 1 for external data."""
    records = []
    base = 0
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            if "header" in obj:
                base = int(obj["header"].get("index_base", 0))
                continue
            records.append(DatasetRecord.from_dict(obj, index_base=base))
    return records
