"""Evaluation protocols: oracle-timing activation, online payoff tracking,
decision dynamics and error attribution.

Roles: the ``generator`` backend is the model under evaluation (it gates,
detects, continues and explains itself); the ``judge`` backend scores
continuations and classifies failure rationales.
"""
from __future__ import annotations

import logging
import math
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .backends import TAXONOMY, Backend, BackendSet, JudgeParseError, JudgeVerdict, judge
from .core import FTPTriple, NarrativeState, ForeshadowPool, segment_sentences
from .engine import EligibleSet, EngineConfig, codify, generate_continuation
from .mining import DatasetRecord
from .prompts import DEFAULT_TEMPLATES, Templates, render_prefix

log = logging.getLogger(__name__)

ENTAILMENT_SCORES = {"entails": 1.0, "neutral": 0.5, "contradicts": 0.0}
OUTCOMES = ("correct", "early", "late", "miss")
POLICIES = ("fap", "fscr", "cfpg")
ORACLE_POLICIES = ("prompt", "cfpg")
CONFIDENCE_NOTE = "confidence is the detector's self-reported CONFIDENCE (yes -> c, no -> 1 - c), not a model probability"


@dataclass
class EvalConfig:
    tolerance: int = 3
    prefix_window: int = 40
    fscr_window: int = 8
    k: int = 3
    radius: int = 5
    max_output_sentences: int = 3
    parallelism: int = 1
    templates: Templates = field(default_factory=lambda: DEFAULT_TEMPLATES)

    def engine(self, max_sentences: int | None = None) -> EngineConfig:
        return EngineConfig(
            prefix_window=self.prefix_window,
            max_output_sentences=max_sentences or self.max_output_sentences,
            extract=False,
            templates=self.templates,
        )


def entailment_score(label: str) -> float:
    return ENTAILMENT_SCORES[label]


def record_triple(record: DatasetRecord) -> FTPTriple:
    """The codified commitment for a record; trigger falls back to the relation description."""
    description = record.description or record.payoff
    return FTPTriple(
        id=record.record_id,
        foreshadow=record.foreshadow,
        trigger=record.trigger or description,
        payoff=description,
        category=record.category,
    )


def classify_outcome(fired_at: int | None, t_p: int, tolerance: int = 3) -> str:
    if fired_at is None:
        return "miss"
    if abs(fired_at - t_p) <= tolerance:
        return "correct"
    return "early" if fired_at < t_p else "late"


def _judge_entailment(prefix: Sequence[str], generated: str, gold: str, judge_backend: Backend, config: EvalConfig) -> JudgeVerdict:
    request = config.templates["entail"].render(
        judge_backend, prefix=render_prefix(prefix, config.prefix_window), generated=generated, gold=gold
    )
    return judge(judge_backend, request, "entailment3")


# --- oracle timing -------------------------------------------------------------


@dataclass(frozen=True)
class OracleResult:
    record_id: str
    policy: str
    activated: bool | None
    label: str | None
    score: float | None
    continuation: str = ""
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "policy": self.policy,
            "activated": self.activated,
            "label": self.label,
            "score": self.score,
            "continuation": self.continuation,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OracleResult":
        return cls(d["record_id"], d["policy"], d["activated"], d["label"], d["score"], d.get("continuation", ""), d.get("error"))


def _plain_continuation(prefix: Sequence[str], foreshadow: str, backend: Backend, config: EvalConfig, max_sentences: int) -> str:
    request = config.templates["continue_plain"].render(
        backend, prefix=render_prefix(prefix, config.prefix_window), foreshadow=foreshadow, max_sentences=max_sentences
    )
    text = backend.complete(request).strip()
    return " ".join(segment_sentences(text)[:max_sentences])


def oracle_timing_eval(record: DatasetRecord, policy: str, backends: BackendSet, config: EvalConfig | None = None) -> OracleResult:
    """Truncate right before the gold payoff, continue, and score against it."""
    config = config or EvalConfig()
    if policy not in ORACLE_POLICIES:
        raise ValueError(f"policy must be one of {ORACLE_POLICIES}")
    if record.t_p < 1:
        raise ValueError("payoff index must be >= 1")
    prefix = record.sentences[: record.t_p]
    gold = record.sentences[record.t_p]
    if policy == "prompt":
        activated = None
        y = _plain_continuation(prefix, record.foreshadow, backends.generator, config, 1)
    else:
        triple = record_triple(record)
        activated = bool(codify(prefix, triple, backends.generator, config.engine()).label)
        state = NarrativeState(tuple(prefix), ForeshadowPool((triple,)))
        eligible = EligibleSet(1, (triple.id,) if activated else ())
        y = generate_continuation(state, eligible, backends.generator, config.engine(1))
    verdict = _judge_entailment(prefix, y, gold, backends.judge, config)
    return OracleResult(record.record_id, policy, activated, verdict.label, entailment_score(verdict.label), y)


# --- grounded tracking ------------------------------------------------------------


def _tokens(text: str) -> set[str]:
    return set(re.findall(r"\w+", text.casefold()))


def overlap_cosine(a: str, b: str) -> float:
    """Cosine between binary bags of case-folded word tokens."""
    ta, tb = _tokens(a), _tokens(b)
    if not ta or not tb:
        return 0.0
    return len(ta & tb) / math.sqrt(len(ta) * len(tb))


def fscr_indices(prefix: Sequence[str], foreshadow: str, window: int, k: int) -> list[int]:
    if window < 1 or k < 0:
        raise ValueError("window must be >= 1 and k >= 0")
    start = max(0, len(prefix) - window)
    scored = [(overlap_cosine(prefix[i], foreshadow), i) for i in range(start)]
    ranked = sorted((s for s in scored if s[0] > 0), key=lambda s: (-s[0], s[1]))
    picked = sorted({i for _, i in ranked[:k]})
    return picked + list(range(start, len(prefix)))


def fscr_context(prefix: Sequence[str], foreshadow: str, window: int, k: int) -> list[str]:
    """Sliding window plus the ``k`` earlier sentences most lexically similar to the foreshadow.

    Sentences with zero overlap are never retrieved; ties go to the earlier sentence.
    """
    return [prefix[i] for i in fscr_indices(prefix, foreshadow, window, k)]


def detect(record: DatasetRecord, end: int, policy: str, backend: Backend, config: EvalConfig) -> JudgeVerdict:
    """Ask the policy's detector whether the payoff occurs at the prefix ending at sentence ``end``."""
    prefix = record.sentences[: end + 1]
    templates = config.templates
    if policy == "fap":
        request = templates["detect_prompt"].render(
            backend, prefix=render_prefix(prefix, config.prefix_window), foreshadow=record.foreshadow
        )
    elif policy == "fscr":
        context = fscr_context(prefix, record.foreshadow, config.fscr_window, config.k)
        request = templates["detect_prompt"].render(backend, prefix="\n".join(context), foreshadow=record.foreshadow)
    elif policy == "cfpg":
        triple = record_triple(record)
        request = templates["detect_codified"].render(
            backend,
            prefix=render_prefix(prefix, config.prefix_window),
            foreshadow=triple.foreshadow,
            trigger=triple.trigger,
            payoff=triple.payoff,
        )
    else:
        raise ValueError(f"policy must be one of {POLICIES}")
    return judge(backend, request, "boolean")


@dataclass(frozen=True)
class TrackingOutcome:
    record_id: str
    policy: str
    t_p: int
    fired_at: int | None
    outcome: str  # one of OUTCOMES, or "errored"
    loc_error: int | None
    continuation: str | None = None
    trajectory_score: float | None = None
    error: str | None = None

    def __post_init__(self):
        if self.outcome == "errored":
            return
        if self.outcome not in OUTCOMES:
            raise ValueError(f"bad outcome {self.outcome!r}")
        if (self.fired_at is None) != (self.loc_error is None):
            raise ValueError("loc_error is defined exactly when fired_at is")
        if self.fired_at is not None and self.loc_error != abs(self.fired_at - self.t_p):
            raise ValueError("loc_error must equal |fired_at - t_p|")
        if self.trajectory_score is not None and self.outcome != "correct":
            raise ValueError("only correct outcomes carry a continuation score")

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "policy": self.policy,
            "t_p": self.t_p,
            "fired_at": self.fired_at,
            "outcome": self.outcome,
            "loc_error": self.loc_error,
            "continuation": self.continuation,
            "trajectory_score": self.trajectory_score,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrackingOutcome":
        return cls(**{k: d.get(k) for k in cls.__dataclass_fields__})


def make_outcome(record_id: str, policy: str, t_p: int, fired_at: int | None, tolerance: int = 3, **extra) -> TrackingOutcome:
    loc = None if fired_at is None else abs(fired_at - t_p)
    return TrackingOutcome(record_id, policy, t_p, fired_at, classify_outcome(fired_at, t_p, tolerance), loc, **extra)


def track_grounded(
    record: DatasetRecord,
    policy: str,
    backends: BackendSet,
    config: EvalConfig | None = None,
    on_step: Callable[[int], None] | None = None,
) -> TrackingOutcome:
    """Scan growing prefixes; the first positive detection is final.

    ``on_step(i)`` is called before the detector sees the prefix ending at
    sentence ``i`` (and again before the post-detection continuation).
    """
    config = config or EvalConfig()
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}")
    fired_at = None
    for i in range(record.t_f + 1, len(record.sentences)):
        if on_step:
            on_step(i)
        if detect(record, i, policy, backends.generator, config).label:
            fired_at = i
            break
    outcome = make_outcome(record.record_id, policy, record.t_p, fired_at, config.tolerance)
    if outcome.outcome != "correct":
        return outcome
    if on_step:
        on_step(fired_at)
    prefix = record.sentences[: fired_at + 1]
    if policy == "cfpg":
        triple = record_triple(record)
        state = NarrativeState(tuple(prefix), ForeshadowPool((triple,)))
        y = generate_continuation(state, EligibleSet(1, (triple.id,)), backends.generator, config.engine(1))
    elif policy == "fscr":
        context = fscr_context(prefix, record.foreshadow, config.fscr_window, config.k)
        y = _plain_continuation(context, record.foreshadow, backends.generator, config, 1)
    else:
        y = _plain_continuation(prefix, record.foreshadow, backends.generator, config, 1)
    verdict = _judge_entailment(prefix, y, record.payoff, backends.judge, config)
    return make_outcome(
        record.record_id, policy, record.t_p, fired_at, config.tolerance,
        continuation=y, trajectory_score=entailment_score(verdict.label),
    )


def run_batch(records: Sequence[DatasetRecord], fn, parallelism: int = 1, errored=None) -> list:
    """Apply ``fn`` per record under a thread cap; failures become ``errored(record, exc)``."""

    def one(rec):
        try:
            return fn(rec)
        except Exception as e:
            log.error("record %s failed: %s", rec.record_id, e)
            if errored is None:
                raise
            return errored(rec, e)

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        results = [r for r in pool.map(one, records) if r is not None]
    return sorted(results, key=lambda r: r.record_id)


def evaluate_tracking(records, policy, backends, config: EvalConfig | None = None) -> list[TrackingOutcome]:
    config = config or EvalConfig()
    return run_batch(
        records,
        lambda r: track_grounded(r, policy, backends, config),
        config.parallelism,
        lambda r, e: TrackingOutcome(r.record_id, policy, r.t_p, None, "errored", None, error=f"{type(e).__name__}: {e}"),
    )


def evaluate_oracle(records, policy, backends, config: EvalConfig | None = None) -> list[OracleResult]:
    config = config or EvalConfig()
    return run_batch(
        records,
        lambda r: oracle_timing_eval(r, policy, backends, config),
        config.parallelism,
        lambda r, e: OracleResult(r.record_id, policy, None, None, None, error=f"{type(e).__name__}: {e}"),
    )


# --- decision dynamics ----------------------------------------------------------


@dataclass(frozen=True)
class ConfidenceTrajectory:
    record_id: str
    policy: str
    offsets: tuple[int, ...]
    confidences: tuple[float, ...]
    note: str = CONFIDENCE_NOTE

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "policy": self.policy,
            "offsets": list(self.offsets),
            "confidences": list(self.confidences),
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConfidenceTrajectory":
        return cls(d["record_id"], d["policy"], tuple(d["offsets"]), tuple(d["confidences"]), d.get("note", CONFIDENCE_NOTE))


def decision_dynamics(
    record: DatasetRecord, policy: str, backends: BackendSet, radius: int, config: EvalConfig | None = None
) -> ConfidenceTrajectory:
    """Detector activation at prefixes ending t_p - radius .. t_p + radius (clipped to the text)."""
    config = config or EvalConfig()
    if radius < 1:
        raise ValueError("radius must be >= 1")
    offsets, confs = [], []
    for d in range(-radius, radius + 1):
        end = record.t_p + d
        if end < 0 or end >= len(record.sentences):
            continue
        verdict = detect(record, end, policy, backends.generator, config)
        offsets.append(d)
        confs.append(verdict.activation)
    return ConfidenceTrajectory(record.record_id, policy, tuple(offsets), tuple(confs))


def average_trajectories(trajectories: Sequence[ConfidenceTrajectory]) -> dict[int, float]:
    """Mean activation per offset over the trajectories that reach it."""
    sums: dict[int, list[float]] = {}
    for t in trajectories:
        for d, c in zip(t.offsets, t.confidences):
            sums.setdefault(d, []).append(c)
    return {d: sum(v) / len(v) for d, v in sorted(sums.items())}


def decision_jump(curve: dict[int, float]) -> float | None:
    """Activation change from the sentence before the gold payoff to the payoff itself."""
    if -1 in curve and 0 in curve:
        return curve[0] - curve[-1]
    return None


# --- error attribution --------------------------------------------------------------


@dataclass(frozen=True)
class ErrorCase:
    record_id: str
    method: str
    outcome: str
    rationale: str
    category: str | None  # None when classification failed
    error: str | None = None

    def __post_init__(self):
        if self.category is not None and self.category not in TAXONOMY:
            raise ValueError(f"category {self.category!r} not in taxonomy")

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "method": self.method,
            "outcome": self.outcome,
            "rationale": self.rationale,
            "category": self.category,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorCase":
        return cls(**{k: d.get(k) for k in cls.__dataclass_fields__})


_DECISIONS = {
    "early": "You decided the payoff occurred at the last sentence shown.",
    "late": "You decided the payoff occurred at the last sentence shown, after not deciding so earlier.",
    "miss": "You never decided that the payoff had occurred, up to the end of the text shown.",
}


def attribute_errors(
    failures: Sequence[tuple[TrackingOutcome, DatasetRecord]],
    backends: BackendSet,
    config: EvalConfig | None = None,
) -> list[ErrorCase]:
    """Elicit a grounded rationale per failed decision, then classify it into the taxonomy."""
    config = config or EvalConfig()
    cases = []
    for outcome, record in failures:
        if outcome.outcome not in ("early", "late", "miss"):
            raise ValueError(f"{outcome.record_id}: only failed outcomes can be attributed")
        end = outcome.fired_at if outcome.fired_at is not None else len(record.sentences) - 1
        request = config.templates["rationale"].render(
            backends.generator,
            prefix=render_prefix(record.sentences[: end + 1], config.prefix_window),
            foreshadow=record.foreshadow,
            decision=_DECISIONS[outcome.outcome],
        )
        rationale = backends.generator.complete(request).strip()
        request = config.templates["classify_error"].render(backends.judge, outcome=outcome.outcome, rationale=rationale)
        try:
            category = judge(backends.judge, request, "taxonomy6").label
            err = None
        except JudgeParseError as e:
            category, err = None, str(e)
        cases.append(ErrorCase(outcome.record_id, outcome.policy, outcome.outcome, rationale, category, err))
    return cases


def error_distribution(cases: Sequence[ErrorCase]) -> dict[str, dict[str, int]]:
    """Counts per method and category, with unclassified cases counted separately."""
    out: dict[str, dict[str, int]] = {}
    for method in sorted({c.method for c in cases}):
        counts = Counter(c.category or "unclassified" for c in cases if c.method == method)
        out[method] = {cat: counts.get(cat, 0) for cat in (*TAXONOMY, "unclassified")}
    return out
