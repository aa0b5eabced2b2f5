"""The Select-Generate-Update loop over a foreshadow pool."""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .backends import Backend, BackendSet, JudgeVerdict, judge
from .core import Category, FTPTriple, NarrativeState, Status, segment_sentences
from .prompts import DEFAULT_TEMPLATES, Templates, render_payoffs, render_prefix

log = logging.getLogger(__name__)


@dataclass
class EngineConfig:
    prefix_window: int = 40
    max_output_sentences: int = 5
    extract: bool = True
    stop_when_quiescent: bool = False
    check_violations: bool = False  # extra judge pass per open triple each step
    templates: Templates = field(default_factory=lambda: DEFAULT_TEMPLATES)


@dataclass(frozen=True)
class EligibleSet:
    step: int
    members: tuple[str, ...] = ()


@dataclass(frozen=True)
class VerdictRecord:
    kind: str  # "gate", "realize" or "violation"
    triple_id: str
    verdict: JudgeVerdict

    def to_dict(self) -> dict:
        return {"kind": self.kind, "triple_id": self.triple_id, **self.verdict.to_dict()}


@dataclass(frozen=True)
class StepTrace:
    step: int
    prefix_len_before: int
    prefix_len_after: int
    eligible: EligibleSet
    continuation: str
    resolved: tuple[str, ...]
    new_triples: tuple[FTPTriple, ...]
    verdicts: tuple[VerdictRecord, ...]

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "prefix_len_before": self.prefix_len_before,
            "prefix_len_after": self.prefix_len_after,
            "eligible": list(self.eligible.members),
            "continuation": self.continuation,
            "resolved": list(self.resolved),
            "new_triples": [t.to_dict() for t in self.new_triples],
            "verdicts": [v.to_dict() for v in self.verdicts],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)


class RunAborted(RuntimeError):
    """A step failed; carries everything completed before it."""

    def __init__(self, state: NarrativeState, traces: list[StepTrace], cause: Exception):
        self.state = state
        self.traces = traces
        super().__init__(f"run aborted after {len(traces)} steps: {cause}")


def codify(
    prefix: Sequence[str],
    triple: FTPTriple,
    judge_backend: Backend,
    config: EngineConfig | None = None,
) -> JudgeVerdict:
    """Boolean gate: is the triple's trigger satisfied by ``prefix`` alone?"""
    config = config or EngineConfig()
    if triple.status not in (Status.PENDING, Status.ELIGIBLE):
        raise ValueError(f"cannot gate a {triple.status.value} triple")
    request = config.templates["codify"].render(
        judge_backend,
        prefix=render_prefix(prefix, config.prefix_window),
        foreshadow=triple.foreshadow,
        trigger=triple.trigger,
    )
    return judge(judge_backend, request, "boolean")


def select_eligible(
    state: NarrativeState, judge_backend: Backend, config: EngineConfig | None = None
) -> tuple[NarrativeState, EligibleSet, list[VerdictRecord]]:
    """Gate every unfulfilled triple; affirmed ones become eligible.

    Statuses are only changed once every gate call has succeeded, so a
    backend failure leaves ``state`` untouched.
    """
    step = state.step + 1
    verdicts = []
    for triple in state.pool.pending():
        verdicts.append(VerdictRecord("gate", triple.id, codify(state.sentences, triple, judge_backend, config)))
    pool = state.pool
    members = []
    for rec in verdicts:
        current = pool.get(rec.triple_id).status
        if rec.verdict.label:
            members.append(rec.triple_id)
            if current is Status.PENDING:
                pool = pool.with_status(rec.triple_id, Status.ELIGIBLE)
        elif current is Status.ELIGIBLE:
            pool = pool.with_status(rec.triple_id, Status.PENDING)
    return replace(state, pool=pool), EligibleSet(step, tuple(members)), verdicts


def generate_continuation(
    state: NarrativeState,
    eligible: EligibleSet,
    gen_backend: Backend,
    config: EngineConfig | None = None,
) -> str:
    config = config or EngineConfig()
    payoffs = [state.pool.get(i).payoff for i in eligible.members]
    request = config.templates["generate"].render(
        gen_backend,
        prefix=render_prefix(state.sentences, config.prefix_window),
        payoffs=render_payoffs(payoffs),
        max_sentences=config.max_output_sentences,
    )
    text = gen_backend.complete(request).strip()
    sentences = segment_sentences(text)[: config.max_output_sentences]
    return " ".join(sentences)


_BLOCK_SPLIT = re.compile(r"^\s*-{3,}\s*$", re.MULTILINE)
_KV = re.compile(r"^\s*([A-Z_]+)\s*:\s*(.*)$", re.MULTILINE)


def parse_blocks(text: str) -> list[dict[str, str]]:
    """``KEY: value`` blocks separated by ``---`` lines (or blank lines); ``NONE`` means empty."""
    if text.strip().upper().rstrip(".") == "NONE":
        return []
    chunks = _BLOCK_SPLIT.split(text) if _BLOCK_SPLIT.search(text) else re.split(r"\n\s*\n", text)
    blocks = []
    for chunk in chunks:
        fields = {k.upper(): v.strip() for k, v in _KV.findall(chunk)}
        if fields:
            blocks.append(fields)
    return blocks


def extract_triples(
    state: NarrativeState, continuation: str, extractor: Backend, step: int, config: EngineConfig
) -> list[FTPTriple]:
    request = config.templates["extract_triples"].render(
        extractor,
        prefix=render_prefix(state.sentences, config.prefix_window),
        continuation=continuation,
    )
    raw = extractor.complete(request)
    triples = []
    for block in parse_blocks(raw):
        try:
            category = Category.parse(block.get("CATEGORY", "event"))
            triple = FTPTriple(
                id=f"s{step}.{len(triples) + 1}",
                foreshadow=block.get("FORESHADOW", ""),
                trigger=block.get("TRIGGER", ""),
                payoff=block.get("PAYOFF", ""),
                category=category,
            )
        except ValueError as e:
            log.warning("step %d: skipping malformed extracted setup: %s", step, e)
            continue
        triples.append(triple)
    return triples


def verify_and_transition(
    state: NarrativeState,
    eligible: EligibleSet,
    continuation: str,
    judge_backend: Backend,
    extractor_backend: Backend | None,
    config: EngineConfig | None = None,
    gate_verdicts: Sequence[VerdictRecord] = (),
) -> tuple[NarrativeState, StepTrace]:
    config = config or EngineConfig()
    if not continuation.strip():
        raise ValueError("continuation is empty")
    realized = []
    for triple_id in eligible.members:
        triple = state.pool.get(triple_id)
        request = config.templates["realize"].render(
            judge_backend, foreshadow=triple.foreshadow, payoff=triple.payoff, continuation=continuation
        )
        realized.append(VerdictRecord("realize", triple_id, judge(judge_backend, request, "boolean")))
    new_triples = []
    if config.extract and extractor_backend is not None:
        new_triples = extract_triples(state, continuation, extractor_backend, eligible.step, config)

    resolved = [r.triple_id for r in realized if r.verdict.label]
    violations = []
    if config.check_violations:
        for triple in state.pool.pending():
            if triple.id in resolved:
                continue
            request = config.templates["violation"].render(
                judge_backend, foreshadow=triple.foreshadow, payoff=triple.payoff, continuation=continuation
            )
            violations.append(VerdictRecord("violation", triple.id, judge(judge_backend, request, "boolean")))

    pool = state.pool.resolve(resolved)
    for r in realized:
        if not r.verdict.label:
            pool = pool.with_status(r.triple_id, Status.PENDING)
    for r in violations:
        if r.verdict.label:
            pool = pool.mark_violated(r.triple_id)
    taken = {t.id for t in pool}
    fresh = []
    for t in new_triples:
        tid, n = t.id, 1
        while tid in taken:
            n += 1
            tid = f"{t.id}-{n}"
        taken.add(tid)
        fresh.append(replace(t, id=tid))
    pool = pool.add(*fresh)

    added = segment_sentences(continuation)
    new_state = NarrativeState(state.sentences + tuple(added), pool, state.step + 1)
    trace = StepTrace(
        step=eligible.step,
        prefix_len_before=len(state.sentences),
        prefix_len_after=len(new_state.sentences),
        eligible=eligible,
        continuation=continuation,
        resolved=tuple(resolved),
        new_triples=tuple(fresh),
        verdicts=tuple(gate_verdicts) + tuple(realized) + tuple(violations),
    )
    return new_state, trace


def run_step(state: NarrativeState, backends: BackendSet, config: EngineConfig) -> tuple[NarrativeState, StepTrace]:
    gated, eligible, gate_verdicts = select_eligible(state, backends.judge, config)
    y = generate_continuation(gated, eligible, backends.generator, config)
    if not y:
        raise ValueError(f"step {eligible.step}: generator produced no sentences")
    extractor = backends.extractor if config.extract else None
    return verify_and_transition(gated, eligible, y, backends.judge, extractor, config, gate_verdicts)


def run_loop(
    initial: NarrativeState,
    backends: BackendSet,
    max_steps: int,
    config: EngineConfig | None = None,
    trace_log: str | Path | None = None,
) -> tuple[NarrativeState, list[StepTrace]]:
    """Run up to ``max_steps`` Select-Generate-Update iterations.

    With ``config.stop_when_quiescent`` the loop ends early once no triple is
    pending. A failing step raises RunAborted holding the traces so far.
    Traces are appended to ``trace_log`` (JSONL) as they complete.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    config = config or EngineConfig()
    state = initial
    traces: list[StepTrace] = []
    log_file = open(trace_log, "a", encoding="utf-8") if trace_log else None
    try:
        for _ in range(max_steps):
            if config.stop_when_quiescent and traces and not state.pool.pending():
                break
            try:
                state, trace = run_step(state, backends, config)
            except Exception as e:
                log.error("step %d failed: %s", state.step + 1, e)
                raise RunAborted(state, traces, e) from e
            traces.append(trace)
            if log_file:
                log_file.write(trace.to_json() + "\n")
                log_file.flush()
    finally:
        if log_file:
            log_file.close()
    return state, traces
