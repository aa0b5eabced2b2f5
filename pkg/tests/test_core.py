import json
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cfpg.core import (
    Category,
    FTPTriple,
    ForeshadowPool,
    IllegalTransition,
    NarrativeState,
    Status,
    TripleNotFound,
    pool_pending,
    pool_resolve,
    segment_sentences,
)

CASES = [json.loads(line) for line in (Path(__file__).parent / "data" / "segmentation_cases.jsonl").read_text().splitlines() if line.strip()]


def triple(i, status=Status.PENDING):
    return FTPTriple(f"t{i}", f"setup {i}", f"trigger {i}", f"payoff {i}", Category.EVENT, status)


@pytest.mark.parametrize("case", CASES, ids=[c["text"][:30] or "<empty>" for c in CASES])
def test_segmentation_oracle(case):
    assert segment_sentences(case["text"]) == case["sentences"]


@given(st.lists(st.sampled_from(["Mr. Holmes", "the boot", "Watson", "3.5 miles", "e.g. fog", "a hound"]), min_size=1, max_size=6))
def test_segmentation_joins_back(words):
    text = ". ".join(w[0].upper() + w[1:] for w in words) + "."
    sents = segment_sentences(text)
    assert " ".join(sents) == text


def test_triple_requires_text():
    with pytest.raises(ValueError):
        FTPTriple("x", "", "t", "p")
    t = triple(1)
    assert FTPTriple.from_dict(t.to_dict()) == t


def test_category_parse():
    assert Category.parse("Speech Act") is Category.SPEECH_ACT
    assert Category.parse("object") is Category.OBJECT
    with pytest.raises(ValueError):
        Category.parse("weather")


def test_pool_example():
    pool = ForeshadowPool((triple(1), triple(2)))
    assert [t.id for t in pool_pending(pool)] == ["t1", "t2"]
    pool = pool.with_status("t1", Status.ELIGIBLE)
    pool = pool_resolve(pool, ["t1"])
    assert pool.get("t1").status is Status.RESOLVED
    assert [t.id for t in pool.pending()] == ["t2"]
    with pytest.raises(IllegalTransition):
        pool.resolve(["t2"])  # pending cannot skip eligibility
    with pytest.raises(TripleNotFound):
        pool.get("nope")
    with pytest.raises(ValueError):
        pool.add(triple(1))


def test_pool_is_immutable():
    pool = ForeshadowPool((triple(1),))
    new = pool.with_status("t1", Status.ELIGIBLE)
    assert pool.get("t1").status is Status.PENDING
    assert new.get("t1").status is Status.ELIGIBLE


LEGAL = {
    (Status.PENDING, Status.ELIGIBLE),
    (Status.ELIGIBLE, Status.RESOLVED),
    (Status.ELIGIBLE, Status.PENDING),
    (Status.PENDING, Status.VIOLATED),
    (Status.ELIGIBLE, Status.VIOLATED),
}


@given(st.sampled_from(list(Status)), st.sampled_from(list(Status)))
def test_status_machine(a, b):
    pool = ForeshadowPool((triple(1, a),))
    if (a, b) in LEGAL:
        assert pool.with_status("t1", b).get("t1").status is b
    else:
        with pytest.raises(IllegalTransition):
            pool.with_status("t1", b)


@given(st.integers(1, 8), st.lists(st.tuples(st.integers(0, 7), st.sampled_from(list(Status))), max_size=30))
def test_pool_conserves_triples(n, moves):
    pool = ForeshadowPool(tuple(triple(i) for i in range(n)))
    ids = [t.id for t in pool]
    for i, status in moves:
        try:
            pool = pool.with_status(f"t{i}", status)
        except (IllegalTransition, TripleNotFound):
            pass
        assert [t.id for t in pool] == ids  # nothing dropped, order kept
        assert sum(pool.counts().values()) == n


def test_narrative_state_from_text():
    s = NarrativeState.from_text("He left. She stayed.", [triple(1)])
    assert s.sentences == ("He left.", "She stayed.")
    assert s.step == 0 and len(s.pool) == 1
