"""Acceptance suite. Each test is tagged with the criterion it checks; the
terminal summary prints one ``criterion N: PASS|FAIL|SKIP`` line per criterion.
"""
import hashlib
import json
import math
import os
import random
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
import yaml

from cfpg.backends import Backend, BackendSet, ChatRequest, Decoding, Message, Rule, ScriptedBackend
from cfpg.cli import main
from cfpg.core import Category
from cfpg.engine import run_loop
from cfpg.fixtures import (
    LOOP_EXPECTED,
    MINING_EXPECTED,
    MINING_EXPECTED_PAIRS,
    loop_scenario,
    mining_scenario,
    no,
    tracking_records,
    tracking_rules,
    tracking_scenario,
    yes,
)
from cfpg.metrics import aggregate_oracle, aggregate_tracking, dataset_stats
from cfpg.mining import RUBRIC_KEYS, Candidate, DatasetRecord, mine, read_dataset, stage3_rubric, write_dataset
from cfpg.tracking import (
    POLICIES,
    EvalConfig,
    TrackingOutcome,
    classify_outcome,
    entailment_score,
    evaluate_oracle,
    make_outcome,
    oracle_timing_eval,
    track_grounded,
)

criterion = pytest.mark.criterion


# --- 1: scripted end-to-end loop ----------------------------------------------------------


@criterion(1)
def test_loop_reproduces_hand_trace_deterministically(tmp_path):
    start = time.perf_counter()
    blobs = []
    for run in range(5):
        state, backends, config, steps = loop_scenario()
        log = tmp_path / f"trace{run}.jsonl"
        final, traces = run_loop(state, backends, steps, config, trace_log=log)
        got = [{"step": t.step, "eligible": list(t.eligible.members), "resolved": list(t.resolved),
                "prefix": (t.prefix_len_before, t.prefix_len_after)} for t in traces]
        assert got == LOOP_EXPECTED
        assert final.pool.counts() == {"pending": 0, "eligible": 0, "resolved": 2, "violated": 0}
        blobs.append(log.read_bytes())
    assert len(set(blobs)) == 1
    assert time.perf_counter() - start < 5.0


# --- 2: outcome truth table ------------------------------------------------------------------


def forced(fired, t_p, tol=3):
    if fired is None:
        return "miss"
    if fired < t_p - tol:
        return "early"
    if fired > t_p + tol:
        return "late"
    return "correct"


@criterion(2)
def test_outcome_truth_table():
    t_p = 10
    mismatches = []
    for fired in [*range(t_p - 5, t_p + 6), None]:
        if classify_outcome(fired, t_p, 3) != forced(fired, t_p):
            mismatches.append(fired)
    assert mismatches == []


@criterion(2)
def test_truth_table_through_track_grounded():
    """Drive the real scan with a detector that fires at a chosen sentence."""
    sentences = tuple(f"Line {i} of the tale." for i in range(24))
    record = DatasetRecord("tt", sentences, 2, 12, "It pays off.", Category.EVENT, 1.0)
    mismatches = []
    for fired in [*range(7, 18), None]:
        rules = [Rule(("Task: codified payoff detection.", sentences[fired]), yes())] if fired is not None else []
        rules += [
            Rule(("Task: codified payoff detection.",), no()),
            Rule(("Task: continue story.",), "It pays off now."),
        ]
        judge = ScriptedBackend(responders=[Rule(("Task: narrative entailment.",), "ANSWER: entails")])
        out = track_grounded(record, "cfpg", BackendSet(generator=ScriptedBackend(responders=rules), judge=judge))
        if (out.outcome, out.fired_at) != (forced(fired, 12), fired):
            mismatches.append(fired)
    assert mismatches == []


# --- 3: metric oracle equivalence ----------------------------------------------------------


def brute_force(outcomes, tol):
    scorable = correct = early = late = miss = 0
    loc_sum, loc_n, win_sum, win_n, cont_sum, cont_n = 0.0, 0, 0.0, 0, 0.0, 0
    for o in outcomes:
        if o.outcome == "errored":
            continue
        scorable += 1
        if o.fired_at is None:
            miss += 1
            continue
        d = abs(o.fired_at - o.t_p)
        loc_sum += d
        loc_n += 1
        if d <= tol:
            correct += 1
            win_sum += d
            win_n += 1
            if o.trajectory_score is not None:
                cont_sum += o.trajectory_score
                cont_n += 1
        elif o.fired_at < o.t_p:
            early += 1
        else:
            late += 1
    return {
        "detection_pct": correct / scorable if scorable else 0.0,
        "early": early,
        "late": late,
        "miss": miss,
        "loc_error_mean": loc_sum / loc_n if loc_n else None,
        "loc_error_in_window_mean": win_sum / win_n if win_n else None,
        "continuation_mean": cont_sum / cont_n if cont_n else None,
    }


def random_batch(rng, tol):
    out = []
    for i in range(rng.randint(0, 40)):
        t_p = rng.randint(1, 300)
        if rng.random() < 0.05:
            out.append(TrackingOutcome(f"r{i}", "m", t_p, None, "errored", None, error="x"))
            continue
        fired = None if rng.random() < 0.2 else rng.randint(0, 320)
        o = make_outcome(f"r{i}", "m", t_p, fired, tol)
        if o.outcome == "correct" and rng.random() < 0.9:
            o = make_outcome(f"r{i}", "m", t_p, fired, tol, trajectory_score=rng.choice([0.0, 0.5, 1.0]))
        out.append(o)
    return out


@criterion(3)
def test_metrics_match_brute_force():
    rng = random.Random(1234)
    mismatches = 0
    for _ in range(1500):
        tol = rng.randint(0, 6)
        batch = random_batch(rng, tol)
        row = aggregate_tracking(batch, "m", tol)
        want = brute_force(batch, tol)
        for key, expected in want.items():
            got = getattr(row, key)
            if expected is None or got is None:
                mismatches += expected is not got
            elif not math.isclose(got, expected, rel_tol=0, abs_tol=1e-9):
                mismatches += 1
    assert mismatches == 0


# --- 4: entailment score map -----------------------------------------------------------------


@criterion(4)
def test_entailment_score_map():
    assert {label: entailment_score(label) for label in ("entails", "neutral", "contradicts")} == {
        "entails": 1.0, "neutral": 0.5, "contradicts": 0.0,
    }


@criterion(4)
def test_twenty_instance_suite():
    labels = ["entails"] * 12 + ["neutral"] * 5 + ["contradicts"] * 3
    random.Random(7).shuffle(labels)
    records, judge_rules = [], []
    for i, label in enumerate(labels):
        sents = tuple(f"Story {i} sentence {j}." for j in range(6))
        records.append(DatasetRecord(f"s{i:02d}", sents, 0, 5, f"Promise {i} is kept.", Category.EVENT, 1.0))
        judge_rules.append(Rule(("Task: narrative entailment.", f"Reference continuation: {sents[5]}"), f"ANSWER: {label}\nCONFIDENCE: 0.9"))
    gen = ScriptedBackend(responders=[
        Rule(("Task: trigger gate.",), yes()),
        Rule(("Task: continue story",), "Something happens."),
    ])
    backends = BackendSet(generator=gen, judge=ScriptedBackend(responders=judge_rules))
    results = evaluate_oracle(records, "cfpg", backends)
    by_id = {r.record_id: r.label for r in results}
    assert [by_id[r.record_id] for r in records] == labels
    row = aggregate_oracle(results, "cfpg")
    assert row.avg_entailment == (12 * 1.0 + 5 * 0.5 + 3 * 0.0) / 20 == 0.725
    assert row.should_payoff_rate == 1.0


# --- 5: mining funnel ----------------------------------------------------------------------


@criterion(5)
def test_mining_funnel():
    corpus, backends = mining_scenario()
    records, report = mine(corpus, backends)
    assert report.total.as_dict() == MINING_EXPECTED
    assert (MINING_EXPECTED["candidates"], MINING_EXPECTED["stage2"], MINING_EXPECTED["retained"]) == (4, 3, 2)
    assert len(records) == 2
    assert [(r.t_f, r.t_p) for r in records] == MINING_EXPECTED_PAIRS
    for r in records:
        rubric = r.provenance["stage3"]
        assert len(rubric) == 2
        assert all(v[k] for v in rubric for k in ("setup_valid", "payoff_valid", "temporal_separated", "hindsight_justified"))


@criterion(5)
def test_rubric_unanimity_toggles():
    summary = [f"Sentence {i} of the summary." for i in range(6)]
    cand = Candidate(0, 4, "link", Category.EVENT)

    def verifier(values, name):
        text = "\n".join(f"{k}: {'yes' if v else 'no'}" for k, v in zip(RUBRIC_KEYS, values)) + "\nCONFIDENCE: 0.9"
        return ScriptedBackend(responders=[Rule(("Task: foreshadow rubric.",), text)], name=name)

    retained, _ = stage3_rubric(cand, summary, (verifier([True] * 4, "a"), verifier([True] * 4, "b")))
    assert retained
    for flip in range(8):
        bits = [True] * 8
        bits[flip] = False
        retained, _ = stage3_rubric(cand, summary, (verifier(bits[:4], "a"), verifier(bits[4:], "b")))
        assert not retained, f"boolean {flip} did not reject"


# --- 6: dataset statistics -----------------------------------------------------------------


@criterion(6)
def test_dataset_stats_twenty_records():
    distances = list(range(1, 20)) + [100]
    cats = [Category.EVENT] * 10 + [Category.OBJECT] * 5 + [Category.SPEECH_ACT] * 3 + [Category.RULE, Category.SYMBOL]
    records = [
        DatasetRecord(f"b{i % 4}", tuple(f"S{j}." for j in range(d + 2)), 1, 1 + d, f"d{i}", cat, 0.9)
        for i, (d, cat) in enumerate(zip(distances, cats))
    ]
    s = dataset_stats(records)
    assert s.distance == {"mean": 14.5, "median": 10, "p75": 15, "p90": 18, "max": 100}
    assert s.type_distribution == {"object": 0.25, "event": 0.5, "speech-act": 0.15, "rule": 0.05, "symbol": 0.05}
    assert s.n_foreshadows == 20 and s.n_books == 4


@criterion(6)
@pytest.mark.skipif(not os.environ.get("CFPG_REFERENCE_DATASET"), reason="set CFPG_REFERENCE_DATASET to a released dataset JSONL")
def test_released_dataset_stats():
    s = dataset_stats(read_dataset(os.environ["CFPG_REFERENCE_DATASET"]))
    assert s.n_foreshadows == 629
    assert round(s.distance["mean"], 1) == 20.9
    assert s.distance["median"] == 13
    assert s.distance["p75"] == 29 and s.distance["p90"] == 45 and s.distance["max"] == 230


# --- 7: no future access --------------------------------------------------------------------


class FutureSpy(Backend):
    """Wraps a backend and flags any request that quotes a sentence past the horizon."""

    def __init__(self, inner, record):
        self.inner = inner
        self.record = record
        self.horizon = -1
        self.requests = 0
        self.violations = []

    @property
    def identity(self):
        return self.inner.identity

    @property
    def decoding(self):
        return self.inner.decoding

    def complete(self, request):
        self.requests += 1
        text = request.text
        for i in range(self.horizon + 1, len(self.record.sentences)):
            if self.record.sentences[i] in text:
                self.violations.append((self.record.record_id, self.horizon, i))
        return self.inner.complete(request)


@criterion(7)
def test_no_future_access():
    violations, requests = [], 0
    for policy in POLICIES:
        records, backends = tracking_scenario()
        for record in records:
            spy = FutureSpy(backends.generator, record)
            spied = BackendSet(generator=spy, judge=backends.judge)
            track_grounded(record, policy, spied, EvalConfig(), on_step=lambda i, spy=spy: setattr(spy, "horizon", i))
            violations += spy.violations
            requests += spy.requests
    for policy in ("prompt", "cfpg"):
        records, backends = tracking_scenario()
        for record in records:
            spy = FutureSpy(backends.generator, record)
            spy.horizon = record.t_p - 1
            oracle_timing_eval(record, policy, BackendSet(generator=spy, judge=backends.judge))
            violations += spy.violations
            requests += spy.requests
    assert requests > 30
    assert violations == []


@criterion(7)
def test_spy_catches_a_leak():
    records, backends = tracking_scenario()
    record = records[0]
    spy = FutureSpy(backends.generator, record)
    spy.horizon = 3
    spy.complete(ChatRequest((Message("user", "Task: payoff detection. " + record.sentences[5]),)))
    assert spy.violations == [(record.record_id, 3, 5)]


# --- 8: replay determinism -------------------------------------------------------------------


class ScriptedServer:
    """OpenAI-compatible chat endpoint answered by a ScriptedBackend."""

    def __init__(self, backend):
        self.backend = backend
        self.hits = 0
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                messages = tuple(Message(m["role"], m["content"]) for m in body["messages"])
                request = ChatRequest(messages, Decoding(temperature=body.get("temperature", 0.0), seed=body.get("seed")))
                outer.hits += 1
                try:
                    text = outer.backend.complete(request)
                    payload = {"choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": "stop"}]}
                    status = 200
                except Exception as e:
                    payload, status = {"error": str(e)}, 400
                data = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self):
        return f"http://127.0.0.1:{self.server.server_address[1]}/v1"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


def _hash(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@criterion(8)
def test_live_then_replay_is_hash_equal(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    write_dataset(tracking_records(), tmp_path / "track.jsonl")
    rules = tracking_rules()
    backend = ScriptedBackend(responders=rules["generator"] + rules["judge"], name="server")

    def config(url, retries):
        live = {"endpoint": url, "model": "scripted-model", "max_retries": retries, "api_key_env": "CFPG_TEST_KEY"}
        return {
            "mode": "live",
            "cache_dir": "cache",
            "output_root": "runs",
            "backends": {"generator": live, "judge": live, "verifier_b": {**live, "temperature": 0.5}},
        }

    with ScriptedServer(backend) as server:
        (tmp_path / "live.yaml").write_text(yaml.safe_dump(config(server.url, 2)))
        assert main(["eval-tracking", "--dataset", "track.jsonl", "--config", "live.yaml", "--policy", "all"]) == 0
        assert main(["eval-oracle", "--dataset", "track.jsonl", "--config", "live.yaml"]) == 0
        url = server.url
    assert server.hits > 0
    live_runs = sorted((tmp_path / "runs").iterdir())

    # the server is gone; a replay can only succeed from the cache
    (tmp_path / "replay.yaml").write_text(yaml.safe_dump({**config(url, 0), "output_root": "replay"}))
    assert main(["eval-tracking", "--dataset", "track.jsonl", "--config", "replay.yaml", "--policy", "all"]) == 0
    assert main(["eval-oracle", "--dataset", "track.jsonl", "--config", "replay.yaml"]) == 0
    replay_runs = sorted((tmp_path / "replay").iterdir())

    for live, replay in zip(live_runs, replay_runs):
        for name in ("outcomes.jsonl", "oracle.jsonl", "metrics.jsonl"):
            if (live / name).exists():
                assert _hash(live / name) == _hash(replay / name), name
        stats = json.loads((replay / "manifest.json").read_text())["cache_stats"]
        assert all(s["misses"] == 0 and s["hits"] > 0 for s in stats.values() if s["hits"] or s["misses"])
    assert sum(1 for r in live_runs for n in ("outcomes.jsonl", "oracle.jsonl") if (r / n).exists()) == 2


# --- 9: optional live check --------------------------------------------------------------------


@criterion(9)
@pytest.mark.skipif(not os.environ.get("CFPG_LIVE_ENDPOINT"), reason="set CFPG_LIVE_ENDPOINT, CFPG_LIVE_MODEL and CFPG_LIVE_DATASET")
def test_live_oracle_direction():
    from cfpg.backends import HTTPBackend
    from cfpg.tracking import ORACLE_POLICIES

    endpoint, model = os.environ["CFPG_LIVE_ENDPOINT"], os.environ["CFPG_LIVE_MODEL"]
    records = read_dataset(os.environ["CFPG_LIVE_DATASET"])[: int(os.environ.get("CFPG_LIVE_LIMIT", "50"))]
    assert len(records) >= 50
    gen = HTTPBackend(endpoint, model)
    judge_model = os.environ.get("CFPG_LIVE_JUDGE_MODEL", model)
    backends = BackendSet(generator=gen, judge=HTTPBackend(endpoint, judge_model))
    rows = {p: aggregate_oracle(evaluate_oracle(records, p, backends, EvalConfig(parallelism=4)), p) for p in ORACLE_POLICIES}
    prompt_results = evaluate_oracle(records, "prompt", backends)
    implied = sum(r.label == "entails" for r in prompt_results if r.error is None) / max(1, len(prompt_results))
    assert rows["cfpg"].should_payoff_rate >= implied
    assert rows["cfpg"].avg_entailment > rows["prompt"].avg_entailment
