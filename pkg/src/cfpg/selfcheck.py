"""Run the shipped scripted scenarios end to end and compare against hand-traced results."""
from __future__ import annotations

from .engine import run_loop
from .fixtures import (
    LOOP_EXPECTED,
    MINING_EXPECTED,
    MINING_EXPECTED_PAIRS,
    loop_scenario,
    mining_scenario,
    tracking_scenario,
)
from .mining import MiningConfig, mine
from .tracking import classify_outcome, evaluate_tracking

TRACKING_EXPECTED = {
    ("cfpg", "hound"): ("correct", 10),
    ("cfpg", "lighthouse"): ("correct", 7),
    ("cfpg", "ring"): ("correct", 9),
    ("fap", "hound"): ("early", 4),
    ("fap", "lighthouse"): ("correct", 7),
    ("fap", "ring"): ("miss", None),
}


def check_loop() -> list[str]:
    state, backends, config, steps = loop_scenario()
    _, traces = run_loop(state, backends, steps, config)
    got = [
        {"step": t.step, "eligible": list(t.eligible.members), "resolved": list(t.resolved),
         "prefix": (t.prefix_len_before, t.prefix_len_after)}
        for t in traces
    ]
    return [] if got == LOOP_EXPECTED else [f"loop: expected {LOOP_EXPECTED}, got {got}"]


def check_mining() -> list[str]:
    corpus, backends = mining_scenario()
    records, report = mine(corpus, backends, MiningConfig())
    problems = []
    total = report.total.as_dict()
    if total != MINING_EXPECTED:
        problems.append(f"mining funnel: expected {MINING_EXPECTED}, got {total}")
    pairs = [(r.t_f, r.t_p) for r in records]
    if pairs != MINING_EXPECTED_PAIRS:
        problems.append(f"mining pairs: expected {MINING_EXPECTED_PAIRS}, got {pairs}")
    return problems


def check_truth_table(tolerance: int = 3) -> list[str]:
    problems = []
    t_p = 20
    for fired in [None, *range(t_p - 5, t_p + 6)]:
        want = "miss" if fired is None else "correct" if abs(fired - t_p) <= tolerance else "early" if fired < t_p else "late"
        if classify_outcome(fired, t_p, tolerance) != want:
            problems.append(f"outcome for fired_at={fired}: expected {want}")
    return problems


def check_tracking() -> list[str]:
    problems = []
    for policy in ("cfpg", "fap"):
        records, backends = tracking_scenario()
        for o in evaluate_tracking(records, policy, backends):
            want = TRACKING_EXPECTED[(policy, o.record_id.split("#")[0])]
            if (o.outcome, o.fired_at) != want:
                problems.append(f"tracking {policy} {o.record_id}: expected {want}, got {(o.outcome, o.fired_at)}")
    return problems


CHECKS = {"loop": check_loop, "mining": check_mining, "truth-table": check_truth_table, "tracking": check_tracking}


def run_selfcheck(out=print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        try:
            problems = fn()
        except Exception as e:  # report, keep going
            problems = [f"{type(e).__name__}: {e}"]
        out(f"{name}: {'ok' if not problems else 'FAILED'}")
        for p in problems:
            out(f"  {p}")
        ok = ok and not problems
    return ok
