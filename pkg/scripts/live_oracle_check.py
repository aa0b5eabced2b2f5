"""Oracle-timing comparison (prompt vs codified gate) against a live OpenAI-compatible endpoint.

    python3 scripts/live_oracle_check.py --endpoint http://localhost:8000/v1 \
        --model my-model --dataset data/dataset.jsonl --limit 50 --cache-dir cache

Prints both rows and whether the codified policy beats the plain prompt on
average entailment and matches or exceeds the prompt's implied activation
(the share of prompt continuations judged to entail the gold payoff).
"""
import argparse
import sys

from cfpg.backends import BackendSet, HTTPBackend, cached, set_parallelism
from cfpg.metrics import ORACLE_COLUMNS, aggregate_oracle, render_table
from cfpg.mining import read_dataset
from cfpg.tracking import EvalConfig, evaluate_oracle


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--endpoint", required=True)
    ap.add_argument("--model", required=True)
    ap.add_argument("--judge-model", help="defaults to --model")
    ap.add_argument("--dataset", required=True)
    ap.add_argument("--limit", type=int, default=50)
    ap.add_argument("--parallelism", type=int, default=4)
    ap.add_argument("--cache-dir")
    args = ap.parse_args()

    records = read_dataset(args.dataset)[: args.limit]
    if len(records) < 50:
        print(f"warning: only {len(records)} records; the check wants at least 50", file=sys.stderr)
    set_parallelism(args.parallelism)
    gen = HTTPBackend(args.endpoint, args.model)
    judge = HTTPBackend(args.endpoint, args.judge_model or args.model)
    if args.cache_dir:
        gen, judge = cached(gen, args.cache_dir), cached(judge, args.cache_dir)
    backends = BackendSet(generator=gen, judge=judge)
    config = EvalConfig(parallelism=args.parallelism)

    prompt = evaluate_oracle(records, "prompt", backends, config)
    cfpg = evaluate_oracle(records, "cfpg", backends, config)
    rows = [aggregate_oracle(prompt, "prompt"), aggregate_oracle(cfpg, "cfpg")]
    print(render_table(rows, ORACLE_COLUMNS))

    scored = [r for r in prompt if r.error is None]
    implied = sum(r.label == "entails" for r in scored) / len(scored) if scored else 0.0
    gate_ok = (rows[1].should_payoff_rate or 0.0) >= implied
    score_ok = (rows[1].avg_entailment or 0.0) > (rows[0].avg_entailment or 0.0)
    print(f"prompt implied activation: {implied:.3f}")
    print(f"should-payoff >= implied activation: {gate_ok}")
    print(f"codified avg score > prompt avg score: {score_ok}")
    return 0 if gate_ok and score_ok else 1


if __name__ == "__main__":
    sys.exit(main())
