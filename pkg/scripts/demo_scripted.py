"""Run every CLI stage offline against the shipped scripted fixtures.

    python3 scripts/demo_scripted.py --workdir demo
"""
import argparse
import json
from pathlib import Path

import yaml

from cfpg.cli import main
from cfpg.fixtures import BOOT, CANDLE, LOOP_OPENING, MINING_SUMMARY, tracking_records, write_cli_fixtures
from cfpg.mining import write_dataset


def latest(root: Path, command: str) -> Path:
    return sorted(p for p in root.iterdir() if f"-{command}-" in p.name)[-1]


def run(argv):
    print("$ cfpg " + " ".join(argv))
    code = main(argv)
    if code:
        raise SystemExit(f"cfpg {argv[0]} exited with {code}")


def build_workspace(work: Path) -> None:
    work.mkdir(parents=True, exist_ok=True)
    write_cli_fixtures(work / "fixtures")
    cfg = {
        "fixtures": "fixtures/shared.json",
        "output_root": "runs",
        "backends": {
            "verifier_a": {"fixtures": "fixtures/verifier_a.json"},
            "verifier_b": {"fixtures": "fixtures/verifier_b.json"},
        },
    }
    (work / "scripted.yaml").write_text(yaml.safe_dump(cfg, sort_keys=False))
    (work / "corpus.jsonl").write_text(json.dumps({"book_id": "great-expectations", "summary": " ".join(MINING_SUMMARY)}) + "\n")
    write_dataset(tracking_records(), work / "tracking.jsonl")
    (work / "opening.txt").write_text(LOOP_OPENING + "\n")
    (work / "triples.jsonl").write_text("".join(json.dumps(t.to_dict()) + "\n" for t in (BOOT, CANDLE)))


def main_():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default="demo")
    args = ap.parse_args()
    work = Path(args.workdir).resolve()
    build_workspace(work)
    cfg = str(work / "scripted.yaml")
    runs = work / "runs"

    run(["generate", "--config", cfg, "--story", str(work / "opening.txt"), "--triples", str(work / "triples.jsonl"), "--steps", "3"])
    run(["mine", "--config", cfg, "--corpus", str(work / "corpus.jsonl"), "--out", str(work / "mined.jsonl")])
    run(["stats", "--dataset", str(work / "mined.jsonl")])
    run(["eval-oracle", "--config", cfg, "--dataset", str(work / "tracking.jsonl")])
    run(["eval-tracking", "--config", cfg, "--dataset", str(work / "tracking.jsonl"), "--policy", "all"])
    tracking_run = latest(runs, "eval-tracking")
    run(["errors", "--run", str(tracking_run)])
    run(["dynamics", "--config", cfg, "--dataset", str(work / "tracking.jsonl"), "--radius", "3"])
    run(["report", "--run", str(latest(runs, "dynamics")), "--format", "plotdata"])
    print(f"\nrun directories are under {runs}")


if __name__ == "__main__":
    main_()
