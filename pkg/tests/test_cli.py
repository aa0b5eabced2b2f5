import json
from pathlib import Path

import pytest
import yaml

from cfpg.cli import build_report, main
from cfpg.fixtures import BOOT, CANDLE, LOOP_OPENING, MINING_SUMMARY, tracking_records, write_cli_fixtures
from cfpg.mining import write_dataset


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    write_cli_fixtures(tmp_path / "fx")
    cfg = {
        "fixtures": "fx/shared.json",
        "output_root": "runs",
        "backends": {"verifier_a": {"fixtures": "fx/verifier_a.json"}, "verifier_b": {"fixtures": "fx/verifier_b.json"}},
    }
    (tmp_path / "cfg.yaml").write_text(yaml.safe_dump(cfg))
    (tmp_path / "corpus.jsonl").write_text(json.dumps({"book_id": "ge", "summary": " ".join(MINING_SUMMARY)}) + "\n")
    write_dataset(tracking_records(), tmp_path / "track.jsonl")
    return tmp_path


def run_dir(root: Path, command: str) -> Path:
    (path,) = [p for p in (root / "runs").iterdir() if f"-{command}-" in p.name]
    return path


def test_mine_and_stats(workspace, capsys):
    assert main(["mine", "--corpus", "corpus.jsonl", "--config", "cfg.yaml", "--out", "mined.jsonl"]) == 0
    run = run_dir(workspace, "mine")
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["status"] == "complete"
    assert json.loads((run / "funnel.json").read_text())["total"] == {"candidates": 4, "stage2": 3, "retained": 2, "dropped_stage1": 3}
    assert main(["stats", "--dataset", "mined.jsonl", "--out-dir", "st"]) == 0
    assert "Avg. Payoff Distance (sentences)  7.00" in capsys.readouterr().out
    assert (workspace / "st" / "distance_density.csv").exists()


def test_eval_tracking_errors_report(workspace, capsys):
    assert main(["eval-tracking", "--dataset", "track.jsonl", "--config", "cfg.yaml", "--policy", "all"]) == 0
    run = run_dir(workspace, "eval-tracking")
    lines = (run / "outcomes.jsonl").read_text().splitlines()
    assert len(lines) == 9
    assert main(["errors", "--run", str(run)]) == 0
    errors = run_dir(workspace, "errors")
    assert len((errors / "errors.jsonl").read_text().splitlines()) == 4
    capsys.readouterr()
    assert main(["report", "--run", str(run)]) == 0
    out = capsys.readouterr().out
    assert "cfpg    100.0" in out and "fap     33.3" in out
    assert "Premature" in build_report(errors, "table")


def test_oracle_and_dynamics(workspace, capsys):
    assert main(["eval-oracle", "--dataset", "track.jsonl", "--config", "cfg.yaml"]) == 0
    assert "1.000" in capsys.readouterr().out
    assert main(["dynamics", "--dataset", "track.jsonl", "--config", "cfg.yaml", "--policy", "cfpg", "--radius", "2"]) == 0
    run = run_dir(workspace, "dynamics")
    plot = build_report(run, "plotdata").splitlines()
    assert plot[0] == "x,cfpg" and plot[1].startswith("-2,")


def test_generate(workspace):
    (workspace / "story.txt").write_text(LOOP_OPENING)
    (workspace / "triples.jsonl").write_text("".join(json.dumps(t.to_dict()) + "\n" for t in (BOOT, CANDLE)))
    assert main(["generate", "--story", "story.txt", "--triples", "triples.jsonl", "--config", "cfg.yaml", "--steps", "3"]) == 0
    run = run_dir(workspace, "generate")
    assert len((run / "traces.jsonl").read_text().splitlines()) == 3
    assert len((run / "story.txt").read_text().splitlines()) == 9


def test_generate_backend_failure_is_partial(workspace):
    (workspace / "story.txt").write_text("Nobody knows this story. It has no fixtures.")
    (workspace / "triples.jsonl").write_text(json.dumps({"id": "x", "foreshadow": "f", "trigger": "t", "payoff": "p"}) + "\n")
    (workspace / "thin.yaml").write_text("fixtures: fx/verifier_a.json\n")  # cannot answer the gate
    assert main(["generate", "--story", "story.txt", "--triples", "triples.jsonl", "--config", "thin.yaml", "--out-root", "runs"]) == 2
    run = run_dir(workspace, "generate")
    assert json.loads((run / "manifest.json").read_text())["status"] == "partial"


def test_validation_exit_codes(workspace):
    assert main(["stats", "--dataset", "nope.jsonl"]) == 1
    assert main(["eval-tracking", "--dataset", "track.jsonl", "--config", "cfg.yaml", "--tolerance", "-1"]) == 1
    assert main(["report", "--run", str(workspace)]) == 1


def test_partial_exit_code(workspace):
    (workspace / "corpus.jsonl").write_text(
        json.dumps({"book_id": "ge", "summary": " ".join(MINING_SUMMARY)}) + "\n" + json.dumps({"book_id": "short", "summary": "One."}) + "\n"
    )
    assert main(["mine", "--corpus", "corpus.jsonl", "--config", "cfg.yaml"]) == 3
    assert json.loads((run_dir(workspace, "mine") / "manifest.json").read_text())["status"] == "partial"


def test_selfcheck(capsys):
    assert main(["selfcheck"]) == 0
    assert "tracking: ok" in capsys.readouterr().out
