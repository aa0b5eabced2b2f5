"""Command-line entry point: ``cfpg <command> ...``.

Exit codes: 0 success, 1 validation error, 2 backend/transport failure,
3 partial completion (some books or records errored).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .backends import BackendError
from .config import ConfigError, RunConfig, RunDir, apply_overrides, build_backends, config_from_dict, load_config, new_run
from .core import FTPTriple, NarrativeState
from .engine import EngineConfig, RunAborted, run_loop
from .metrics import (
    ORACLE_COLUMNS,
    aggregate_oracle,
    aggregate_tracking,
    dataset_stats,
    distance_plotdata,
    render_csv,
    render_stats,
    render_table,
    type_plotdata,
)
from .mining import MiningConfig, mine, read_corpus, read_dataset, write_dataset
from .tracking import (
    CONFIDENCE_NOTE,
    ORACLE_POLICIES,
    POLICIES,
    ConfidenceTrajectory,
    ErrorCase,
    EvalConfig,
    OracleResult,
    TrackingOutcome,
    attribute_errors,
    average_trajectories,
    decision_dynamics,
    decision_jump,
    error_distribution,
    evaluate_oracle,
    evaluate_tracking,
    run_batch,
)

log = logging.getLogger("cfpg")

EXIT_OK, EXIT_INVALID, EXIT_BACKEND, EXIT_PARTIAL = 0, 1, 2, 3


def write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r.to_dict() if hasattr(r, "to_dict") else r, ensure_ascii=False) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    overrides = {
        "output_root": getattr(args, "out_root", None),
        "tolerance": getattr(args, "tolerance", None),
        "window": getattr(args, "window", None),
        "fscr_window": getattr(args, "fscr_window", None),
        "k": getattr(args, "k", None),
        "min_gap": getattr(args, "min_gap", None),
        "radius": getattr(args, "radius", None),
        "parallelism": getattr(args, "parallelism", None),
        "cache_dir": getattr(args, "cache_dir", None),
        "no_extract": True if getattr(args, "no_extract", False) else None,
    }
    return apply_overrides(cfg, **overrides)


def _eval_config(cfg: RunConfig) -> EvalConfig:
    return EvalConfig(
        tolerance=cfg.tolerance,
        prefix_window=cfg.prefix_window,
        fscr_window=cfg.fscr_window,
        k=cfg.k,
        radius=cfg.radius,
        max_output_sentences=cfg.max_output_sentences,
        parallelism=cfg.parallelism,
        templates=cfg.templates(),
    )


def _limit(records, n):
    return records[:n] if n else records


# --- commands --------------------------------------------------------------------


def cmd_mine(args) -> int:
    cfg = _config(args)
    backends = build_backends(cfg)
    corpus = read_corpus(args.corpus)
    run = new_run(cfg, "mine", backends, corpus=args.corpus)
    mcfg = MiningConfig(window=cfg.window, min_gap=cfg.min_gap, parallelism=cfg.parallelism, templates=cfg.templates())
    records, report = mine(corpus, backends, mcfg)
    out = Path(args.out) if args.out else run.file("dataset.jsonl")
    write_dataset(records, out)
    if out.resolve() != run.file("dataset.jsonl").resolve():
        write_dataset(records, run.file("dataset.jsonl"))
    run.file("funnel.json").write_text(json.dumps(report.as_dict(), indent=2) + "\n", encoding="utf-8")
    status = "partial" if report.errored else "complete"
    run.finish(status, backends)
    print(json.dumps(report.total.as_dict() if report.books else {}))
    print(f"wrote {len(records)} records to {out} (run: {run.path})")
    return EXIT_PARTIAL if report.errored else EXIT_OK


def cmd_eval_oracle(args) -> int:
    cfg = _config(args)
    backends = build_backends(cfg)
    records = _limit(read_dataset(args.dataset), args.limit)
    run = new_run(cfg, "eval-oracle", backends, dataset=args.dataset)
    policies = ORACLE_POLICIES if args.policy == "both" else (args.policy,)
    results = []
    for policy in policies:
        results += evaluate_oracle(records, policy, backends, _eval_config(cfg))
    write_jsonl(run.file("oracle.jsonl"), results)
    rows = [aggregate_oracle([r for r in results if r.policy == p], p) for p in policies]
    write_jsonl(run.file("metrics.jsonl"), rows)
    errored = any(r.error for r in results)
    run.finish("partial" if errored else "complete", backends)
    print(render_table(rows, ORACLE_COLUMNS))
    print(f"run: {run.path}")
    return EXIT_PARTIAL if errored else EXIT_OK


def cmd_eval_tracking(args) -> int:
    cfg = _config(args)
    backends = build_backends(cfg)
    records = _limit(read_dataset(args.dataset), args.limit)
    run = new_run(cfg, "eval-tracking", backends, dataset=args.dataset)
    policies = POLICIES if args.policy == "all" else (args.policy,)
    outcomes = []
    for policy in policies:
        outcomes += evaluate_tracking(records, policy, backends, _eval_config(cfg))
    write_jsonl(run.file("outcomes.jsonl"), outcomes)
    rows = [aggregate_tracking([o for o in outcomes if o.policy == p], p, cfg.tolerance) for p in policies]
    write_jsonl(run.file("metrics.jsonl"), rows)
    errored = any(o.outcome == "errored" for o in outcomes)
    run.finish("partial" if errored else "complete", backends)
    print(render_table(rows))
    print(f"run: {run.path}")
    return EXIT_PARTIAL if errored else EXIT_OK


def cmd_dynamics(args) -> int:
    cfg = _config(args)
    backends = build_backends(cfg)
    records = _limit(read_dataset(args.dataset), args.limit)
    run = new_run(cfg, "dynamics", backends, dataset=args.dataset)
    policies = ("fap", "cfpg") if args.policy == "both" else (args.policy,)
    ecfg = _eval_config(cfg)
    trajectories = []
    failed = []
    for policy in policies:
        trajectories += run_batch(
            records,
            lambda r, p=policy: decision_dynamics(r, p, backends, cfg.radius, ecfg),
            cfg.parallelism,
            lambda r, e: failed.append(r.record_id),
        )
    trajectories = [t for t in trajectories if isinstance(t, ConfidenceTrajectory)]
    write_jsonl(run.file("dynamics.jsonl"), trajectories)
    run.finish("partial" if failed else "complete", backends, confidence_note=CONFIDENCE_NOTE)
    for policy in policies:
        curve = average_trajectories([t for t in trajectories if t.policy == policy])
        print(f"{policy}: jump at gold boundary = {decision_jump(curve)}")
    print(f"# {CONFIDENCE_NOTE}")
    print(f"run: {run.path}")
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_errors(args) -> int:
    source = RunDir.open(args.run)
    outcomes_path = source.file("outcomes.jsonl")
    if not outcomes_path.exists():
        raise ConfigError(f"{args.run} has no outcomes.jsonl; run eval-tracking first")
    cfg = load_config(args.config) if args.config else config_from_dict(source.manifest["config"])
    if args.out_root:
        cfg = apply_overrides(cfg, output_root=args.out_root)
    dataset = args.dataset or source.manifest.get("inputs", {}).get("dataset", {}).get("path")
    if not dataset:
        raise ConfigError("cannot find the dataset for this run; pass --dataset")
    records = {r.record_id: r for r in read_dataset(dataset)}
    outcomes = [TrackingOutcome.from_dict(d) for d in read_jsonl(outcomes_path)]
    failures = [(o, records[o.record_id]) for o in outcomes if o.outcome in ("early", "late", "miss")]
    backends = build_backends(cfg)
    run = new_run(cfg, "errors", backends, dataset=dataset, source_run=str(Path(args.run) / "manifest.json"))
    cases = attribute_errors(failures, backends, _eval_config(cfg))
    write_jsonl(run.file("errors.jsonl"), cases)
    unclassified = sum(1 for c in cases if c.category is None)
    run.finish("complete", backends, source_run=str(args.run), unclassified=unclassified)
    print(json.dumps(error_distribution(cases), indent=2))
    print(f"run: {run.path}")
    return EXIT_OK


def cmd_stats(args) -> int:
    records = read_dataset(args.dataset)
    stats = dataset_stats(records)
    print(render_stats(stats))
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stats.json").write_text(json.dumps(stats.to_dict(), indent=2) + "\n", encoding="utf-8")
        (out / "distance_density.csv").write_text(distance_plotdata(records), encoding="utf-8")
        (out / "type_distribution.csv").write_text(type_plotdata(stats), encoding="utf-8")
    return EXIT_OK


def build_report(run_path: Path, fmt: str) -> str:
    """Tables from the files in a run directory; no backend access."""
    run = RunDir.open(run_path)
    tolerance = run.manifest.get("config", {}).get("tolerance", 3)
    parts = []
    if run.file("outcomes.jsonl").exists():
        outcomes = [TrackingOutcome.from_dict(d) for d in read_jsonl(run.file("outcomes.jsonl"))]
        policies = sorted({o.policy for o in outcomes}, key=lambda p: POLICIES.index(p))
        rows = [aggregate_tracking([o for o in outcomes if o.policy == p], p, tolerance) for p in policies]
        if fmt == "table":
            parts.append(render_table(rows))
        elif fmt == "csv":
            parts.append(render_csv(rows).rstrip("\n"))
    if run.file("oracle.jsonl").exists():
        results = [OracleResult.from_dict(d) for d in read_jsonl(run.file("oracle.jsonl"))]
        policies = [p for p in ORACLE_POLICIES if any(r.policy == p for r in results)]
        rows = [aggregate_oracle([r for r in results if r.policy == p], p) for p in policies]
        if fmt == "table":
            parts.append(render_table(rows, ORACLE_COLUMNS))
        elif fmt == "csv":
            parts.append(render_csv(rows, ORACLE_COLUMNS).rstrip("\n"))
    if run.file("dynamics.jsonl").exists():
        trajs = [ConfidenceTrajectory.from_dict(d) for d in read_jsonl(run.file("dynamics.jsonl"))]
        policies = sorted({t.policy for t in trajs})
        curves = {p: average_trajectories([t for t in trajs if t.policy == p]) for p in policies}
        offsets = sorted({d for c in curves.values() for d in c})
        if fmt == "plotdata":
            lines = ["x," + ",".join(policies)]
            for d in offsets:
                lines.append(f"{d}," + ",".join("" if d not in curves[p] else repr(curves[p][d]) for p in policies))
            parts.append("\n".join(lines))
        else:
            parts.append(f"# {CONFIDENCE_NOTE}")
            for p in policies:
                jump = decision_jump(curves[p])
                pts = " ".join(f"{d}:{curves[p][d]:.3f}" for d in offsets if d in curves[p])
                parts.append(f"{p}: jump={'n/a' if jump is None else f'{jump:+.3f}'} {pts}")
    if run.file("errors.jsonl").exists():
        cases = [ErrorCase.from_dict(d) for d in read_jsonl(run.file("errors.jsonl"))]
        dist = error_distribution(cases)
        cats = next(iter(dist.values())).keys() if dist else []
        sep = "," if fmt in ("csv", "plotdata") else "  "
        lines = [sep.join(["x", *dist.keys()])]
        for cat in cats:
            lines.append(sep.join([cat, *(str(dist[m][cat]) for m in dist)]))
        parts.append("\n".join(lines))
    if not parts:
        raise ConfigError(f"{run_path} holds no evaluation records")
    return "\n\n".join(parts)


def cmd_report(args) -> int:
    print(build_report(Path(args.run), args.format))
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _config(args)
    backends = build_backends(cfg)
    text = Path(args.story).read_text(encoding="utf-8")
    triples = [FTPTriple.from_dict(d) for d in read_jsonl(Path(args.triples))] if args.triples else []
    state = NarrativeState.from_text(text, triples)
    run = new_run(cfg, "generate", backends, story=args.story, triples=args.triples)
    ecfg = EngineConfig(
        prefix_window=cfg.prefix_window,
        max_output_sentences=cfg.max_output_sentences,
        extract=not cfg.no_extract,
        stop_when_quiescent=args.stop_when_quiescent,
        check_violations=args.check_violations,
        templates=cfg.templates(),
    )
    try:
        state, traces = run_loop(state, backends, args.steps, ecfg, trace_log=run.file("traces.jsonl"))
    except RunAborted as e:
        run.file("story.txt").write_text("\n".join(e.state.sentences) + "\n", encoding="utf-8")
        run.finish("partial", backends, error=str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BACKEND if isinstance(e.__cause__, BackendError) else EXIT_PARTIAL
    run.file("story.txt").write_text("\n".join(state.sentences) + "\n", encoding="utf-8")
    write_jsonl(run.file("pool.jsonl"), list(state.pool))
    run.finish("complete", backends, pool=state.pool.counts())
    print(json.dumps(state.pool.counts()))
    print(f"run: {run.path}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    return EXIT_OK if run_selfcheck() else EXIT_INVALID


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfpg", description="Codified foreshadow-payoff generation and evaluation")
    p.add_argument("--version", action="version", version=f"cfpg {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True):
        sp.add_argument("--config", help="YAML or JSON run config")
        sp.add_argument("--out-root", help="directory that receives run directories")
        sp.add_argument("--parallelism", type=int)
        sp.add_argument("--cache-dir")
        if dataset:
            sp.add_argument("--dataset", required=True)
            sp.add_argument("--limit", type=int, help="evaluate only the first N records")

    sp = sub.add_parser("mine", help="mine foreshadow-payoff pairs from a corpus")
    common(sp, dataset=False)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out")
    sp.add_argument("--window", type=int)
    sp.add_argument("--min-gap", type=int)
    sp.set_defaults(func=cmd_mine)

    sp = sub.add_parser("eval-oracle", help="payoff activation under oracle timing")
    common(sp)
    sp.add_argument("--policy", choices=[*ORACLE_POLICIES, "both"], default="both")
    sp.set_defaults(func=cmd_eval_oracle)

    sp = sub.add_parser("eval-tracking", help="grounded online payoff tracking")
    common(sp)
    sp.add_argument("--policy", choices=[*POLICIES, "all"], default="cfpg")
    sp.add_argument("--tolerance", type=int)
    sp.add_argument("--fscr-window", type=int)
    sp.add_argument("--k", type=int)
    sp.set_defaults(func=cmd_eval_tracking)

    sp = sub.add_parser("dynamics", help="detector confidence around the gold payoff")
    common(sp)
    sp.add_argument("--policy", choices=[*POLICIES, "both"], default="both")
    sp.add_argument("--radius", type=int)
    sp.set_defaults(func=cmd_dynamics)

    sp = sub.add_parser("errors", help="rationale elicitation and taxonomy classification for a tracking run")
    sp.add_argument("--run", required=True)
    sp.add_argument("--config")
    sp.add_argument("--dataset")
    sp.add_argument("--out-root")
    sp.set_defaults(func=cmd_errors)

    sp = sub.add_parser("stats", help="dataset statistics")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out-dir", help="also write stats.json and plot-data CSVs here")
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("report", help="render tables from a finished run directory")
    sp.add_argument("--run", required=True)
    sp.add_argument("--format", choices=["table", "csv", "plotdata"], default="table")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("generate", help="run the Select-Generate-Update loop on a story")
    common(sp, dataset=False)
    sp.add_argument("--story", required=True, help="plain-text opening")
    sp.add_argument("--triples", help="JSONL of foreshadow/trigger/payoff triples")
    sp.add_argument("--steps", type=int, default=3)
    sp.add_argument("--no-extract", action="store_true", help="do not mine new setups from generated text")
    sp.add_argument("--stop-when-quiescent", action="store_true")
    sp.add_argument("--check-violations", action="store_true", help="ask the judge whether each step breaks an open commitment")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("selfcheck", help="run the shipped scripted end-to-end fixtures")
    sp.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BackendError as e:
        print(f"backend error: {e}", file=sys.stderr)
        return EXIT_BACKEND
    except (ConfigError, ValueError, FileNotFoundError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
