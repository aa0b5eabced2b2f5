"""Aggregate rows, dataset statistics, annotator agreement, and their renderings.

Values are kept at full precision; rounding happens only in ``render_*``.
"""
from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .core import Category

PERCENTILE_NOTE = "percentiles use the nearest-rank method (no interpolation)"


@dataclass(frozen=True)
class MetricsRow:
    method: str
    detection_pct: float | None = None
    early: int | None = None
    late: int | None = None
    miss: int | None = None
    loc_error_mean: float | None = None
    loc_error_in_window_mean: float | None = None
    continuation_mean: float | None = None
    should_payoff_rate: float | None = None
    avg_entailment: float | None = None
    n: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _mean(values: Sequence[float]) -> float | None:
    return math.fsum(values) / len(values) if values else None


def aggregate_tracking(outcomes, method: str | None = None, tolerance: int = 3) -> MetricsRow:
    """Summary row for one method's tracking outcomes.

    detection is correct / scorable (errored records excluded); localization
    error averages over every fired record, with an in-window-only variant;
    continuation score averages over correct records that have one.
    """
    outcomes = list(outcomes)
    if method is None:
        method = outcomes[0].policy if outcomes else ""
    scorable = [o for o in outcomes if o.outcome != "errored"]
    counts = Counter(o.outcome for o in scorable)
    fired = [o for o in scorable if o.fired_at is not None]
    in_window = [o for o in fired if o.loc_error <= tolerance]
    conts = [o.trajectory_score for o in scorable if o.outcome == "correct" and o.trajectory_score is not None]
    return MetricsRow(
        method=method,
        detection_pct=counts["correct"] / len(scorable) if scorable else 0.0,
        early=counts["early"],
        late=counts["late"],
        miss=counts["miss"],
        loc_error_mean=_mean([o.loc_error for o in fired]),
        loc_error_in_window_mean=_mean([o.loc_error for o in in_window]),
        continuation_mean=_mean(conts),
        n={
            "total": len(outcomes),
            "scorable": len(scorable),
            "errored": len(outcomes) - len(scorable),
            "correct": counts["correct"],
            "fired": len(fired),
            "continuation": len(conts),
        },
    )


def aggregate_oracle(results, method: str | None = None) -> MetricsRow:
    results = list(results)
    if method is None:
        method = results[0].policy if results else ""
    ok = [r for r in results if r.error is None]
    gated = [r for r in ok if r.activated is not None]
    return MetricsRow(
        method=method,
        should_payoff_rate=(sum(1 for r in gated if r.activated) / len(gated)) if gated else None,
        avg_entailment=_mean([r.score for r in ok]),
        n={"total": len(results), "scorable": len(ok), "errored": len(results) - len(ok), "gated": len(gated)},
    )


# --- dataset statistics -----------------------------------------------------------


def nearest_rank(sorted_values: Sequence[float], pct: float) -> float:
    if not sorted_values:
        raise ValueError("no values")
    rank = max(1, math.ceil(pct / 100.0 * len(sorted_values)))
    return sorted_values[rank - 1]


@dataclass(frozen=True)
class DatasetStats:
    n_books: int
    n_foreshadows: int
    distance: dict
    type_distribution: dict
    mean_confidence: float | None
    note: str = PERCENTILE_NOTE

    def to_dict(self) -> dict:
        return asdict(self)


def dataset_stats(records) -> DatasetStats:
    records = list(records)
    distances = sorted(r.t_p - r.t_f for r in records)
    if distances:
        distance = {
            "mean": math.fsum(distances) / len(distances),
            "median": nearest_rank(distances, 50),
            "p75": nearest_rank(distances, 75),
            "p90": nearest_rank(distances, 90),
            "max": distances[-1],
        }
    else:
        distance = {k: None for k in ("mean", "median", "p75", "p90", "max")}
    cats = Counter(r.category for r in records)
    types = {c.value: (cats[c] / len(records) if records else 0.0) for c in Category}
    return DatasetStats(
        n_books=len({r.book_id for r in records}),
        n_foreshadows=len(records),
        distance=distance,
        type_distribution=types,
        mean_confidence=_mean([r.confidence for r in records]),
    )


def distance_plotdata(records, bin_width: int = 5) -> str:
    """CSV (x, density) histogram of payoff distances, in sentences."""
    distances = [r.t_p - r.t_f for r in records]
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["x", "density"])
    if distances:
        bins = Counter((d // bin_width) * bin_width for d in distances)
        for start in range(0, max(bins) + bin_width, bin_width):
            w.writerow([start, bins.get(start, 0) / (len(distances) * bin_width)])
    return out.getvalue()


def type_plotdata(stats: DatasetStats) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["x", "fraction"])
    for cat, frac in stats.type_distribution.items():
        w.writerow([cat, frac])
    return out.getvalue()


# --- agreement ---------------------------------------------------------------------


def agreement(judgments_a: dict, judgments_b: dict) -> dict[str, dict[str, float]]:
    """Per-aspect positive rates for each annotator and their raw agreement."""
    if judgments_a.keys() != judgments_b.keys():
        raise ValueError("annotators must judge the same aspects")
    out = {}
    for aspect in judgments_a:
        a, b = list(judgments_a[aspect]), list(judgments_b[aspect])
        if len(a) != len(b):
            raise ValueError(f"aspect {aspect!r}: {len(a)} vs {len(b)} judgments")
        if not a:
            raise ValueError(f"aspect {aspect!r}: no judgments")
        out[aspect] = {
            "rate_a": sum(map(bool, a)) / len(a),
            "rate_b": sum(map(bool, b)) / len(b),
            "agreement": sum(bool(x) == bool(y) for x, y in zip(a, b)) / len(a),
        }
    return out


# --- rendering ----------------------------------------------------------------------


def _fmt(value, kind: str) -> str:
    if value is None:
        return "n/a"
    if kind == "pct":
        return f"{100 * value:.1f}"
    if kind == "score":
        return f"{value:.3f}"
    if kind == "err":
        return f"{value:.2f}"
    return str(value)


TRACKING_COLUMNS = [
    ("method", "Method", "str"),
    ("detection_pct", "Det. (%)", "pct"),
    ("early", "Early", "int"),
    ("late", "Late", "int"),
    ("miss", "Miss", "int"),
    ("loc_error_mean", "Error", "err"),
    ("loc_error_in_window_mean", "Error (in-window)", "err"),
    ("continuation_mean", "Fidelity", "score"),
]
ORACLE_COLUMNS = [
    ("method", "Method", "str"),
    ("should_payoff_rate", "Should-Payoff Rate", "score"),
    ("avg_entailment", "Avg. Score", "score"),
]


def render_table(rows: Sequence[MetricsRow], columns=TRACKING_COLUMNS) -> str:
    header = [c[1] for c in columns]
    body = [[_fmt(getattr(r, c[0]), c[2]) for c in columns] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(x.ljust(w) for x, w in zip(row, widths)) for row in body]
    return "\n".join(lines)


def render_csv(rows: Sequence[MetricsRow], columns=TRACKING_COLUMNS) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow([c[0] for c in columns] + ["n"])
    for r in rows:
        w.writerow([getattr(r, c[0]) for c in columns] + [";".join(f"{k}={v}" for k, v in r.n.items())])
    return out.getvalue()


def render_stats(stats: DatasetStats) -> str:
    d = stats.distance
    lines = [
        f"# {stats.note}",
        f"# Books            {stats.n_books}",
        f"# Foreshadows      {stats.n_foreshadows}",
        f"Avg. Payoff Distance (sentences)  {_fmt(d['mean'], 'err')}",
        f"Median Payoff Distance            {_fmt(d['median'], 'str')}",
        f"75th Percentile Distance          {_fmt(d['p75'], 'str')}",
        f"90th Percentile Distance          {_fmt(d['p90'], 'str')}",
        f"Max Payoff Distance               {_fmt(d['max'], 'str')}",
    ]
    for cat, frac in stats.type_distribution.items():
        lines.append(f"{cat.capitalize():<34}{_fmt(frac, 'pct')}%")
    lines.append(f"Avg. Extraction Confidence        {_fmt(stats.mean_confidence, 'score')}")
    lines.append("# confidence = mean of stage-2 and stage-3 judge confidences per record")
    return "\n".join(lines)
