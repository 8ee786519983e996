"""Training metrics: the per-interval log row, its CSV serialization, and
replay aggregation across runs."""

from __future__ import annotations

import csv
from dataclasses import dataclass

from .errors import MetricsParseError

COLUMNS = (
    "step",
    "wallclock_seconds",
    "train_loss",
    "eval_loss",
    "learning_rate",
    "cond_ratio",
    "reparam_event",
)


@dataclass
class MetricsRow:
    step: int
    wallclock_seconds: float
    train_loss: float
    eval_loss: float
    learning_rate: float
    cond_ratio: float | None = None
    reparam_event: bool = False


def _fmt(x):
    return f"{x:.17g}"


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow(
                [
                    r.step,
                    _fmt(r.wallclock_seconds),
                    _fmt(r.train_loss),
                    _fmt(r.eval_loss),
                    _fmt(r.learning_rate),
                    "" if r.cond_ratio is None else _fmt(r.cond_ratio),
                    int(r.reparam_event),
                ]
            )


def read_metrics(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MetricsParseError("empty metrics file", 1) from None
        if tuple(header) != COLUMNS:
            raise MetricsParseError(f"unexpected header {header}", 1)
        last_step = None
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(COLUMNS):
                raise MetricsParseError(f"expected {len(COLUMNS)} fields, got {len(rec)}", lineno)
            try:
                row = MetricsRow(
                    step=int(rec[0]),
                    wallclock_seconds=float(rec[1]),
                    train_loss=float(rec[2]),
                    eval_loss=float(rec[3]),
                    learning_rate=float(rec[4]),
                    cond_ratio=float(rec[5]) if rec[5] != "" else None,
                    reparam_event=bool(int(rec[6])),
                )
            except ValueError as exc:
                raise MetricsParseError(f"bad field: {exc}", lineno) from None
            if last_step is not None and row.step <= last_step:
                raise MetricsParseError("steps are not strictly increasing", lineno)
            last_step = row.step
            rows.append(row)
    return rows


def _locf_table(runs, key, value):
    """Merge runs onto the union grid of ``key`` with last-observation-
    carried-forward values of ``value``; header + rows, blanks before a
    run's first observation."""
    names = [name for name, _ in runs]
    grids = sorted({getattr(r, key) for _, rows in runs for r in rows})
    table = []
    for g in grids:
        rec = [g]
        for _, rows in runs:
            last = None
            for r in rows:
                if getattr(r, key) <= g:
                    last = getattr(r, value)
                else:
                    break
            rec.append(last)
        table.append(rec)
    return [key] + names, table


def replay(named_runs):
    """Plot-ready aggregates from (name, rows) pairs: a loss-vs-step table
    and a loss-vs-wallclock table, both LOCF-aligned on the union grid."""
    runs = list(named_runs)
    by_step = _locf_table(runs, "step", "train_loss")
    by_time = _locf_table(runs, "wallclock_seconds", "train_loss")
    return by_step, by_time


def write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for rec in rows:
            w.writerow(["" if v is None else (_fmt(v) if isinstance(v, float) else v) for v in rec])
