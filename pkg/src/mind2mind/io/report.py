"""Report bundles: JSON summaries plus one CSV history per (method, seed)."""

from __future__ import annotations

import csv
import io
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ..gan import HISTORY_COLUMNS, HistoryRecord, TrainHistory
from ..ot import EmpiricalMeasure

LOCK_NAME = ".m2m.lock"


class OutputLocked(RuntimeError):
    pass


@dataclass
class RunResult:
    method: str
    seed: int
    history: TrainHistory
    metrics: dict[str, float] = field(default_factory=dict)
    bound: dict[str, Any] | None = None
    # wall-clock facts; kept in memory, written only on request
    timing: dict[str, float] = field(default_factory=dict)

    @property
    def stem(self) -> str:
        return f"{self.method}_seed{self.seed}"


@dataclass
class ReportBundle:
    config: dict[str, Any]
    runs: list[RunResult] = field(default_factory=list)

    def get(self, method: str, seed: int) -> RunResult:
        for r in self.runs:
            if r.method == method and r.seed == seed:
                return r
        raise KeyError((method, seed))

    def by_method(self, method: str) -> list[RunResult]:
        return [r for r in self.runs if r.method == method]


@contextmanager
def output_lock(directory):
    """Exclusive claim on an output directory for the duration of a write."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OutputLocked(f"{directory} is in use by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _cell(v) -> str:
    return "" if v is None else repr(v)


def history_csv(history: TrainHistory, record_wall_clock: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for r in history.records:
        row = [r.step, r.critic_loss, r.gen_loss, r.gp, r.drift,
               r.wall_clock_s if record_wall_clock else None, r.metric]
        w.writerow([str(row[0])] + [_cell(None if v is None else float(v)) for v in row[1:]])
    return buf.getvalue()


def parse_history_csv(text: str) -> TrainHistory:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != HISTORY_COLUMNS:
        raise ValueError(f"history header must be {','.join(HISTORY_COLUMNS)}")
    hist = TrainHistory()
    for k, row in enumerate(rows[1:], start=2):
        if len(row) != len(HISTORY_COLUMNS):
            raise ValueError(f"line {k}: expected {len(HISTORY_COLUMNS)} cells, got {len(row)}")
        vals = [None if c == "" else float(c) for c in row[1:]]
        hist.log(HistoryRecord(int(row[0]), *vals))
    return hist


def read_history_csv(path) -> TrainHistory:
    return parse_history_csv(Path(path).read_text())


def emit_report(bundle: ReportBundle, directory, record_wall_clock: bool = False) -> list[Path]:
    """Write ``config.json`` and, per run, ``history_<stem>.csv`` and ``run_<stem>.json``.

    Output is a pure function of the bundle unless ``record_wall_clock`` is
    set, in which case timing columns and fields are filled in.
    """
    written = []
    with output_lock(directory) as d:
        path = d / "config.json"
        path.write_text(_dumps(bundle.config))
        written.append(path)
        for run in bundle.runs:
            path = d / f"history_{run.stem}.csv"
            path.write_text(history_csv(run.history, record_wall_clock))
            written.append(path)
            doc = {"method": run.method, "seed": run.seed, "metrics": run.metrics,
                   "bound": run.bound}
            if record_wall_clock:
                doc["timing"] = run.timing
            path = d / f"run_{run.stem}.json"
            path.write_text(_dumps(doc))
            written.append(path)
    return written


def read_report(directory) -> ReportBundle:
    """Inverse of :func:`emit_report` (timing survives only if it was recorded)."""
    d = Path(directory)
    config = json.loads((d / "config.json").read_text())
    runs = []
    for path in sorted(d.glob("run_*.json")):
        doc = json.loads(path.read_text())
        run = RunResult(doc["method"], int(doc["seed"]), TrainHistory(), doc["metrics"],
                        doc["bound"], doc.get("timing", {}))
        run.history = read_history_csv(d / f"history_{run.stem}.csv")
        runs.append(run)
    order = {m: i for i, m in enumerate(config.get("methods", []))}
    runs.sort(key=lambda r: (order.get(r.method, len(order)), r.seed))
    return ReportBundle(config, runs)


def measure_csv(atoms, weights) -> str:
    """Weighted atoms as CSV: a ``weight`` column then ``x0..x{d-1}``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["weight"] + [f"x{j}" for j in range(atoms.shape[1])])
    for p, row in zip(weights, atoms):
        w.writerow([repr(float(p))] + [repr(float(v)) for v in row])
    return buf.getvalue()


def read_measure_csv(path) -> EmpiricalMeasure:
    rows = list(csv.reader(io.StringIO(Path(path).read_text())))
    if not rows or rows[0][0] != "weight":
        raise ValueError(f"{path}: not a measure CSV")
    body = np.array([[float(c) for c in r] for r in rows[1:]], dtype=np.float64)
    body = body.reshape(len(rows) - 1, len(rows[0]))
    return EmpiricalMeasure(body[:, 1:], body[:, 0])
