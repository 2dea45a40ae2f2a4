"""Stage-breakdown and scaling reports from timing records.

A timing record is one JSON object per line::

    {"path": "checkpoint", "stage": "drain", "duration": 0.0012,
     "epoch": 3, "vpid": 1234, "mode": "plain", "run": "rep-07"}

``path``, ``stage`` and ``duration`` are required.  One repetition is the
set of records sharing ``(run, epoch)``; a stage's time in a repetition is
the slowest process's time (every stage ends at a barrier, so the cluster
waits for the slowest member).  ``mode`` defaults to ``"plain"`` and ``run``
to the directory the records were loaded from.

CSV output has the columns ``section,mode,row,n_processes,mean,std,reps``;
``section`` is ``checkpoint``, ``restart`` or ``scaling``.  Breakdown rows
leave ``n_processes`` empty; scaling rows use ``row = "Total"``.
"""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path

from .errors import MalformedTrace

CHECKPOINT_ROWS = [
    ("Suspend user threads", "suspend"),
    ("Elect FD leaders", "elect"),
    ("Drain kernel buffers", "drain"),
    ("Write checkpoint", "write"),
    ("Refill kernel buffers", "refill"),
]
RESTART_ROWS = [
    ("Restore files and ptys", "restore-files"),
    ("Reconnect sockets", "reconnect"),
    ("Restore memory/threads", "restore-memory"),
    ("Refill kernel buffers", "refill"),
]
TOTAL = "Total"
SECTIONS = {"checkpoint": CHECKPOINT_ROWS, "restart": RESTART_ROWS}
CSV_FIELDS = ["section", "mode", "row", "n_processes", "mean", "std", "reps"]


def _check(rec, where: str) -> dict:
    if not isinstance(rec, dict):
        raise MalformedTrace(f"{where}: record is not an object")
    for k in ("path", "stage", "duration"):
        if k not in rec:
            raise MalformedTrace(f"{where}: missing field {k!r}")
    if rec["path"] not in SECTIONS:
        raise MalformedTrace(f"{where}: unknown path {rec['path']!r}")
    d = rec["duration"]
    if isinstance(d, bool) or not isinstance(d, (int, float)) or d < 0:
        raise MalformedTrace(f"{where}: bad duration {d!r}")
    return rec


def parse_records(text: str, source: str = "<trace>", run: str | None = None) -> list[dict]:
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except ValueError as exc:
            raise MalformedTrace(f"{source}:{n}: {exc}") from None
        rec = dict(_check(rec, f"{source}:{n}"))
        rec.setdefault("run", run or source)
        rec.setdefault("mode", "plain")
        out.append(rec)
    return out


def load_records(paths) -> list[dict]:
    """Read ``*.jsonl`` files; a directory contributes every ``*.jsonl``
    below it."""
    recs = []
    for p in map(Path, paths):
        files = sorted(p.rglob("*.jsonl")) if p.is_dir() else [p]
        for f in files:
            try:
                text = f.read_text()
            except OSError as exc:
                raise MalformedTrace(f"{f}: {exc}") from None
            run = f.parent.parent if f.parent.name == "timings" else f.parent
            recs.extend(parse_records(text, str(f), str(run)))
    return recs


def _stats(values: list[float]) -> tuple[float, float]:
    if not values:
        return 0.0, 0.0
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, std


@dataclass
class Cell:
    mean: float
    std: float
    reps: int


@dataclass
class Breakdown:
    section: str
    modes: list[str]
    rows: dict[str, dict[str, Cell]] = field(default_factory=dict)   # row -> mode -> cell

    @property
    def row_names(self) -> list[str]:
        return list(self.rows)


def repetitions(records, path: str) -> dict[tuple, dict]:
    """Group records of one path into repetitions: (mode, run, epoch) ->
    {"stages": {stage: slowest duration}, "vpids": set}."""
    reps: dict[tuple, dict] = {}
    for r in records:
        if r["path"] != path:
            continue
        key = (r["mode"], str(r["run"]), r.get("epoch"))
        rep = reps.setdefault(key, {"stages": {}, "vpids": set()})
        st = rep["stages"]
        st[r["stage"]] = max(st.get(r["stage"], 0.0), float(r["duration"]))
        if r.get("vpid") is not None:
            rep["vpids"].add(r["vpid"])
    return reps


def breakdown(records, section: str = "checkpoint") -> Breakdown:
    rows = SECTIONS[section]
    reps = repetitions(records, section)
    modes = sorted({k[0] for k in reps})
    out = Breakdown(section, modes)
    for label, stage in rows + [(TOTAL, None)]:
        out.rows[label] = {}
        for mode in modes:
            vals = []
            for key, rep in reps.items():
                if key[0] != mode:
                    continue
                st = rep["stages"]
                if stage is None:
                    vals.append(sum(st.get(s, 0.0) for _, s in rows))
                else:
                    vals.append(st.get(stage, 0.0))
            out.rows[label][mode] = Cell(*_stats(vals), len(vals))
    return out


def scaling(records, section: str = "checkpoint") -> dict[str, list[tuple[int, Cell]]]:
    """Total time per repetition against the number of processes in it."""
    rows = SECTIONS[section]
    by: dict[str, dict[int, list[float]]] = {}
    for (mode, _, _), rep in repetitions(records, section).items():
        total = sum(rep["stages"].get(s, 0.0) for _, s in rows)
        by.setdefault(mode, {}).setdefault(len(rep["vpids"]), []).append(total)
    return {mode: [(n, Cell(*_stats(v), len(v))) for n, v in sorted(series.items())]
            for mode, series in sorted(by.items())}


def render_text(records) -> str:
    buf = io.StringIO()
    for section in SECTIONS:
        b = breakdown(records, section)
        if not b.modes:
            continue
        buf.write(f"{section.capitalize()} stages (seconds, mean ± std over repetitions)\n")
        width = max(len(r) for r in b.rows) + 2
        head = "".join(f"{m:>24}" for m in b.modes)
        buf.write(f"{'':{width}}{head}\n")
        for label, cells in b.rows.items():
            line = "".join(f"{c.mean:>12.4f} ± {c.std:<9.4f}" for c in cells.values())
            buf.write(f"{label:{width}}{line}\n")
        reps = ", ".join(f"{m}: {b.rows[TOTAL][m].reps}" for m in b.modes)
        buf.write(f"{'repetitions':{width}}{reps}\n\n")
    series = scaling(records)
    if series:
        buf.write("Checkpoint time vs process count\n")
        for mode, pts in series.items():
            for n, c in pts:
                buf.write(f"  {mode:<20} n={n:<4} {c.mean:.4f} ± {c.std:.4f}  ({c.reps} reps)\n")
    return buf.getvalue()


def render_csv(records) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for section in SECTIONS:
        b = breakdown(records, section)
        for label, cells in b.rows.items():
            for mode, c in cells.items():
                w.writerow({"section": section, "mode": mode, "row": label, "n_processes": "",
                            "mean": f"{c.mean:.6f}", "std": f"{c.std:.6f}", "reps": c.reps})
    for mode, pts in scaling(records).items():
        for n, c in pts:
            w.writerow({"section": "scaling", "mode": mode, "row": TOTAL, "n_processes": n,
                        "mean": f"{c.mean:.6f}", "std": f"{c.std:.6f}", "reps": c.reps})
    return buf.getvalue()


def write_records(records, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return path
