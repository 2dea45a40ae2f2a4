from __future__ import annotations

import csv
import io
import json
import random

import numpy as np
import pytest

from dckpt import report
from dckpt.cli import main
from dckpt.errors import MalformedTrace
from dckpt.simnet import Cluster

STAGES = [s for _, s in report.CHECKPOINT_ROWS]


def synthetic(rng, reps=10, procs=4, modes=("plain", "compressed")):
    """Records plus the expected per-repetition stage maxima."""
    recs, expect = [], {}
    for mode in modes:
        for rep in range(reps):
            for stage in STAGES:
                ds = [rng.uniform(0.001, 0.1) for _ in range(procs)]
                expect.setdefault((mode, stage), []).append(max(ds))
                for v, d in enumerate(ds):
                    recs.append({"path": "checkpoint", "stage": stage, "duration": d,
                                 "epoch": rep + 1, "vpid": 100 + v, "mode": mode, "run": "r"})
    return recs, expect


def test_row_labels_exact():
    b = report.breakdown(synthetic(random.Random(0))[0])
    assert b.row_names == ["Suspend user threads", "Elect FD leaders", "Drain kernel buffers",
                           "Write checkpoint", "Refill kernel buffers", "Total"]
    assert [r for r, _ in report.RESTART_ROWS] == [
        "Restore files and ptys", "Reconnect sockets", "Restore memory/threads",
        "Refill kernel buffers"]


def test_mean_std_against_numpy():
    recs, expect = synthetic(random.Random(1))
    b = report.breakdown(recs)
    for label, stage in report.CHECKPOINT_ROWS:
        for mode in ("plain", "compressed"):
            vals = np.array(expect[(mode, stage)])
            cell = b.rows[label][mode]
            assert cell.reps == 10
            assert cell.mean == pytest.approx(vals.mean())
            assert cell.std == pytest.approx(vals.std(ddof=1))
    for mode in ("plain", "compressed"):
        totals = np.sum([expect[(mode, s)] for s in STAGES], axis=0)
        cell = b.rows["Total"][mode]
        assert cell.mean == pytest.approx(totals.mean())
        assert cell.std == pytest.approx(totals.std(ddof=1))


def test_single_rep_has_zero_std():
    recs, _ = synthetic(random.Random(2), reps=1, modes=("plain",))
    cell = report.breakdown(recs).rows["Total"]["plain"]
    assert cell.reps == 1 and cell.std == 0.0


def test_csv_schema():
    recs, _ = synthetic(random.Random(3))
    rows = list(csv.DictReader(io.StringIO(report.render_csv(recs))))
    assert list(rows[0]) == ["section", "mode", "row", "n_processes", "mean", "std", "reps"]
    ck = [r for r in rows if r["section"] == "checkpoint"]
    assert len(ck) == 6 * 2
    assert all(r["n_processes"] == "" and r["reps"] == "10" for r in ck)
    sc = [r for r in rows if r["section"] == "scaling"]
    assert sc and all(r["row"] == "Total" and r["n_processes"] == "4" for r in sc)
    for r in rows:
        float(r["mean"]), float(r["std"])


def test_scaling_groups_by_process_count():
    rng = random.Random(4)
    recs = []
    for n in (2, 4, 8):
        more, _ = synthetic(rng, reps=3, procs=n, modes=("plain",))
        for r in more:
            r["run"] = f"n{n}"
        recs += more
    series = report.scaling(recs)["plain"]
    assert [n for n, _ in series] == [2, 4, 8]
    assert all(c.reps == 3 for _, c in series)


@pytest.mark.parametrize("line", [
    "not json",
    json.dumps({"path": "checkpoint", "stage": "drain"}),
    json.dumps({"path": "sideways", "stage": "drain", "duration": 1}),
    json.dumps({"path": "checkpoint", "stage": "drain", "duration": -1}),
    json.dumps({"path": "checkpoint", "stage": "drain", "duration": "fast"}),
    json.dumps([1, 2]),
])
def test_malformed(line):
    with pytest.raises(MalformedTrace):
        report.parse_records(line + "\n")


def test_defaults_and_blank_lines():
    recs = report.parse_records("\n" + json.dumps(
        {"path": "restart", "stage": "reconnect", "duration": 0.5}) + "\n\n", run="x")
    assert recs == [{"path": "restart", "stage": "reconnect", "duration": 0.5,
                     "run": "x", "mode": "plain"}]


def test_render_text_mentions_rows():
    recs, _ = synthetic(random.Random(5))
    text = report.render_text(recs)
    for label, _ in report.CHECKPOINT_ROWS:
        assert label in text
    assert "repetitions" in text and "plain: 10" in text


def test_report_from_simulated_epochs(tmp_path, capsys):
    c = Cluster(2, 0)
    c.spawn_process(0, "section main\n" + "".join(f"{i} yield\n" for i in range(1, 40)))
    c.spawn_process(1, "section main\n" + "".join(f"{i} yield\n" for i in range(1, 40)))
    for _ in range(10):
        c.run(until=c.clock + 2)
        res = c.checkpoint(tmp_path / "ck")
        report.write_records([{**r, "mode": "plain"} for r in res.timings],
                             tmp_path / "timings" / "t.jsonl")
    assert main(["report", "--csv", str(tmp_path / "timings" / "t.jsonl")]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    total = [r for r in rows if r["section"] == "checkpoint" and r["row"] == "Total"]
    assert total[0]["reps"] == "10"


def test_cli_report_empty_is_user_error(tmp_path):
    (tmp_path / "empty.jsonl").write_text("")
    assert main(["report", str(tmp_path / "empty.jsonl")]) == 2
