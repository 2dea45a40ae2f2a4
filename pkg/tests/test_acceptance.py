"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` (the lines appear in the
terminal summary) or ``python3 tests/test_acceptance.py``.
"""

from __future__ import annotations

import csv
import io
import random
import sys
import tempfile
import time

import numpy as np
import pytest

import helpers as H
import realrun as R
from dckpt import report, storage
from dckpt.cli import main as cli_main
from dckpt.core import BarrierName
from dckpt.restart import restart_sim, restart_sim_from_script, shuffled_placement
from dckpt.scenarios import Scenario, check_restart, generate
from dckpt.simnet import Cluster, RunOutcome

RESULTS: list[tuple[int, bool, str]] = []


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS.append((n, ok, detail))
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    assert ok, line


# 1 ------------------------------------------------------------------------------------

def test_c01_restart_equivalence(tmp_path):
    t0 = time.monotonic()
    bad, procs, hosts = [], set(), set()
    for seed in range(200):
        sc = generate(seed)
        procs.add(sc.n_procs)
        hosts.add(sc.n_hosts)
        ok, info = check_restart(sc, tmp_path / str(seed), rng=random.Random(1000 + seed))
        if not ok:
            bad.append((seed, info))
    elapsed = time.monotonic() - t0
    ok = not bad and elapsed < 120
    record(1, ok, f"200 scenarios, {len(bad)} mismatches, procs {min(procs)}-{max(procs)}, "
                  f"hosts {min(hosts)}-{max(hosts)}, {elapsed:.1f}s"
                  + (f", first failure {bad[0]}" if bad else ""))


# 2 ------------------------------------------------------------------------------------

def test_c02_drain_exactness(tmp_path):
    rng = random.Random(2)
    states = fails = 0
    biggest = 0
    while states < 1000:
        c = H.share_topology(rng)
        H.fill_in_flight(c, rng, 64 * 1024)
        held = H.holders(c)
        before = H.snapshot(c)
        biggest = max([biggest] + [len(v) for v in before.values()])
        facts = H.run_checked_epoch(c, tmp_path)
        states += sum(1 for k in before if k in held)
        if not (facts["drain_ok"] and facts["refill_ok"] and facts["quiet_ok"]):
            fails += 1
    record(2, fails == 0, f"{states} channel sides drained and refilled, {fails} mismatching "
                          f"epochs, largest queue {biggest} bytes")


# 3 ------------------------------------------------------------------------------------

def test_c03_leader_uniqueness(tmp_path):
    rng = random.Random(3)
    fails = shared = 0
    for _ in range(100):
        c = H.share_topology(rng, max_forks=10)
        shared += sum(1 for hs in H.holders(c).values() if len(hs) > 1)
        facts = H.run_checked_epoch(c, tmp_path)
        if not facts["leaders_ok"]:
            fails += 1
    record(3, fails == 0 and shared > 0,
           f"100 topologies, {shared} shared descriptors, {fails} with a leader count != 1")


# 4 ------------------------------------------------------------------------------------

def test_c04_barrier_structure():
    labels = [b.label for b in BarrierName]
    per_proc, releases_ok = {}, True
    for n in (2, 4, 8, 16, 32):
        c = Cluster(4, n)
        for i in range(n):
            c.spawn_process(i % 4, H.IDLE)
        with tempfile.TemporaryDirectory() as d:
            for _ in range(3):
                c.checkpoint(d)
        coord = c.coordinator
        counts = set()
        for ep in (1, 2, 3):
            if [r["barrier"] for r in coord.releases(ep)] != labels:
                releases_ok = False
            for v in c.procs:
                counts.add(sum(1 for e in coord.trace if e["event"] == "report"
                               and e["epoch"] == ep and e["vpid"] == v))
        per_proc[n] = counts
    flat = all(len(s) == 1 for s in per_proc.values()) and \
        len({next(iter(s)) for s in per_proc.values()}) == 1
    record(4, releases_ok and flat,
           f"6 releases per epoch: {releases_ok}; reports per process per epoch by N: "
           + ", ".join(f"{n}:{sorted(s)}" for n, s in per_proc.items()))


# 5 ------------------------------------------------------------------------------------

@pytest.mark.slow
def test_c05_forked_benefit(tmp_path):
    size = 50 * 2 ** 20
    plain = R.median_suspended(tmp_path / "plain", "plain", size, reps=10)
    forked = R.median_suspended(tmp_path / "forked", "forked", size, reps=10)
    record(5, forked < 0.5 * plain,
           f"50 MiB heap, median suspended: plain {plain * 1000:.1f} ms, "
           f"forked {forked * 1000:.1f} ms ({forked / plain:.1%})")


# 6 ------------------------------------------------------------------------------------

def test_c06_compression(tmp_path):
    size = 10 * 2 ** 20
    c = Cluster(1, 6)
    v = c.spawn_process(0, "section main\n1 compute big\n")
    heap = bytearray(size)
    rng = random.Random(6)
    for _ in range(200):                   # zero-dominated, not all zero
        heap[rng.randrange(size)] = rng.randrange(1, 256)
    c.procs[v].heap["big"] = heap
    res = c.checkpoint(tmp_path, mode="compressed")
    on_disk = res.images[v].stat().st_size
    img = storage.read_image_file(res.images[v])
    rr = restart_sim([[str(res.images[v])]], [0], n_hosts=1, seed=6)
    same = bytes(rr.cluster.procs[v].heap["big"]) == bytes(heap)
    ratio = on_disk / size
    record(6, ratio < 0.01 and same and img.vpid == v,
           f"10 MiB heap -> {on_disk} bytes on disk ({ratio:.3%}), round trip equal: {same}")


# 7 ------------------------------------------------------------------------------------

def hub_scenario(k: int, seed: int) -> Scenario:
    """A hub on host 0 and leaves spread over all ``k`` hosts.  Each leaf has
    its own listener at the hub, sends 70 KiB (more than one queue holds),
    gets a reply, and forks a child that reads from a pipe."""
    leaves = max(2, k)
    hub = ["section main"] + [f"{j} listen {10 + j}" for j in range(1, leaves + 1)]
    n = len(hub)
    for j in range(1, leaves + 1):
        hub += [f"{n} accept {40 + j} {10 + j}", f"{n + 1} recv {40 + j} 70000 in{j}",
                f"{n + 2} send {40 + j} 20000 {j}", f"{n + 3} compute in{j}"]
        n += 4
    roots = [(0, "\n".join(hub) + "\n")]
    for j in range(1, leaves + 1):
        roots.append((j % k, f"""section main
1 connect 3 p0 {10 + j}
2 send 3 70000 {seed * 100 + j}
3 recv 3 20000 back
4 pipe 5 6
5 fork kid
6 send 6 3000 {j}
7 put done 8 {j}
section kid
1 recv 5 3000 frompipe
2 tagpid me
3 compute frompipe
"""))
    return Scenario(seed, k, roots, 1 + 2 * leaves, 0, pid_keys={"me"})


def test_c07_script_shape(tmp_path):
    rng = random.Random(7)
    lines_seen, bad = {}, []
    for k in (1, 3, 8):
        sc = hub_scenario(k, k)
        ref, total = sc.reference()
        for trial in range(5):
            at = rng.randint(1, total - 1)
            c = sc.build()
            c.run(until=at)
            res = c.checkpoint(tmp_path / f"{k}-{trial}")
            pre = RunOutcome.of(c)
            inv = storage.parse_restart_script(res.script.read_text())
            lines_seen.setdefault(k, set()).add(len(inv))
            n_hosts = rng.randint(k, 8)
            rr = restart_sim_from_script(res.script, shuffled_placement(len(inv), n_hosts, rng),
                                         n_hosts=n_hosts, seed=k)
            rr.cluster.run()
            if sc.outcome(rr.cluster, pre) != ref:
                bad.append((k, at))
    shape_ok = all(s == {k} for k, s in lines_seen.items())
    record(7, shape_ok and not bad,
           f"script invocations per host count: {dict(sorted(lines_seen.items()))}, "
           f"{len(bad)} restored runs differ from the reference")


# 8 ------------------------------------------------------------------------------------

def test_c08_two_generations(tmp_path):
    rng = random.Random(8)
    bad, tried = [], 0
    for seed in range(500, 540):
        sc = generate(seed)
        ref, total = sc.reference()
        if total < 4:
            continue
        tried += 1
        t1 = rng.randint(1, total // 2)
        c = sc.build()
        c.run(until=t1)
        first = c.vpids_by_name()
        res1 = c.checkpoint(tmp_path / f"{seed}a")
        pre1 = RunOutcome.of(c)
        n_lines = len(storage.parse_restart_script(res1.script.read_text()))
        hosts = max(sc.n_hosts, rng.randint(1, 8))
        rr1 = restart_sim_from_script(res1.script, shuffled_placement(n_lines, hosts, rng),
                                      n_hosts=hosts, seed=seed)
        gen1 = rr1.cluster.vpids_by_name()
        rr1.cluster.run(until=rr1.cluster.clock + rng.randint(1, max(1, total - t1)))
        second = rr1.cluster.vpids_by_name()
        res2 = rr1.cluster.checkpoint(tmp_path / f"{seed}b")
        pre2 = RunOutcome.of(rr1.cluster, pre1)
        n_lines = len(storage.parse_restart_script(res2.script.read_text()))
        hosts = max(sc.n_hosts, rng.randint(1, 8))
        rr2 = restart_sim_from_script(res2.script, shuffled_placement(n_lines, hosts, rng),
                                      n_hosts=hosts, seed=seed)
        gen2 = rr2.cluster.vpids_by_name()
        rr2.cluster.run()
        kept = (all(gen1.get(n) == v for n, v in first.items())
                and all(gen2.get(n) == v for n, v in second.items()))
        if sc.outcome(rr2.cluster, pre2) != ref or not kept:
            bad.append((seed, kept))
    record(8, not bad and tried >= 30,
           f"{tried} scenarios through two checkpoint/restart generations, "
           f"{len(bad)} differ or lost a vpid")


# 9 ------------------------------------------------------------------------------------

def test_c09_report(tmp_path, capsys):
    from conftest import CLIENT, PINGPONG
    trace = tmp_path / "timings" / "all.jsonl"
    for rep in range(10):
        c = Cluster(2, rep)
        c.spawn_process(0, PINGPONG)
        c.spawn_process(1, CLIENT)
        c.run(until=4)
        res = c.checkpoint(tmp_path / f"rep{rep}")
        rr = restart_sim([[str(res.images[v])] for v in sorted(res.images)],
                         [0] * len(res.images), n_hosts=2, seed=rep)
        report.write_records([{**r, "mode": "plain", "run": f"rep{rep}"}
                              for r in res.timings + rr.timings], trace)
    code = cli_main(["report", "--csv", str(trace)])
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))

    # oracle: regroup the raw records by hand and let numpy do the statistics
    raw = report.parse_records(trace.read_text())
    ok = code == 0
    details = []
    for section, table in (("checkpoint", report.CHECKPOINT_ROWS),
                           ("restart", report.RESTART_ROWS)):
        got = [r for r in rows if r["section"] == section]
        names = [r["row"] for r in got]
        expect = [label for label, _ in table] + ["Total"]
        ok &= names == expect
        per_rep: dict = {}
        for r in raw:
            if r["path"] == section:
                st = per_rep.setdefault(r["run"], {})
                st[r["stage"]] = max(st.get(r["stage"], 0.0), r["duration"])
        ok &= len(per_rep) == 10
        for row in got:
            stage = dict(table).get(row["row"])
            vals = np.array([sum(st.get(s, 0.0) for _, s in table) if stage is None
                             else st.get(stage, 0.0) for st in per_rep.values()])
            ok &= row["reps"] == "10"
            ok &= abs(float(row["mean"]) - vals.mean()) < 1e-6
            ok &= abs(float(row["std"]) - vals.std(ddof=1)) < 1e-6
        details.append(f"{section} rows {names}")
    record(9, bool(ok), "; ".join(details) + "; mean/std over 10 reps match numpy")


# 10 -----------------------------------------------------------------------------------

@pytest.mark.slow
def test_c10_real_sockets(tmp_path):
    t0 = time.monotonic()
    ref = R.ring_reference(tmp_path / "base", 4, 30, 20000)
    got, facts = R.ring_checkpoint_kill_restart(tmp_path / "run", 4, 30, 20000)
    elapsed = time.monotonic() - t0
    equal = R.without_vpid(got) == R.without_vpid(ref)
    kept = {n: r["vpid"] for n, r in got.items()} == facts["pids"]
    record(10, equal and kept and elapsed < 60,
           f"4 processes killed after epoch {facts['epoch']} and restarted: streams equal "
           f"{equal}, pids kept {kept}, {elapsed:.1f}s")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", *sys.argv[1:]]))
