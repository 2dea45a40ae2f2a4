"""Helpers for tests that start real worker processes on localhost."""

from __future__ import annotations

import json
import os
import signal
import statistics
import subprocess
import sys
import time
from pathlib import Path

import dckpt
from dckpt.coordinator import CoordinatorClient, CoordinatorServer

SRC = str(Path(dckpt.__file__).resolve().parent.parent)


def env() -> dict:
    return {**os.environ, "PYTHONPATH": SRC + os.pathsep + os.environ.get("PYTHONPATH", "")}


def ring(i: int, n: int, rounds: int, size: int) -> str:
    """Process i sends to i+1 and receives from i-1, ``rounds`` times."""
    nxt = f"p{(i + 1) % n}"
    lines = ["section main", "1 listen 3", f"2 connect 4 {nxt} 3", "3 accept 5 3"]
    k = 4
    for r in range(rounds):
        lines += [f"{k} send 4 {size} {i * 100 + r}", f"{k + 1} recv 5 {size} in",
                  f"{k + 2} compute in"]
        k += 3
    return "\n".join(lines) + "\n"


def without_vpid(res: dict) -> dict:
    """Results minus the OS pid, which differs between independent runs."""
    return {n: {k: v for k, v in r.items() if k != "vpid"} for n, r in res.items()}


def start(run: Path, addr: str, programs: dict[str, str], options: dict | None = None):
    procs = []
    for name, text in programs.items():
        wl = run / f"{name}.wl"
        wl.write_text(text)
        procs.append(subprocess.Popen(
            [sys.executable, "-m", "dckpt.realmode", "worker", name, str(wl), "--dir", str(run),
             "--coordinator", addr, "--options", json.dumps(options or {})], env=env()))
    return procs


def results(run: Path, names, timeout: float = 60) -> dict:
    deadline = time.monotonic() + timeout
    files = [run / "results" / f"{n}.json" for n in names]
    while time.monotonic() < deadline:
        if all(f.exists() for f in files):
            time.sleep(0.05)    # let the writer finish the last file
            return {f.stem: json.loads(f.read_text()) for f in files}
        time.sleep(0.05)
    raise TimeoutError(f"no results in {run} after {timeout}s")


def wait_registered(client: CoordinatorClient, n: int, timeout: float = 30) -> None:
    deadline = time.monotonic() + timeout
    while client.status()["processes"] < n:
        if time.monotonic() > deadline:
            raise TimeoutError(f"only {client.status()['processes']} of {n} registered")
        time.sleep(0.02)


def stop(procs, client: CoordinatorClient | None = None) -> None:
    if client is not None:
        try:
            client.quit()
        except Exception:
            pass
    for p in procs:
        try:
            p.wait(timeout=10)
        except subprocess.TimeoutExpired:
            p.kill()
            p.wait()


def ring_reference(base: Path, n: int, rounds: int, size: int) -> dict:
    base.mkdir(parents=True, exist_ok=True)
    srv = CoordinatorServer().start()
    names = [f"p{i}" for i in range(n)]
    procs = start(base, srv.address, {nm: ring(i, n, rounds, size) for i, nm in enumerate(names)})
    try:
        return results(base, names)
    finally:
        stop(procs, CoordinatorClient(srv.address))
        srv.stop()


def ring_checkpoint_kill_restart(run: Path, n: int, rounds: int, size: int,
                                 pace: float = 0.02, timeout: float = 60) -> tuple[dict, dict]:
    """Checkpoint a running ring, kill every worker, run the restart script
    and return the results plus some facts about the run."""
    run.mkdir(parents=True, exist_ok=True)
    srv = CoordinatorServer().start()
    names = [f"p{i}" for i in range(n)]
    procs = start(run, srv.address, {nm: ring(i, n, rounds, size) for i, nm in enumerate(names)},
                  {"pace": pace})
    client = CoordinatorClient(srv.address, timeout=30)
    facts: dict = {}
    restarter = None
    try:
        wait_registered(client, n)
        time.sleep(0.3)
        epoch = client.request_checkpoint(wait=True, timeout=timeout)
        script = client.wait_script(epoch, timeout)
        facts.update(epoch=epoch, script=script, pids={f"p{i}": p.pid for i, p in enumerate(procs)})
        for p in procs:
            p.send_signal(signal.SIGKILL)
        for p in procs:
            p.wait()
        facts["partial_results"] = sorted(f.stem for f in (run / "results").glob("*.json")) \
            if (run / "results").exists() else []
        for f in (run / "results").glob("*.json") if (run / "results").exists() else []:
            f.unlink()
        t0 = time.monotonic()
        restarter = subprocess.Popen(["sh", script], env=env())
        got = results(run, names, timeout)
        facts["restart_seconds"] = time.monotonic() - t0
        return got, facts
    finally:
        try:
            client.quit()
        except Exception:
            pass
        if restarter is not None:
            try:
                restarter.wait(timeout=20)
            except subprocess.TimeoutExpired:
                restarter.kill()
        srv.stop()


def suspended_times(run: Path) -> list[float]:
    out = []
    for f in (run / "timings").glob("*.jsonl"):
        for line in f.read_text().splitlines():
            r = json.loads(line)
            if r["stage"] == "suspended" and r["path"] == "checkpoint":
                out.append(r["duration"])
    return out


BIG_HEAP = """section main
1 put big {size} 7
2 yield
"""


def median_suspended(run: Path, mode: str, heap_bytes: int, reps: int = 10) -> float:
    """Median time one lingering process with a ``heap_bytes`` heap stays
    suspended per checkpoint, over ``reps`` checkpoints."""
    run.mkdir(parents=True, exist_ok=True)
    srv = CoordinatorServer().start()
    procs = start(run, srv.address, {"big": BIG_HEAP.format(size=heap_bytes)},
                  {"mode": mode, "linger": True})
    client = CoordinatorClient(srv.address, timeout=60)
    try:
        wait_registered(client, 1)
        results(run, ["big"])
        for _ in range(reps):
            e = client.request_checkpoint(wait=True, timeout=120)
            client.wait_script(e, 120)
        # the record is appended just after the epoch's script is published
        deadline = time.monotonic() + 30
        while len(times := suspended_times(run)) < reps and time.monotonic() < deadline:
            time.sleep(0.05)
        assert len(times) == reps, times
        return statistics.median(times)
    finally:
        stop(procs, client)
        srv.stop()
