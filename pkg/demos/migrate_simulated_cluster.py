"""Checkpoint a simulated multi-host computation and bring it back on a
different set of hosts.

    python3 demos/migrate_simulated_cluster.py [seed]

A random workload (fork trees, TCP connections, pipes, shared memory) runs
on a simulated cluster.  Halfway through, every process is checkpointed,
the cluster is thrown away, and the restart script is replayed onto a new
cluster with a shuffled host assignment.  The final heaps and delivered byte
streams are compared with a run that was never interrupted.
"""

from __future__ import annotations

import random
import sys
import tempfile

from dckpt import storage
from dckpt.restart import restart_sim_from_script, shuffled_placement
from dckpt.scenarios import generate
from dckpt.simnet import RunOutcome


def main(seed: int) -> int:
    sc = generate(seed)
    print(f"scenario {seed}: {sc.n_procs} processes on {sc.n_hosts} host(s), "
          f"features {sorted(sc.features)}")

    reference, total = sc.reference()
    print(f"uninterrupted run finishes at tick {total}")

    cluster = sc.build()
    cluster.run(until=total // 2)
    in_flight = sum(len(v) for v in cluster.in_flight().values())
    print(f"tick {cluster.clock}: {len(cluster.procs)} processes, {in_flight} bytes in flight")

    with tempfile.TemporaryDirectory() as d:
        res = cluster.checkpoint(d)
        before = cluster.vpids_by_name()
        prefix = RunOutcome.of(cluster)
        print(f"checkpoint {res.epoch}: {len(res.images)} images")
        print(res.script.read_text())

        rng = random.Random(seed)
        lines = storage.parse_restart_script(res.script.read_text())
        hosts = max(sc.n_hosts, rng.randint(1, 8))
        placement = shuffled_placement(len(lines), hosts, rng)
        print(f"restarting onto {hosts} host(s), script line -> host {placement}")
        rr = restart_sim_from_script(res.script, placement, n_hosts=hosts, seed=seed)

    slowest: dict[str, float] = {}
    for r in rr.timings:
        slowest[r["stage"]] = max(slowest.get(r["stage"], 0.0), r["duration"])
    for stage, secs in slowest.items():
        print(f"  {stage:16} {secs * 1000:.2f} ms (slowest host)")
    after = rr.cluster.vpids_by_name()
    rr.cluster.run()
    outcome = sc.outcome(rr.cluster, prefix)

    kept = all(after.get(n) == v for n, v in before.items())
    same = outcome == reference
    print(f"virtual pids preserved: {kept}")
    print(f"result identical to the uninterrupted run: {same}")
    return 0 if kept and same else 1


if __name__ == "__main__":
    sys.exit(main(int(sys.argv[1]) if len(sys.argv) > 1 else 4))
