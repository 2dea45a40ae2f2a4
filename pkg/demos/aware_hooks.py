"""How an application can cooperate with checkpointing.

    python3 demos/aware_hooks.py

One simulated process registers hooks, guards a critical section with a
delay region, and asks for a checkpoint itself.  The printed event log
shows the order in which things happen.
"""

from __future__ import annotations

import tempfile

from dckpt import aware
from dckpt.errors import NotAttached
from dckpt.restart import restart_sim
from dckpt.simnet import Cluster

PROGRAM = """section main
1 hook trace
2 put counter 8 1
3 delay_enter
4 compute counter
5 delay_exit
6 yield
7 yield
"""


def main() -> None:
    print("outside any managed process:")
    print("  is_under_ckpt() ->", aware.is_under_ckpt())
    try:
        aware.request_checkpoint_from_app()
    except NotAttached as exc:
        print("  request_checkpoint_from_app() ->", type(exc).__name__, exc)

    cluster = Cluster(1, seed=0)
    vpid = cluster.spawn_process(0, PROGRAM)
    ckpt_dir = tempfile.mkdtemp()
    cluster.configure_checkpoints(ckpt_dir)
    cluster.run(until=3)       # now inside the delay region

    events = []
    ctx = aware.SimAware(cluster, vpid)
    with aware.use(ctx):
        print("\ninside process", vpid)
        print("  status ->", aware.status())
        aware.register_hooks(pre_ckpt=lambda: events.append("pre_ckpt hook"),
                             post_ckpt=lambda: events.append("post_ckpt hook"))

    def observer(phase, c, managers):
        events.append(f"barrier {phase}")

    # a checkpoint requested now has to wait for the region to close
    thread = cluster.procs[vpid].threads[0]
    print(f"  thread is at step {thread.pc + 1}, delay depth {thread.delay}")
    result = cluster.checkpoint(ckpt_dir, observer=observer)
    print(f"  checkpoint {result.epoch} taken once the thread reached step {thread.pc + 1}, "
          f"delay depth {thread.delay}")
    print("  order of events:")
    for e in events:
        print("    ", e)

    cluster.run()
    print("  hook trace in the heap (the workload's own record):", bytes(cluster.procs[vpid].heap["trace"]).decode())

    # restart from the image: the restart path fires post_restart instead
    rr = restart_sim([[str(result.images[vpid])]], [0], n_hosts=1)
    print("\nafter restart, the restored process sees:",
          bytes(rr.cluster.procs[vpid].heap.get("trace", b"")).decode() or "(no trace yet)")
    rr.cluster.run()
    print("and at the end of the run:", bytes(rr.cluster.procs[vpid].heap["trace"]).decode())


if __name__ == "__main__":
    main()
