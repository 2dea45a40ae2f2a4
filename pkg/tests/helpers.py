"""Oracles shared by the module tests and the acceptance suite.

Everything here reads simulator state directly (channel queues, descriptor
tables) and never goes through the checkpoint code it is checking.
"""

from __future__ import annotations

import random

from dckpt import wire
from dckpt.ckpt_manager import run_sim_epoch
from dckpt.core import Role, side_key
from dckpt.simnet import Cluster
from dckpt.wire import Frame

IDLE = "section main\n1 yield\n"

# byte strings that look like the real-mode control frames
TOKENISH = [wire.pack(Frame.TOKEN), wire.pack(Frame.REFILL), wire.pack(Frame.DATA, b"x"),
            bytes([0x21]) * 8, b"\x00\x00\x00\x00"]


def random_payload(rng: random.Random, n: int) -> bytes:
    """Random bytes with token-lookalikes spliced in."""
    out = bytearray(rng.randbytes(n))
    for _ in range(rng.randint(0, 4)):
        if not n:
            break
        pat = rng.choice(TOKENISH)
        at = rng.randrange(n)
        out[at:at + len(pat)] = pat
    return bytes(out[:n])


def share_topology(rng: random.Random, *, max_roots: int = 4, max_forks: int = 8,
                   max_socks: int = 6, close_p: float = 0.15) -> Cluster:
    """Random processes holding random sockets and pipes, shared through
    forks, with some descriptors closed again afterwards."""
    c = Cluster(rng.randint(1, 4), rng.randrange(1 << 30))
    roots = [c.spawn_process(rng.randrange(len(c.hosts)), IDLE)
             for _ in range(rng.randint(1, max_roots))]
    procs = list(roots)
    for _ in range(rng.randint(1, max_socks)):
        a = rng.choice(procs)
        if rng.random() < 0.3:
            c.promote_pipe(a)
        else:
            b = rng.choice(procs)
            c.sim_connect(a, (b, c.sim_listen(b)))
        for _ in range(rng.randint(0, 2)):
            if len(procs) < len(roots) + max_forks:
                procs.append(c.sim_fork(rng.choice(procs)))
    for v in procs:
        p = c.procs[v]
        for fd in list(p.fds):
            if p.fds[fd].is_stream and rng.random() < close_p:
                c.sim_close(v, fd)
    return c


def fill_in_flight(c: Cluster, rng: random.Random, max_bytes: int = 64 * 1024) -> None:
    for ch in c.channels:
        for role in (Role.CONNECTOR, Role.ACCEPTOR):
            if ch.kind.value == "promoted-pipe" and role is Role.ACCEPTOR:
                continue
            n = rng.choice([0, rng.randint(1, 64), rng.randint(0, max_bytes)])
            n = min(n, ch.capacity)
            ch.dirs[role].push(random_payload(rng, n))


def snapshot(c: Cluster) -> dict[str, bytes]:
    """In-flight bytes per receiving side key, read straight off the queues."""
    out = {}
    for ch in c.channels:
        for role, d in ch.dirs.items():
            out[side_key(ch.socket_id, role.peer)] = d.contents()
    return out


def holders(c: Cluster) -> dict[str, set[int]]:
    out: dict[str, set[int]] = {}
    for p in c.procs.values():
        for desc in p.fds.values():
            out.setdefault(desc.key, set()).add(p.vpid)
    return out


def run_checked_epoch(c: Cluster, ckpt_dir, **kw) -> dict:
    """One epoch with oracle checks at every barrier.  Returns the facts
    observed; callers assert on them."""
    facts = {"drain_ok": True, "quiet_ok": True, "refill_ok": True, "leaders_ok": True,
             "mismatch": []}
    state: dict = {}

    def observer(phase, cluster, managers):
        if phase == "suspended":
            state["before"] = snapshot(cluster)
            state["holders"] = holders(cluster)
        elif phase == "drained":
            before = state["before"]
            # leader uniqueness by brute force over every process
            for key, hs in state["holders"].items():
                leaders = [v for v, m in managers.items() if m.is_leader(key)]
                if len(leaders) != 1 or leaders[0] not in hs:
                    facts["leaders_ok"] = False
                    facts["mismatch"].append(("leader", key, leaders, sorted(hs)))
            for key, data in before.items():
                if key not in state["holders"]:
                    continue
                got = [m.buffer[key] for m in managers.values() if key in m.buffer]
                if got != [data]:
                    facts["drain_ok"] = False
                    facts["mismatch"].append(("drain", key, len(data), [len(g) for g in got]))
            # quiescence: nothing in flight toward a held side, no thread ran
            for ch in cluster.channels:
                for role, d in ch.dirs.items():
                    if side_key(ch.socket_id, role.peer) in state["holders"] and d.items:
                        facts["quiet_ok"] = False
        elif phase == "refilled":
            after = snapshot(cluster)
            for key, data in state["before"].items():
                if key in state["holders"] and after.get(key) != data:
                    facts["refill_ok"] = False
                    facts["mismatch"].append(("refill", key))
            facts["leaders"] = {k: [v for v, m in managers.items() if m.is_leader(k)]
                                for k in state["holders"]}

    facts["result"] = run_sim_epoch(c, started=False, ckpt_dir=ckpt_dir, observer=observer,
                                    script=False, **kw)
    return facts
