"""Random deadlock-free workloads for the simulator.

A scenario is generated as one global sequence of events (process
creation, connection setup, pipe creation, transfers, local work).  Each
process's program is the subsequence of events it takes part in, in global
order.  Blocking operations then always make progress: the earliest
unfinished event has every participant waiting on it, and a send larger than
the channel capacity drains as the receiver reads.

Every channel end has exactly one *user* for its whole life; other holders
(forked children that inherit the descriptor, or parents that handed it to a
child) keep it open without touching it, which is what makes descriptor
sharing and leader election non-trivial without racing readers.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .simnet import Cluster, RunOutcome


@dataclass
class Proc:
    name: str
    section: str
    host: int
    parent: "Proc | None" = None
    root: "Proc | None" = None
    ops: list[str] = field(default_factory=list)
    kids: int = 0
    segs: set = field(default_factory=set)
    next_fd: list = field(default_factory=lambda: [3])   # shared per process tree

    def emit(self, op: str) -> None:
        self.ops.append(op)

    def fd(self) -> int:
        n = self.next_fd[0]
        self.next_fd[0] += 1
        return n


@dataclass
class Chan:
    """A one- or two-way byte channel.  ``ends`` maps end -> (user, fd)."""

    kind: str
    ends: dict
    oneway: bool = False
    shm: str | None = None        # segment shared by both users, if any


@dataclass
class Scenario:
    seed: int
    n_hosts: int
    roots: list[tuple[int, str]]          # (host, program text) per root
    n_procs: int
    n_events: int
    features: set = field(default_factory=set)
    pid_keys: set = field(default_factory=set)    # heap keys holding a vpid

    def build(self, **kw) -> Cluster:
        c = Cluster(self.n_hosts, self.seed, **kw)
        for host, text in self.roots:
            c.spawn_process(host, text)
        return c

    def reference(self, max_ticks: int = 200_000) -> tuple[RunOutcome, int]:
        c = self.build()
        c.run(until=max_ticks)
        if not c.all_done():
            raise RuntimeError(f"scenario {self.seed} did not finish")
        return self.outcome(c), c.clock

    def outcome(self, cluster, prefix: RunOutcome | None = None) -> RunOutcome:
        """Like :meth:`RunOutcome.of` but with vpid-valued heap entries
        replaced by the name of the process owning that vpid.  Processes
        created after a restart get fresh vpids that need not match an
        uninterrupted run; what must hold is that the value still names the
        right process."""
        out = RunOutcome.of(cluster, prefix)
        names = {str(v): n for n, v in cluster.vpids_by_name().items()}
        for heap in out.heaps.values():
            for k in self.pid_keys & set(heap):
                heap[k] = names.get(heap[k].decode(), "?").encode()
        return out

    def program_text(self) -> str:
        return "\n".join(f"# root on host {h}\n{t}" for h, t in self.roots)


def check_restart(sc: Scenario, ckpt_dir, *, at: int | None = None, rng=None,
                  max_hosts: int = 8, mode: str = "plain") -> tuple[bool, dict]:
    """Run ``sc`` to tick ``at``, checkpoint, restart from the generated
    script on a random placement and run to completion.  Returns whether
    the result matches an uninterrupted run, plus details."""
    from .restart import restart_sim_from_script, shuffled_placement
    rng = rng or random.Random(sc.seed)
    ref, total = sc.reference()
    at = at if at is not None else rng.randint(1, max(1, total - 1))
    c = sc.build()
    c.run(until=at)
    res = c.checkpoint(ckpt_dir, mode=mode)
    pre = RunOutcome.of(c)
    before = c.vpids_by_name()
    n_lines = len(_script_lines(res.script))
    # spawn steps name hosts by index, so keep at least the original count
    n_hosts = max(sc.n_hosts, rng.randint(1, max_hosts))
    placement = shuffled_placement(n_lines, n_hosts, rng)
    rr = restart_sim_from_script(res.script, placement, n_hosts=n_hosts, seed=sc.seed)
    after = rr.cluster.vpids_by_name()
    rr.cluster.run()
    out = sc.outcome(rr.cluster, pre)
    vpids_kept = all(after.get(n) == v for n, v in before.items())
    ok = out == ref and vpids_kept
    return ok, {"at": at, "total": total, "epoch": res.epoch, "n_hosts": n_hosts,
                "placement": placement, "vpids_kept": vpids_kept,
                "heaps_equal": out.heaps == ref.heaps,
                "delivered_equal": out.delivered == ref.delivered,
                "files_equal": out.files == ref.files}


def _script_lines(script) -> list:
    from pathlib import Path
    from . import storage
    return storage.parse_restart_script(Path(script).read_text())


def _programs(procs: list[Proc]) -> list[tuple[int, str]]:
    out = []
    for root in [p for p in procs if p.parent is None]:
        members = [p for p in procs if p.root is root]
        lines = []
        for p in members:
            lines.append(f"section {p.section}")
            ops = p.ops or ["yield"]
            lines += [f"{i} {op}" for i, op in enumerate(ops, 1)]
        out.append((root.host, "\n".join(lines) + "\n"))
    return out


def generate(seed: int, *, min_procs: int = 2, max_procs: int = 32, max_hosts: int = 8,
             max_events: int = 60, max_msg: int = 96 * 1024) -> Scenario:
    rng = random.Random(seed)
    n_hosts = rng.randint(1, max_hosts)
    target = rng.randint(min_procs, max_procs)
    n_roots = rng.randint(1, min(4, target))
    procs: list[Proc] = []
    chans: list[Chan] = []
    features: set[str] = set()
    pid_keys: set[str] = set()
    events = 0
    keyseq = [0]

    def key() -> str:
        keyseq[0] += 1
        return f"k{keyseq[0]}"

    for i in range(n_roots):
        p = Proc(f"p{i}", "main", rng.randrange(n_hosts))
        p.root = p
        procs.append(p)

    def connect(a: Proc, c: Proc) -> None:
        lfd, afd, cfd = a.fd(), a.fd(), c.fd()
        a.emit(f"listen {lfd}")
        a.emit(f"accept {afd} {lfd}")
        c.emit(f"connect {cfd} {a.name} {lfd}")
        chans.append(Chan("tcp", {"a": (a, afd), "c": (c, cfd)}))
        features.add("tcp")

    def create(parent: Proc) -> Proc:
        nonlocal events
        parent.kids += 1
        spawn = n_hosts > 1 and rng.random() < 0.3
        name = f"{parent.name}.r{parent.kids}" if spawn else f"{parent.name}.{parent.kids}"
        section = "s" + name.replace(".", "_")
        host = rng.randrange(n_hosts) if spawn else parent.host
        child = Proc(name, section, host, parent, parent.root)
        if spawn:
            # a remote exec starts from scratch: no inherited descriptors
            child.next_fd = [3]
            parent.emit(f"spawn {host} {section}")
            features.add("spawn")
            procs.append(child)
            return child
        child.next_fd = parent.next_fd
        child.segs = set(parent.segs)
        pipe = rng.random() < 0.5
        if pipe:
            r, w = parent.fd(), parent.fd()
            parent.emit(f"pipe {r} {w}")
            shm = None
            if rng.random() < 0.6:
                shm = f"m{len(chans)}"
                parent.emit(f"mmap {shm} /shm/{seed}/{shm} 1")
                child.segs.add(shm)
                features.add("shm")
            if rng.random() < 0.5:
                ends = {"r": (child, r), "w": (parent, w)}
            else:
                ends = {"r": (parent, r), "w": (child, w)}
            chans.append(Chan("pipe", ends, oneway=True, shm=shm))
            features.add("pipe")
        parent.emit(f"fork {section}")
        features.add("fork")
        # inherited ends: sometimes the child takes over as user
        for ch in chans:
            for end, (user, fd) in list(ch.ends.items()):
                if user is parent and ch.kind == "tcp" and rng.random() < 0.3:
                    ch.ends[end] = (child, fd)
                    features.add("handoff")
        if pipe and rng.random() < 0.5:
            # classic pipe hygiene: each side closes the end it does not use
            ch = chans[-1]
            for end, (user, fd) in ch.ends.items():
                other = child if user is parent else parent
                other.emit(f"close {fd}")
            features.add("close")
        procs.append(child)
        events += 1
        return child

    def transfer() -> None:
        ch = rng.choice(chans)
        if ch.oneway:
            (snd, sfd), (rcv, rfd) = ch.ends["w"], ch.ends["r"]
        else:
            e = list(ch.ends.values())
            rng.shuffle(e)
            (snd, sfd), (rcv, rfd) = e
        if snd is rcv:
            return
        if rng.random() < 0.15:
            n = rng.randint(64 * 1024, max_msg)
        else:
            n = rng.randint(1, 8 * 1024)
        k = key()
        if ch.shm and rng.random() < 0.7:
            off, m = rng.randrange(0, 2048), rng.randint(1, 1024)
            snd.emit(f"shmwrite {ch.shm} {off} {m} {rng.randrange(1 << 30)}")
            rcv_after = f"shmread {ch.shm} {off} {m} {k}s"
        else:
            rcv_after = None
        snd.emit(f"send {sfd} {n} {rng.randrange(1 << 30)}")
        rcv.emit(f"recv {rfd} {n} {k}")
        if rcv_after:
            rcv.emit(rcv_after)
        if rng.random() < 0.3:
            rcv.emit(f"compute {k}")

    def local(p: Proc) -> None:
        r = rng.random()
        if r < 0.4:
            p.emit(f"put {key()} {rng.randint(1, 256)} {rng.randrange(1 << 30)}")
        elif r < 0.6:
            k = key()
            pid_keys.add(k)
            p.emit(f"tagpid {k}")
        elif r < 0.8:
            k = key()
            p.emit("delay_enter")
            p.emit(f"put {k} 32 {rng.randrange(1 << 30)}")
            p.emit(f"compute {k}")
            p.emit("delay_exit")
            features.add("delay")
        else:
            p.emit("yield")

    n_events = rng.randint(max_events // 3, max_events)
    while len(procs) < target or events < n_events:
        r = rng.random()
        if len(procs) < target and r < 0.35:
            create(rng.choice(procs))
        elif len(procs) > 1 and (r < 0.55 or not chans):
            a, c = rng.sample(procs, 2)
            connect(a, c)
        elif chans and r < 0.9:
            transfer()
        else:
            local(rng.choice(procs))
        events += 1
        if events > 4 * max_events + 4 * target:
            break
    return Scenario(seed, n_hosts, _programs(procs), len(procs), events, features, pid_keys)
