"""Restart engine.

Per host a single *unified* restart process recreates every descriptor its
processes held (files and listeners first, then connected sockets via the
discovery service), forks once per process so shared descriptors are
inherited, moves descriptors back to their original numbers, restores
memory and threads, and then re-enters the checkpoint protocol right after
the 'checkpointed' barrier to refill and resume.
"""

from __future__ import annotations

import os
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import storage
from .core import (BarrierName, CheckpointImage, DescriptorKind, DescriptorRecord, Role,
                   assign_virtual_pid, Conflict, side_key)
from .errors import (BadDescriptor, DirectoryNotWritable, FdCollisionUnresolvable,
                     HandshakeMismatch, IncompleteEpoch, LookupTimeout, MissingImage,
                     RetryBudgetExhausted)
from .substrate import DEFAULT_SUBSTRATE

RETRY_BUDGET = 1024
MAX_FD = 1024


# --- virtual pids -------------------------------------------------------------------

def fork_until_no_conflict(requested: int | None, live, forker: Callable[[], int],
                           budget: int = RETRY_BUDGET, on_conflict=None,
                           kill: Callable[[int], None] | None = None) -> tuple[int, int]:
    """Fork until the child's real pid does not shadow another live vpid.

    ``forker`` returns the real pid of a fresh child.  With ``requested``
    None the child takes its real pid as vpid (a brand-new process); with a
    requested vpid (a restored process) only the real pid has to avoid
    other processes' vpids.  Returns ``(real_pid, vpid)``.
    """
    live = set(live)
    for _ in range(budget):
        real = forker()
        if requested is None:
            res = assign_virtual_pid(None, real, live)
            if not isinstance(res, Conflict):
                return real, res.vpid
        elif real == requested or real not in live:
            return real, requested
        if on_conflict is not None:
            on_conflict(real)
        if kill is not None:
            kill(real)
    raise RetryBudgetExhausted(f"{budget} forks all collided with live vpids")


# --- descriptor rearrangement -------------------------------------------------------

def rearrange_descriptors(table: dict[int, object], wanted: dict[int, int],
                          max_fd: int = MAX_FD) -> tuple[dict[int, object], list[tuple]]:
    """Apply dup2/close moves so that ``new[target] is table[source]`` for
    every ``target -> source`` in ``wanted`` and nothing else stays open.

    Returns the new table and the list of operations.  A permutation cycle
    is broken by first copying one member to a spare slot above every fd in
    use; FdCollisionUnresolvable is raised when no such slot fits under
    ``max_fd``.
    """
    cur = dict(table)
    ops: list[tuple] = []
    for t, s in wanted.items():
        if s not in cur:
            raise BadDescriptor(f"source fd {s} for target {t} is not open")
    pending = {t: s for t, s in wanted.items() if t != s}
    spare = max([*cur, *wanted, 2]) + 1

    def dup2(src, dst):
        cur[dst] = cur[src]
        ops.append(("dup2", src, dst))

    while pending:
        needed = set(pending.values())
        ready = sorted(t for t in pending if t not in needed)
        if ready:
            t = ready[0]
            dup2(pending.pop(t), t)
            continue
        # every pending target still holds a needed source: a cycle
        t = min(pending)
        while spare in cur or spare in wanted:
            spare += 1
        if spare >= max_fd:
            raise FdCollisionUnresolvable(f"no free descriptor below {max_fd} to break a cycle")
        dup2(t, spare)
        for k, s in pending.items():
            if s == t:
                pending[k] = spare
    for fd in sorted(cur):
        if fd not in wanted:
            del cur[fd]
            ops.append(("close", fd))
    return cur, ops


# --- shared memory ------------------------------------------------------------------

class OsFilesystem:
    """Real-filesystem adapter with the same surface as SimFilesystem."""

    files = None

    @staticmethod
    def exists(path: str) -> bool:
        return os.path.exists(path)

    @staticmethod
    def can_write(path: str) -> bool:
        return os.access(path, os.W_OK)

    @staticmethod
    def dir_writable(path: str) -> bool:
        return os.access(os.path.dirname(path) or ".", os.W_OK)

    @staticmethod
    def write_file(path: str, data: bytes, readonly: bool = False) -> None:
        with open(path, "wb") as fh:
            fh.write(data)

    @staticmethod
    def read_file(path: str) -> bytes:
        with open(path, "rb") as fh:
            return fh.read()



def _fs_overwrite(fs, path, data):
    if getattr(fs, "files", None) is not None:
        buf = fs.files[path]
        if len(buf) < len(data):
            buf.extend(bytes(len(data) - len(buf)))
        buf[:len(data)] = data
    else:
        with open(path, "r+b") as fh:
            fh.write(data)


@dataclass
class SegmentRecord:
    path: str
    data: bytes


def restore_shared_memory(fs, segments) -> list[str]:
    """Bring every segment's backing file to its restored state.

    * backing file missing, directory writable: create it, then write the
      checkpointed bytes (``"created"``);
    * file present and writable: overwrite with the checkpointed bytes
      (``"overwritten"``); concurrent sharers write identical data;
    * no write access: keep the file's current contents (``"kept"``).
    """
    outcomes = []
    for seg in segments:
        path, data = (seg.path, seg.data) if isinstance(seg, SegmentRecord) else seg
        if not fs.exists(path):
            if not fs.dir_writable(path):
                raise DirectoryNotWritable(f"cannot create backing file {path}")
            fs.write_file(path, bytes(data))
            outcomes.append("created")
        elif fs.can_write(path):
            _fs_overwrite(fs, path, bytes(data))
            outcomes.append("overwritten")
        else:
            outcomes.append("kept")
    return outcomes


# --- image loading --------------------------------------------------------------------

def load_images(items) -> list[CheckpointImage]:
    out = []
    for item in items:
        if isinstance(item, CheckpointImage):
            out.append(item)
            continue
        if not os.path.exists(item):
            raise MissingImage(f"checkpoint image {item} not found")
        out.append(storage.read_image_file(item))
    return out


def check_epoch(images: list[CheckpointImage]) -> int:
    if not images:
        raise IncompleteEpoch("no images")
    gens = {img.generation for img in images}
    if len(gens) != 1:
        raise IncompleteEpoch(f"images from several generations: {sorted(gens)}")
    size = images[0].meta.get("cluster_size")
    if size is not None and size != len(images):
        raise IncompleteEpoch(f"{len(images)} images for a {size}-process epoch")
    vpids = [img.vpid for img in images]
    if len(set(vpids)) != len(vpids):
        raise IncompleteEpoch("duplicate vpids among images")
    return gens.pop()


# --- simulated unified restart process -------------------------------------------------

class HostRestart:
    """The unified restart process for one simulated host."""

    def __init__(self, cluster, host: int, images: list[CheckpointImage], names: dict[int, str],
                 port: int = 7000, substrate=DEFAULT_SUBSTRATE):
        self.cluster = cluster
        self.host = host
        self.images = sorted(images, key=lambda i: i.vpid)
        self.names = names
        self.address = f"sim-{cluster.hosts[host].name}:{port}"
        self.substrate = substrate
        self.pool: dict[int, object] = {}
        self.by_key: dict[str, int] = {}
        self.pending: dict[str, DescriptorRecord] = {}
        self.timings: dict[str, float] = {}
        self.procs = []

    def _time(self, stage, t0):
        self.timings[stage] = self.timings.get(stage, 0.0) + time.perf_counter() - t0

    def _pool_add(self, key: str, desc) -> int:
        fd = 3
        while fd in self.pool:
            fd += 1
        self.pool[fd] = desc
        self.by_key[key] = fd
        return fd

    def reopen_files_and_listeners(self) -> dict[int, object]:
        from .simnet import OpenDesc
        t0 = time.perf_counter()
        fs = self.cluster.fs
        for img in self.images:
            for rec in img.conn_table.records:
                key = side_key(rec.socket_id, rec.role)
                if key in self.by_key or key in self.pending:
                    continue
                if rec.kind is DescriptorKind.REGULAR_FILE:
                    if not fs.exists(rec.path):
                        raise MissingImage(f"file {rec.path} vanished before restart")
                    desc = OpenDesc(rec.kind, rec.socket_id, path=rec.path, offset=rec.offset,
                                    writable=fs.can_write(rec.path))
                    self._pool_add(key, desc)
                elif rec.kind is DescriptorKind.TCP_LISTENER:
                    self._pool_add(key, OpenDesc(rec.kind, rec.socket_id))
                elif rec.kind.is_stream:
                    self.pending[key] = rec
                else:
                    self._pool_add(key, OpenDesc(rec.kind, rec.socket_id, path=rec.path))
        self._time("restore-files", t0)
        return self.pool

    def actions(self) -> list[tuple]:
        out = []
        for key, rec in sorted(self.pending.items()):
            if rec.peer_closed:
                out.append(("local", self, rec))
            elif rec.role is Role.ACCEPTOR:
                out.append(("advertise", self, rec))
            else:
                out.append(("lookup", self, rec))
        return out

    def _channel(self, rec: DescriptorRecord):
        from .simnet import SimChannel
        sid = rec.socket_id
        label = rec.label or f"{self.names.get(sid.creator_pid, f'v{sid.creator_pid}')}#{sid.conn_seq}"
        ch = SimChannel(sid, rec.kind, label, rec.capacity or self.cluster.capacity)
        self.cluster.channels.append(ch)
        return ch

    def restore_local(self, rec: DescriptorRecord) -> None:
        from .simnet import OpenDesc
        ch = self._channel(rec)
        ch.closed[rec.role.peer] = True
        key = side_key(rec.socket_id, rec.role)
        self._pool_add(key, OpenDesc(rec.kind, rec.socket_id, rec.role, ch))
        del self.pending[key]

    def advertise(self, rec: DescriptorRecord) -> None:
        self.cluster.coordinator.advertise(str(rec.socket_id), self.address)

    def lookup_and_connect(self, rec: DescriptorRecord, engines: dict[str, "HostRestart"]) -> bool:
        addr = self.cluster.coordinator.lookup(str(rec.socket_id))
        if addr is None:
            return False
        engines[addr].accept_connection(rec, self)
        return True

    def accept_connection(self, conn_rec: DescriptorRecord, connector: "HostRestart") -> None:
        """Handshake on this host's restart listener: both sides must agree
        on the socket being restored."""
        from .simnet import OpenDesc
        akey = side_key(conn_rec.socket_id, Role.ACCEPTOR)
        rec = self.pending.get(akey)
        if rec is None or rec.socket_id != conn_rec.socket_id:
            raise HandshakeMismatch(f"{self.address} has no pending socket {conn_rec.socket_id}")
        ch = self._channel(rec)
        self._pool_add(akey, OpenDesc(rec.kind, rec.socket_id, Role.ACCEPTOR, ch))
        del self.pending[akey]
        ckey = side_key(conn_rec.socket_id, Role.CONNECTOR)
        connector._pool_add(ckey, OpenDesc(conn_rec.kind, conn_rec.socket_id, Role.CONNECTOR, ch))
        del connector.pending[ckey]

    def fork_into_user_processes(self, live_vpids: set[int]) -> list:
        from .simnet import SimProcess
        from .workload import parse_workload
        t0 = time.perf_counter()
        c = self.cluster
        for img in self.images:
            real, vpid = fork_until_no_conflict(
                img.vpid, live_vpids, c._alloc_real_pid,
                on_conflict=lambda pid: c.log("fork-conflict", real_pid=pid))
            placeholder = parse_workload("section main\n")
            proc = SimProcess(img.meta.get("name", f"v{vpid}"), vpid, real, self.host,
                              c.hosts[self.host].host_id, placeholder)
            proc.fds = dict(self.pool)
            self.procs.append(proc)
        self._time("restore-memory", t0)
        return self.procs

    def rearrange(self, proc, img: CheckpointImage) -> list[tuple]:
        t0 = time.perf_counter()
        wanted = {rec.fd_num: self.by_key[side_key(rec.socket_id, rec.role)]
                  for rec in img.conn_table.records}
        proc.fds, ops = rearrange_descriptors(proc.fds, wanted)
        for desc in proc.fds.values():
            desc.hold(proc.vpid)
            if desc.owner is None:
                desc.owner = proc.vpid
        self._time("restore-memory", t0)
        return ops

    def restore_snapshot_and_threads(self, proc, img: CheckpointImage) -> None:
        t0 = time.perf_counter()
        state = self.substrate.restore(img.snapshot_blob)
        proc.load_state(state)
        for t in proc.threads:
            t.parked = True
        proc.suspended = True
        proc.status = "restarting"
        restore_shared_memory(self.cluster.fs, [SegmentRecord(p, d)
                                                for p, d in sorted(state.get("shm", {}).items())])
        self._time("restore-memory", t0)


def reconnect_sockets(engines: list[HostRestart], rng: random.Random | None = None) -> int:
    """Rebuild every connected socket through the discovery service.

    Advertise and lookup requests are issued in arbitrary (``rng``-shuffled)
    order; a lookup that finds no advertisement yet is retried later, as a
    blocking lookup would be.  Returns the number of restored channels.
    """
    t0 = time.perf_counter()
    queue = [a for e in engines for a in e.actions()]
    if rng is not None:
        rng.shuffle(queue)
    by_addr = {e.address: e for e in engines}
    stalled = 0
    restored = 0
    while queue:
        kind, eng, rec = queue.pop(0)
        if kind == "local":
            eng.restore_local(rec)
            restored += 1
        elif kind == "advertise":
            eng.advertise(rec)
        elif not eng.lookup_and_connect(rec, by_addr):
            queue.append((kind, eng, rec))
            stalled += 1
            if stalled > len(queue):
                raise LookupTimeout(f"no advertisement for {rec.socket_id}")
            continue
        else:
            restored += 1
        stalled = 0
    elapsed = time.perf_counter() - t0
    for e in engines:
        e.timings["reconnect"] = e.timings.get("reconnect", 0.0) + elapsed / len(engines)
        if e.pending:
            raise LookupTimeout(f"{e.address}: {len(e.pending)} sockets never reconnected")
    return restored


@dataclass
class RestartResult:
    cluster: object
    timings: list[dict] = field(default_factory=list)
    engines: list = field(default_factory=list)


def restart_sim(groups, placement=None, *, n_hosts: int | None = None,
                hostnames: list[str] | None = None, seed: int = 0, fs=None, coordinator=None,
                pid_base: int = 100, shuffle: bool = True, observer=None,
                ckpt_options: dict | None = None) -> RestartResult:
    """Restart a simulated computation.

    ``groups`` is a list of image groups, one per unified restart process
    (one per line of a restart script); ``placement[i]`` is the new host
    index for group ``i`` (default: group ``i`` on host ``i``).  Several
    groups may land on one host.
    """
    from .ckpt_manager import CheckpointManager, SimEndpoint
    from .simnet import Cluster

    groups = [load_images(g) for g in groups]
    images = [img for g in groups for img in g]
    epoch = check_epoch(images)
    placement = list(placement) if placement is not None else list(range(len(groups)))
    n_hosts = n_hosts or (max(placement) + 1)
    meta = images[0].meta
    cluster = Cluster(n_hosts, seed, capacity=meta.get("capacity", 64 * 1024),
                      coordinator=coordinator, fs=fs, pid_base=pid_base, hostnames=hostnames)
    cluster.clock = meta.get("clock", 0)
    cluster.roots = meta.get("roots", 0)
    if ckpt_options:
        cluster.configure_checkpoints(**ckpt_options)
    coord = cluster.coordinator
    coord.begin_restart(epoch, expected=len(images))
    names = {img.vpid: img.meta.get("name", f"v{img.vpid}") for img in images}

    by_host: dict[int, list[CheckpointImage]] = {}
    for g, host in zip(groups, placement):
        cluster._host(host)
        by_host.setdefault(host, []).extend(g)
    engines = [HostRestart(cluster, h, imgs, names, port=7000 + i)
               for i, (h, imgs) in enumerate(sorted(by_host.items()))]
    # engines sharing a host would be separate unified processes in general;
    # merging them per host keeps shared descriptors inside one pool
    for e in engines:
        e.reopen_files_and_listeners()

    reconnect_sockets(engines, cluster.rng if shuffle else None)

    # steps 3-5
    all_vpids = {img.vpid for img in images}
    pairs = []
    for e in engines:
        procs = e.fork_into_user_processes(all_vpids)
        for proc, img in zip(procs, e.images):
            e.rearrange(proc, img)
            e.restore_snapshot_and_threads(proc, img)
            cluster.procs[proc.vpid] = proc
            cluster.by_name[proc.name] = proc
            coord.register(proc.vpid, cluster.hosts[proc.host].name, e.address)
            pairs.append((proc, img))
    _rebuild_accept_queues(cluster)
    if observer:
        observer("restored", cluster, None)

    # steps 6-7 reuse the checkpoint manager from 'checkpointed' onward
    opts = dict(cluster.ckpt_options)
    managers = []
    for proc, img in sorted(pairs, key=lambda pi: pi[0].name):
        m = CheckpointManager(SimEndpoint(cluster, proc),
                              ckpt_dir=opts.get("ckpt_dir", "."),
                              basename=opts.get("basename", "ckpt"))
        m.enter_restart(img)
        managers.append(m)
    for m in managers:
        m.send_refills()
    for m in managers:
        m.resend_refills()
    for m in managers:
        coord.barrier_report(m.vpid, BarrierName.REFILLED)
    assert coord.mode.value == "running", "restart refill barrier did not release"
    for m in managers:
        m.resume()
        coord.barrier_report(m.vpid, BarrierName.CHECKPOINT_REQUEST)
    cluster.log("restart-complete", epoch=epoch)

    timings = []
    for e in engines:
        for stage, dur in e.timings.items():
            timings.append({"path": "restart", "stage": stage, "duration": dur,
                            "host": e.host, "epoch": epoch, "vpid": None})
    refill = {}
    for m in managers:
        for r in m.timer.records:
            if r["stage"] == "refill":
                refill[m.vpid] = r["duration"]
    for vpid, dur in refill.items():
        timings.append({"path": "restart", "stage": "refill", "duration": dur,
                        "host": cluster.procs[vpid].host, "epoch": epoch, "vpid": vpid})
    return RestartResult(cluster, timings, engines)


def _rebuild_accept_queues(cluster) -> None:
    """Threads parked inside 'accept' re-register with their listener in
    the order they originally did."""
    entries = []
    for p in cluster.procs.values():
        for tid, t in enumerate(p.threads):
            if t.done or t.wait_tick is None or t.accepted:
                continue
            step = p.program[t.section][t.pc]
            if step.op == "accept":
                entries.append((t.wait_tick, p.name, tid, step.args[0], p.fds[step.args[1]]))
    for wait_tick, name, tid, fd, ldesc in sorted(entries, key=lambda e: e[:3]):
        ldesc.waiting.append((wait_tick, name, tid, fd))


def restart_sim_by_host(images, host_map=None, **kw) -> RestartResult:
    """Group images by the host they were checkpointed on and place each
    group on ``host_map[old_index]`` (identity by default)."""
    imgs = load_images(images)
    groups: dict[int, list] = {}
    for img in imgs:
        groups.setdefault(img.meta.get("host_index", 0), []).append(img)
    order = sorted(groups)
    if host_map is None:
        placement = order
    elif callable(host_map):
        placement = [host_map(h) for h in order]
    else:
        placement = [host_map[h] for h in order]
    return restart_sim([groups[h] for h in order], placement, **kw)


def restart_sim_from_script(script_path, placement=None, **kw) -> RestartResult:
    text = Path(script_path).read_text()
    invocations = storage.parse_restart_script(text)
    if not invocations:
        raise IncompleteEpoch(f"{script_path} has no restart invocations")
    return restart_sim([inv.images for inv in invocations], placement, **kw)


def shuffled_placement(n_groups: int, n_hosts: int, rng: random.Random) -> list[int]:
    return [rng.randrange(n_hosts) for _ in range(n_groups)]
