"""Deterministic simulated cluster.

Hosts, processes, threads and channels live in one Python process.  Each
channel direction is an explicit byte queue with a capacity, standing in for
the kernel socket buffers a real checkpointer has to drain.  A cooperative
scheduler advances the logical clock one tick at a time; on every tick each
live process (in name order) gives every unfinished thread one step of its
scripted workload.

The scheduling decision depends only on state that is captured in
checkpoint images, so a restored cluster continues exactly as the original
would have.
"""

from __future__ import annotations

import copy
import functools
import hashlib
import json
import random
from collections import deque
from dataclasses import dataclass, field

from .coordinator import Coordinator
from .core import (BarrierName, DescriptorKind, DescriptorRecord, GlobalSocketId, Role,
                   SocketIdFactory, host_id_for, side_key)
from .errors import (BadDescriptor, CheckpointError, CheckpointInProgress, DeadParent,
                     NotListening, UnbalancedExit, UnknownHost, WouldBlock, WriteRejected)
from .workload import Program, parse_workload
from .workload import payload as _payload

DEFAULT_CAPACITY = 64 * 1024
SHM_DEFAULT_SIZE = 4096
FIRST_FD = 3


class SimulationStuck(CheckpointError):
    pass


@functools.lru_cache(maxsize=4096)
def payload(seed: int, n: int) -> bytes:
    return _payload(seed, n)


# --- channels -------------------------------------------------------------------

class Direction:
    """One-way in-flight queue.  Data frames count against ``capacity``;
    control frames (drain token, refill) travel out of band."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        self.capacity = capacity
        self.items: deque[list] = deque()
        self.queued = 0
        self.sent = 0
        self.received = 0

    @property
    def free(self) -> int:
        return self.capacity - self.queued

    def push(self, data: bytes, force: bool = False) -> int:
        n = len(data) if force else min(len(data), self.free)
        if n:
            if self.items and self.items[-1][0] == "data":
                self.items[-1][1] += data[:n]
            else:
                self.items.append(["data", bytearray(data[:n])])
            self.queued += n
            self.sent += n
        return n

    def pull(self, maxn: int) -> bytes:
        out = bytearray()
        while self.items and self.items[0][0] == "data" and len(out) < maxn:
            buf = self.items[0][1]
            take = min(maxn - len(out), len(buf))
            out += buf[:take]
            del buf[:take]
            if not buf:
                self.items.popleft()
        self.queued -= len(out)
        self.received += len(out)
        return bytes(out)

    def push_control(self, tag: str, data: bytes = b"") -> None:
        self.items.append([tag, bytearray(data)])

    def pop_control(self, tag: str) -> bytes | None:
        if self.items and self.items[0][0] == tag:
            return bytes(self.items.popleft()[1])
        return None

    def contents(self) -> bytes:
        return b"".join(bytes(buf) for tag, buf in self.items if tag == "data")

    def has_control(self) -> bool:
        return any(tag != "data" for tag, _ in self.items)


class SimChannel:
    """A connection between a connector side and an acceptor side.
    ``dirs[role]`` is the queue written by ``role``."""

    def __init__(self, socket_id: GlobalSocketId, kind: DescriptorKind, label: str,
                 capacity: int = DEFAULT_CAPACITY):
        self.socket_id = socket_id
        self.kind = kind
        self.label = label
        self.capacity = capacity
        self.dirs = {Role.CONNECTOR: Direction(capacity), Role.ACCEPTOR: Direction(capacity)}
        self.closed = {Role.CONNECTOR: False, Role.ACCEPTOR: False}

    @property
    def a_to_b(self) -> Direction:
        return self.dirs[Role.CONNECTOR]

    @property
    def b_to_a(self) -> Direction:
        return self.dirs[Role.ACCEPTOR]

    def in_flight(self) -> int:
        return self.a_to_b.queued + self.b_to_a.queued


class OpenDesc:
    """An open description, shared by every descriptor that refers to it
    (after fork, parent and child hold the same object)."""

    def __init__(self, kind: DescriptorKind, desc_id: GlobalSocketId, role: Role = Role.NONE,
                 channel: SimChannel | None = None, path: str | None = None, offset: int = 0,
                 writable: bool = True):
        self.kind = kind
        self.desc_id = desc_id
        self.role = role
        self.channel = channel
        self.path = path
        self.offset = offset
        self.writable = writable
        self.holders: dict[int, int] = {}
        self.owner: int | None = None
        self.waiting: list[tuple] = []

    @property
    def key(self) -> str:
        return side_key(self.desc_id, self.role)

    @property
    def is_stream(self) -> bool:
        return self.kind.is_stream

    def hold(self, vpid: int) -> None:
        self.holders[vpid] = self.holders.get(vpid, 0) + 1

    def release(self, vpid: int) -> None:
        n = self.holders.get(vpid, 0) - 1
        if n <= 0:
            self.holders.pop(vpid, None)
        else:
            self.holders[vpid] = n
        if not self.holders and self.channel is not None:
            self.channel.closed[self.role] = True

    def record(self, fd: int) -> DescriptorRecord:
        ch = self.channel
        return DescriptorRecord(
            fd_num=fd, kind=self.kind, socket_id=self.desc_id, role=self.role,
            owner_election=None, path=self.path, offset=self.offset,
            capacity=ch.capacity if ch else None,
            peer_closed=bool(ch and ch.closed[self.role.peer]),
            writable=self.writable,
            label=ch.label if ch else None,
        )


# --- filesystem -----------------------------------------------------------------

class SimFilesystem:
    """Cluster-wide file store (think NFS).  Shared segments map files here,
    so two mappers of one path see the same bytes."""

    def __init__(self):
        self.files: dict[str, bytearray] = {}
        self.readonly: set[str] = set()
        self.readonly_dirs: set[str] = set()

    @staticmethod
    def dirname(path: str) -> str:
        return path.rsplit("/", 1)[0] or "/"

    def exists(self, path: str) -> bool:
        return path in self.files

    def can_write(self, path: str) -> bool:
        return path not in self.readonly

    def dir_writable(self, path: str) -> bool:
        return self.dirname(path) not in self.readonly_dirs

    def write_file(self, path: str, data: bytes, readonly: bool = False) -> None:
        self.files[path] = bytearray(data)
        if readonly:
            self.readonly.add(path)

    def clone(self) -> "SimFilesystem":
        return copy.deepcopy(self)


# --- processes ------------------------------------------------------------------

@dataclass
class ThreadState:
    section: str
    pc: int = 0
    partial: int = 0
    accepted: bool = False
    wait_tick: int | None = None
    delay: int = 0
    parked: bool = False
    done: bool = False
    result: str | None = None


@dataclass
class HostState:
    index: int
    name: str
    host_id: int


class SimProcess:
    def __init__(self, name: str, vpid: int, real_pid: int, host: int, host_id: int,
                 program: Program):
        self.name = name
        self.vpid = vpid
        self.real_pid = real_pid
        self.host = host
        self.program = program
        self.threads: list[ThreadState] = []
        self.fds: dict[int, OpenDesc] = {}
        self.heap: dict[str, bytearray] = {}
        self.children: list[int] = []
        self.forks = 0
        self.tick = 0
        self.sock = SocketIdFactory(host_id, vpid)
        self.segments: dict[str, tuple[str, bool]] = {}
        self.hook_keys: list[str] = []
        self.hooks: dict[str, list] = {"pre_ckpt": [], "post_ckpt": [], "post_restart": []}
        self.suspended = False
        self.alive = True
        self.attached = True
        self.status = "running"

    @property
    def delayed(self) -> bool:
        return any(t.delay > 0 for t in self.threads)

    @property
    def finished(self) -> bool:
        return all(t.done for t in self.threads)

    def lowest_free_fd(self) -> int:
        fd = FIRST_FD
        while fd in self.fds:
            fd += 1
        return fd

    def state(self) -> dict:
        """Plain-data process state handed to the snapshot substrate."""
        return {
            "name": self.name,
            "vpid": self.vpid,
            "program": self.program.text,
            "threads": [vars(t).copy() for t in self.threads],
            "heap": {k: bytes(v) for k, v in self.heap.items()},
            "children": list(self.children),
            "forks": self.forks,
            "tick": self.tick,
            "sock_seq": self.sock.seq,
            "segments": {k: [p, w] for k, (p, w) in self.segments.items()},
            "hook_keys": list(self.hook_keys),
        }

    def load_state(self, state: dict) -> None:
        self.name = state["name"]
        self.program = parse_workload(state["program"])
        self.threads = [ThreadState(**t) for t in state["threads"]]
        self.heap = {k: bytearray(v) for k, v in state["heap"].items()}
        self.children = list(state["children"])
        self.forks = state["forks"]
        self.tick = state["tick"]
        self.sock.seq = state["sock_seq"]
        self.segments = {k: (p, bool(w)) for k, (p, w) in state["segments"].items()}
        self.hook_keys = list(state["hook_keys"])


# --- cluster --------------------------------------------------------------------

class Cluster:
    """Cluster state plus the scheduler and the interception surface
    (spawn, fork, remote exec, connect, send/recv, pipe, mmap)."""

    def __init__(self, n_hosts: int = 1, seed: int = 0, *, capacity: int = DEFAULT_CAPACITY,
                 coordinator: Coordinator | None = None, fs: SimFilesystem | None = None,
                 pid_base: int = 100, hostnames: list[str] | None = None):
        names = hostnames or [f"node{i:02d}" for i in range(n_hosts)]
        self.hosts = [HostState(i, n, host_id_for(n, i)) for i, n in enumerate(names)]
        self.seed = seed
        self.rng = random.Random(seed)
        self.clock = 0
        self.capacity = capacity
        self.coordinator = coordinator or Coordinator()
        self.fs = fs or SimFilesystem()
        self.procs: dict[int, SimProcess] = {}
        self.by_name: dict[str, SimProcess] = {}
        self.next_pid = pid_base
        self.pid_source = None
        self.trace: list[dict] = []
        self.delivered: dict[str, bytearray] = {}
        self.channels: list[SimChannel] = []
        self.app_requests: list[tuple[int, int]] = []
        self.roots = 0
        self.ckpt_options: dict = {}
        self._progress = False
        self.epochs: list = []

    # -- bookkeeping -----------------------------------------------------------

    def log(self, event: str, **fields) -> None:
        self.trace.append({"clock": self.clock, "event": event, **fields})

    def trace_lines(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.trace)

    def _host(self, host: int) -> HostState:
        if not isinstance(host, int) or not 0 <= host < len(self.hosts):
            raise UnknownHost(f"no host {host!r} in a {len(self.hosts)}-host cluster")
        return self.hosts[host]

    def proc(self, vpid: int) -> SimProcess:
        return self.procs[vpid]

    def live_vpids(self) -> set[int]:
        return {v for v, p in self.procs.items() if p.alive}

    def ordered(self) -> list[SimProcess]:
        return sorted((p for p in self.procs.values() if p.alive), key=lambda p: p.name)

    def _alloc_real_pid(self) -> int:
        if self.pid_source is not None:
            return self.pid_source()
        pid = self.next_pid
        self.next_pid += 1
        return pid

    def _new_vpid(self, requested: int | None = None) -> tuple[int, int]:
        from .restart import fork_until_no_conflict
        real, vpid = fork_until_no_conflict(
            requested, self.live_vpids(), self._alloc_real_pid,
            on_conflict=lambda pid: self.log("fork-conflict", real_pid=pid))
        return real, vpid

    def _register(self, p: SimProcess) -> None:
        self.procs[p.vpid] = p
        self.by_name[p.name] = p
        self.coordinator.register(p.vpid, self.hosts[p.host].name, f"sim:{p.host}")
        self.coordinator.barrier_report(p.vpid, BarrierName.CHECKPOINT_REQUEST)

    # -- process creation ------------------------------------------------------

    def spawn_process(self, host: int, program, name: str | None = None,
                      section: str = "main") -> int:
        h = self._host(host)
        if isinstance(program, str):
            program = parse_workload(program)
        real, vpid = self._new_vpid()
        if name is None:
            name = f"p{self.roots}"
            self.roots += 1
        p = SimProcess(name, vpid, real, host, h.host_id, program)
        if section:
            p.threads.append(ThreadState(section))
        self._register(p)
        self.log("spawn", vpid=vpid, name=name, host=host)
        return vpid

    def sim_fork(self, parent: int, section: str | None = None) -> int:
        par = self.procs.get(parent)
        if par is None or not par.alive:
            raise DeadParent(f"vpid {parent} is not live")
        real, vpid = self._new_vpid()
        par.forks += 1
        child = SimProcess(f"{par.name}.{par.forks}", vpid, real, par.host,
                           self.hosts[par.host].host_id, par.program)
        child.heap = {k: bytearray(v) for k, v in par.heap.items()}
        child.tick = par.tick
        child.segments = dict(par.segments)
        child.hook_keys = list(par.hook_keys)
        for fd, desc in par.fds.items():
            child.fds[fd] = desc
            desc.hold(vpid)
        if section:
            child.threads.append(ThreadState(section))
        par.children.append(vpid)
        self._register(child)
        self.log("fork", parent=parent, vpid=vpid, name=child.name)
        return vpid

    def sim_exec_remote(self, src: int, target_host: int, program=None,
                        section: str = "main") -> int:
        sp = self.procs.get(src)
        if sp is None or not sp.alive:
            raise DeadParent(f"vpid {src} is not live")
        h = self._host(target_host)
        if program is None:
            program = sp.program
        elif isinstance(program, str):
            program = parse_workload(program)
        real, vpid = self._new_vpid()
        sp.forks += 1
        p = SimProcess(f"{sp.name}.r{sp.forks}", vpid, real, target_host, h.host_id, program)
        if section:
            p.threads.append(ThreadState(section))
        sp.children.append(vpid)
        self._register(p)
        self.log("exec-remote", src=src, vpid=vpid, name=p.name, host=target_host)
        return vpid

    # -- descriptors -----------------------------------------------------------

    def _install(self, p: SimProcess, fd: int | None, desc: OpenDesc) -> int:
        if fd is None:
            fd = p.lowest_free_fd()
        if fd in p.fds:
            raise BadDescriptor(f"{p.name}: fd {fd} already open")
        p.fds[fd] = desc
        desc.hold(p.vpid)
        if desc.owner is None:
            desc.owner = p.vpid
        return fd

    def _desc(self, vpid: int, fd: int) -> OpenDesc:
        p = self.procs[vpid]
        desc = p.fds.get(fd)
        if desc is None:
            raise BadDescriptor(f"{p.name}: fd {fd} is not open")
        return desc

    def sim_listen(self, vpid: int, fd: int | None = None) -> int:
        p = self.procs[vpid]
        desc = OpenDesc(DescriptorKind.TCP_LISTENER, p.sock.make(p.tick))
        return self._install(p, fd, desc)

    def sim_connect(self, src: int, dst_listener: tuple[int, int], src_fd: int | None = None,
                    accept_fd: int | None = None) -> SimChannel:
        conn_p = self.procs[src]
        dvpid, lfd = dst_listener
        lp = self.procs.get(dvpid)
        ldesc = lp.fds.get(lfd) if lp else None
        if ldesc is None or ldesc.kind is not DescriptorKind.TCP_LISTENER:
            raise NotListening(f"vpid {dvpid} fd {lfd} is not a listener")
        if ldesc.waiting:
            _, name, tid, afd = ldesc.waiting.pop(0)
            acc_p = self.by_name[name]
            acc_p.threads[tid].accepted = True
        else:
            acc_p, afd = lp, accept_fd
        # the acceptor mints the id; the handshake hands it to the connector
        sid = acc_p.sock.make(acc_p.tick)
        ch = SimChannel(sid, DescriptorKind.TCP_CONNECTED, f"{acc_p.name}#{sid.conn_seq}",
                        self.capacity)
        self.channels.append(ch)
        self._install(acc_p, afd, OpenDesc(DescriptorKind.TCP_CONNECTED, sid, Role.ACCEPTOR, ch))
        self._install(conn_p, src_fd, OpenDesc(DescriptorKind.TCP_CONNECTED, sid,
                                               Role.CONNECTOR, ch))
        self.log("connect", socket=str(sid), connector=conn_p.name, acceptor=acc_p.name)
        return ch

    def promote_pipe(self, vpid: int, read_fd: int | None = None,
                     write_fd: int | None = None) -> tuple[int, int]:
        p = self.procs[vpid]
        sid = p.sock.make(p.tick)
        ch = SimChannel(sid, DescriptorKind.PROMOTED_PIPE, f"{p.name}#{sid.conn_seq}",
                        self.capacity)
        self.channels.append(ch)
        rfd = self._install(p, read_fd, OpenDesc(DescriptorKind.PROMOTED_PIPE, sid,
                                                  Role.ACCEPTOR, ch))
        wfd = self._install(p, write_fd, OpenDesc(DescriptorKind.PROMOTED_PIPE, sid,
                                                   Role.CONNECTOR, ch))
        self.log("pipe", socket=str(sid), name=p.name)
        return rfd, wfd

    def sim_close(self, vpid: int, fd: int) -> None:
        p = self.procs[vpid]
        desc = p.fds.pop(fd, None)
        if desc is None:
            raise BadDescriptor(f"{p.name}: fd {fd} is not open")
        desc.release(vpid)

    def sim_open(self, vpid: int, path: str, fd: int | None = None) -> int:
        p = self.procs[vpid]
        if not self.fs.exists(path):
            raise BadDescriptor(f"{path}: no such file")
        desc = OpenDesc(DescriptorKind.REGULAR_FILE, p.sock.make(p.tick), path=path,
                        writable=self.fs.can_write(path))
        return self._install(p, fd, desc)

    def sim_read_file(self, vpid: int, fd: int, n: int) -> bytes:
        desc = self._desc(vpid, fd)
        if desc.kind is not DescriptorKind.REGULAR_FILE:
            raise BadDescriptor("read on a non-file descriptor")
        data = bytes(self.fs.files[desc.path][desc.offset:desc.offset + n])
        desc.offset += len(data)
        return data

    def _stream(self, vpid: int, fd: int) -> OpenDesc:
        desc = self._desc(vpid, fd)
        if not desc.is_stream:
            raise BadDescriptor(f"fd {fd} is {desc.kind.value}, not a stream")
        return desc

    def sim_send(self, vpid: int, fd: int, data: bytes) -> int:
        desc = self._stream(vpid, fd)
        if desc.kind is DescriptorKind.PROMOTED_PIPE and desc.role is Role.ACCEPTOR:
            raise BadDescriptor("write on the read end of a pipe")
        d = desc.channel.dirs[desc.role]
        n = d.push(data)
        if data and not n:
            raise WouldBlock("send queue full")
        return n

    def sim_recv(self, vpid: int, fd: int, maxn: int) -> bytes:
        desc = self._stream(vpid, fd)
        if desc.kind is DescriptorKind.PROMOTED_PIPE and desc.role is Role.CONNECTOR:
            raise BadDescriptor("read on the write end of a pipe")
        sender = desc.role.peer
        data = desc.channel.dirs[sender].pull(maxn)
        if maxn and not data:
            raise WouldBlock("nothing to receive")
        self.delivered.setdefault(f"{desc.channel.label}>{sender.value}", bytearray()).extend(data)
        return data

    # -- shared memory ---------------------------------------------------------

    def map_shared_segment(self, vpid: int, backing_file: str, writable: bool,
                           name: str | None = None, size: int = SHM_DEFAULT_SIZE) -> str:
        p = self.procs[vpid]
        if not self.fs.exists(backing_file):
            self.fs.write_file(backing_file, bytes(size))
        name = name or f"seg{len(p.segments)}"
        p.segments[name] = (backing_file, bool(writable))
        self.log("mmap", name=p.name, seg=name, path=backing_file)
        return name

    def shm_write(self, vpid: int, seg: str, offset: int, data: bytes) -> None:
        path, writable = self.procs[vpid].segments[seg]
        if not writable or not self.fs.can_write(path):
            raise WriteRejected(f"segment {seg} ({path}) is read-only")
        buf = self.fs.files[path]
        if len(buf) < offset + len(data):
            buf.extend(bytes(offset + len(data) - len(buf)))
        buf[offset:offset + len(data)] = data

    def shm_read(self, vpid: int, seg: str, offset: int, n: int) -> bytes:
        path, _ = self.procs[vpid].segments[seg]
        return bytes(self.fs.files[path][offset:offset + n])

    # -- scheduler -------------------------------------------------------------

    def step(self) -> bool:
        """One scheduler tick.  Returns True if any thread made progress."""
        self.clock += 1
        self._progress = False
        for p in self.ordered():
            if p.suspended:
                continue
            self._run_process(p)
        tick = self.coordinator.tick(self.clock)
        if tick is not None:
            self._run_epoch(started=True)
        if self.app_requests:
            self._serve_app_requests()
        return self._progress

    def _run_process(self, p: SimProcess) -> None:
        for tid, t in enumerate(list(p.threads)):
            if not t.done and not t.parked:
                self._exec(p, tid, t)

    def _exec(self, p: SimProcess, tid: int, t: ThreadState) -> None:
        steps = p.program[t.section]
        if t.pc >= len(steps):
            t.done = True
            return
        st = steps[t.pc]
        complete = getattr(self, "_op_" + st.op)(p, tid, t, *st.args)
        if complete:
            t.pc += 1
            t.partial = 0
            t.accepted = False
            t.wait_tick = None
            t.result = None
            p.tick += 1
            self._progress = True
            if t.pc >= len(steps):
                t.done = True

    def all_done(self) -> bool:
        return all(p.finished for p in self.procs.values() if p.alive)

    def run(self, until: int | None = None, max_idle: int = 50) -> int:
        """Run until every thread finishes (or the clock reaches ``until``).
        Raises SimulationStuck after ``max_idle`` ticks without progress."""
        idle = 0
        while not self.all_done():
            if until is not None and self.clock >= until:
                break
            idle = 0 if self.step() else idle + 1
            if idle > max_idle:
                raise SimulationStuck(f"no progress for {max_idle} ticks at clock {self.clock}")
        return self.clock

    # -- workload operations ---------------------------------------------------

    def _op_listen(self, p, tid, t, fd):
        self.sim_listen(p.vpid, fd)
        return True

    def _op_accept(self, p, tid, t, fd, lfd):
        if t.accepted:
            return True
        ldesc = p.fds.get(lfd)
        if ldesc is None or ldesc.kind is not DescriptorKind.TCP_LISTENER:
            raise NotListening(f"{p.name}: fd {lfd} is not a listener")
        if t.wait_tick is None:
            t.wait_tick = self.clock
            ldesc.waiting.append((t.wait_tick, p.name, tid, fd))
            self._progress = True
        return False

    def _op_connect(self, p, tid, t, fd, peer, lfd):
        lp = self.by_name.get(peer)
        if lp is None or not lp.alive:
            return False
        ldesc = lp.fds.get(lfd)
        if ldesc is None:
            return False
        if ldesc.kind is not DescriptorKind.TCP_LISTENER:
            raise NotListening(f"{peer}: fd {lfd} is not a listener")
        if not ldesc.waiting:
            return False
        self.sim_connect(p.vpid, (lp.vpid, lfd), src_fd=fd)
        return True

    def _op_send(self, p, tid, t, fd, n, seed):
        data = payload(seed, n)
        try:
            t.partial += self.sim_send(p.vpid, fd, data[t.partial:])
            self._progress = True
        except WouldBlock:
            pass
        return t.partial >= n

    def _op_recv(self, p, tid, t, fd, n, key):
        try:
            data = self.sim_recv(p.vpid, fd, n - t.partial)
        except WouldBlock:
            return t.partial >= n
        p.heap.setdefault(key, bytearray()).extend(data)
        t.partial += len(data)
        self._progress = True
        return t.partial >= n

    def _op_pipe(self, p, tid, t, rfd, wfd):
        self.promote_pipe(p.vpid, rfd, wfd)
        return True

    def _op_close(self, p, tid, t, fd):
        self.sim_close(p.vpid, fd)
        return True

    def _op_open(self, p, tid, t, fd, path):
        self.sim_open(p.vpid, path, fd)
        return True

    def _op_read(self, p, tid, t, fd, n, key):
        p.heap.setdefault(key, bytearray()).extend(self.sim_read_file(p.vpid, fd, n))
        return True

    def _op_mmap(self, p, tid, t, seg, path, rw):
        self.map_shared_segment(p.vpid, path, bool(rw), name=seg)
        return True

    def _op_shmwrite(self, p, tid, t, seg, off, n, seed):
        self.shm_write(p.vpid, seg, off, payload(seed, n))
        return True

    def _op_shmread(self, p, tid, t, seg, off, n, key):
        p.heap.setdefault(key, bytearray()).extend(self.shm_read(p.vpid, seg, off, n))
        return True

    def _op_put(self, p, tid, t, key, n, seed):
        p.heap[key] = bytearray(payload(seed, n))
        return True

    def _op_compute(self, p, tid, t, key):
        p.heap[key] = bytearray(hashlib.sha256(p.heap.get(key, b"")).digest())
        return True

    def _op_tagpid(self, p, tid, t, key):
        p.heap[key] = bytearray(str(p.vpid).encode())
        return True

    def _op_fork(self, p, tid, t, section):
        self.sim_fork(p.vpid, section)
        return True

    def _op_spawn(self, p, tid, t, host, section):
        self.sim_exec_remote(p.vpid, host, section=section)
        return True

    def _op_thread(self, p, tid, t, section):
        p.threads.append(ThreadState(section))
        return True

    def _op_delay_enter(self, p, tid, t):
        t.delay += 1
        self.log("delay-enter", name=p.name, thread=tid, depth=t.delay)
        return True

    def _op_delay_exit(self, p, tid, t):
        if t.delay <= 0:
            raise UnbalancedExit(f"{p.name} thread {tid}: delay_exit without delay_enter")
        t.delay -= 1
        self.log("delay-exit", name=p.name, thread=tid, depth=t.delay)
        return True

    def _op_ckpt(self, p, tid, t, key):
        if t.result is not None:
            p.heap[key] = bytearray(t.result.encode())
            return True
        if t.partial == 0:
            t.partial = 1
            self.app_requests.append((p.vpid, tid))
            self._progress = True
        return False

    def _op_hook(self, p, tid, t, key):
        p.hook_keys.append(key)
        return True

    def _op_yield(self, p, tid, t):
        return True

    # -- checkpointing ---------------------------------------------------------

    def _serve_app_requests(self) -> None:
        requests, self.app_requests = self.app_requests, []
        started = False
        for vpid, tid in requests:
            t = self.procs[vpid].threads[tid]
            try:
                epoch = self.coordinator.request_checkpoint()
                started = True
                t.result = f"epoch:{epoch}"
            except CheckpointInProgress:
                t.result = "busy"
        if started:
            self._run_epoch(started=True)
        for vpid, tid in requests:
            t = self.procs[vpid].threads[tid]
            if t.result and t.result.startswith("epoch:"):
                t.result = f"epoch:{self.coordinator.epoch}"

    def _run_epoch(self, started: bool):
        from .ckpt_manager import run_sim_epoch
        opts = dict(self.ckpt_options)
        if "ckpt_dir" not in opts:
            raise CheckpointError("cluster has no checkpoint directory configured")
        result = run_sim_epoch(self, started=started, **opts)
        self.epochs.append(result)
        return result

    def configure_checkpoints(self, ckpt_dir, **options) -> None:
        self.ckpt_options = {"ckpt_dir": ckpt_dir, **options}

    def checkpoint(self, ckpt_dir=None, **options):
        """Run one coordinated checkpoint epoch now (between ticks)."""
        if ckpt_dir is not None:
            self.configure_checkpoints(ckpt_dir, **options)
        elif options:
            self.ckpt_options.update(options)
        return self._run_epoch(started=False)

    # -- observation -----------------------------------------------------------

    def in_flight(self) -> dict[str, bytes]:
        out = {}
        for ch in self.channels:
            for role, d in ch.dirs.items():
                if d.queued or d.items:
                    out[f"{ch.label}>{role.value}"] = d.contents()
        return out

    def heaps(self) -> dict[str, dict[str, bytes]]:
        return {p.name: {k: bytes(v) for k, v in sorted(p.heap.items())}
                for p in self.procs.values() if p.alive}

    def vpids_by_name(self) -> dict[str, int]:
        return {p.name: p.vpid for p in self.procs.values() if p.alive}

    def holders_of(self, socket_id: GlobalSocketId) -> set[int]:
        return {p.vpid for p in self.procs.values() if p.alive
                for d in p.fds.values() if d.desc_id == socket_id}

    def conservation_ok(self) -> bool:
        return all(d.sent == d.received + d.queued for ch in self.channels for d in ch.dirs.values())


@dataclass
class RunOutcome:
    """Application-visible result of a run: per-direction delivered streams
    and final heaps keyed by process name, plus shared file contents."""

    delivered: dict[str, bytes] = field(default_factory=dict)
    heaps: dict[str, dict[str, bytes]] = field(default_factory=dict)
    files: dict[str, bytes] = field(default_factory=dict)

    @classmethod
    def of(cls, cluster: Cluster, prefix: "RunOutcome | None" = None) -> "RunOutcome":
        delivered = dict(prefix.delivered) if prefix else {}
        for k, v in cluster.delivered.items():
            delivered[k] = delivered.get(k, b"") + bytes(v)
        return cls(delivered=delivered, heaps=cluster.heaps(),
                   files={k: bytes(v) for k, v in sorted(cluster.fs.files.items())})
