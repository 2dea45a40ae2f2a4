"""Real-socket cooperative runtime.

Each managed process is an OS process that interprets a workload script
(the same language the simulator runs) over localhost TCP.  Application
data travels in length-prefixed frames so the manager can tell payload from
its own drain token and refill frames.  A manager thread talks to the
coordinator and runs the shared :class:`CheckpointManager` against a
:class:`RealEndpoint`.

Suspension happens only between frames: the application thread checks a
flag between steps (and between the frames of one send) and parks there.
While it waits for the 'suspended' barrier the manager keeps reading
incoming frames into the process's user-space inbox, so a sender stuck on a
full kernel buffer can always reach its next frame boundary.

Files under the run directory::

    listeners/<name>.<fd>     address and listener id of a listening socket
    pids/<name>.pid           current OS pid of a managed process
    results/<name>.json       final heap and delivered streams
    timings/<name>.jsonl      per-epoch stage durations
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import random
import select
import signal
import socket
import subprocess
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import aware, storage, wire
from .ckpt_manager import CheckpointManager
from .coordinator import CoordinatorClient
from .core import (BarrierName, CheckpointImage, DescriptorKind, DescriptorRecord,
                   GlobalSocketId, Role, SocketIdFactory, host_id_for, side_key)
from .errors import (BadDescriptor, CheckpointError, CheckpointInProgress, HandshakeMismatch,
                     NotAllowedInHook, PeerGone, RetryBudgetExhausted, ThreadUnresponsive,
                     TokenTimeout, UnbalancedExit, WriteRejected)
from .restart import (OsFilesystem, SegmentRecord, fork_until_no_conflict, load_images,
                      rearrange_descriptors, restore_shared_memory)
from .simnet import SHM_DEFAULT_SIZE, ThreadState
from .substrate import DEFAULT_SUBSTRATE
from .wire import Frame, Msg
from .workload import parse_workload, payload

log = logging.getLogger(__name__)

FRAME_MAX = 16 * 1024
SUSPEND_TIMEOUT = 10.0
TOKEN_TIMEOUT = 30.0
READY = b"ready\n"


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def read_frame(sock: socket.socket, timeout: float | None = None) -> tuple[int, bytes] | None:
    """Read one whole frame; None on EOF.  Senders always write whole frames,
    so once a header is readable the rest follows promptly."""
    if timeout is not None:
        r, _, _ = select.select([sock], [], [], timeout)
        if not r:
            raise TimeoutError("no frame")
    try:
        head = wire.recv_exact(sock, wire.HEADER.size)
    except ConnectionError:
        return None
    n, tag = wire.HEADER.unpack(head)
    return tag, wire.recv_exact(sock, n) if n else b""


def readable(sock: socket.socket, timeout: float = 0.0) -> bool:
    r, _, _ = select.select([sock], [], [], timeout)
    return bool(r)


# --- descriptors ----------------------------------------------------------------------

class RealDesc:
    """One open description in a managed process.  Several virtual fds may
    refer to the same object."""

    def __init__(self, kind: DescriptorKind, desc_id: GlobalSocketId, role: Role = Role.NONE,
                 sock: socket.socket | None = None, label: str | None = None,
                 path: str | None = None, offset: int = 0, writable: bool = True):
        self.kind = kind
        self.desc_id = desc_id
        self.role = role
        self.sock = sock
        self.label = label
        self.path = path
        self.offset = offset
        self.writable = writable
        self.confirmed = True
        self.listener: GlobalSocketId | None = None
        self.inbox = bytearray()
        self.eof = False
        self.owner: int | None = None

    @property
    def key(self) -> str:
        return side_key(self.desc_id, self.role)

    @property
    def peer_key(self) -> str:
        return side_key(self.desc_id, self.role.peer)

    @property
    def is_stream(self) -> bool:
        return self.kind.is_stream

    def send_frame(self, tag: int, data: bytes = b"") -> None:
        self.sock.sendall(wire.pack(tag, data))

    def send_data(self, data: bytes) -> None:
        for i in range(0, len(data), FRAME_MAX):
            self.send_frame(Frame.DATA, data[i:i + FRAME_MAX])

    def poll(self, timeout: float = 0.0) -> int:
        """Move every readable frame into the inbox.  Returns frames read."""
        n = 0
        while not self.eof and readable(self.sock, timeout):
            fr = read_frame(self.sock)
            timeout = 0.0
            if fr is None:
                self.eof = True
                break
            self._absorb(*fr)
            n += 1
        return n

    def _absorb(self, tag: int, data: bytes) -> None:
        if tag == Frame.DATA:
            self.inbox += data
        elif tag == Frame.ACCEPTED:
            self.confirmed = True
        # a stray token can only follow an aborted epoch; it carries nothing

    def close(self) -> None:
        if self.sock is not None:
            try:
                self.sock.close()
            except OSError:
                pass


# --- endpoint for the shared manager ------------------------------------------------------

class RealSide:
    def __init__(self, worker: "Worker", desc: RealDesc):
        self.w = worker
        self.desc = desc
        self.key = desc.key
        self.stream = desc.is_stream and desc.confirmed and desc.sock is not None

    @property
    def peer_open(self) -> bool:
        return self.w.peer_open.get(self.key, False)

    def send_token(self) -> None:
        self.desc.send_frame(Frame.TOKEN)

    def drain_until_token(self) -> bytes:
        out = bytearray()
        while True:
            try:
                fr = read_frame(self.desc.sock, TOKEN_TIMEOUT)
            except TimeoutError:
                raise TokenTimeout(f"{self.w.name}: no drain token on {self.key}") from None
            if fr is None:
                raise TokenTimeout(f"{self.w.name}: peer of {self.key} went away")
            tag, data = fr
            if tag == Frame.TOKEN:
                return bytes(out)
            if tag == Frame.DATA:
                out += data

    def drain_available(self) -> bytes:
        out = bytearray()
        while not self.desc.eof:
            try:
                fr = read_frame(self.desc.sock, TOKEN_TIMEOUT)
            except TimeoutError:
                raise TokenTimeout(f"{self.w.name}: closed peer of {self.key} never hung up") from None
            if fr is None:
                self.desc.eof = True
            elif fr[0] == Frame.DATA:
                out += fr[1]
        return bytes(out)

    def send_refill(self, data: bytes) -> None:
        self.desc.send_frame(Frame.REFILL, data)

    def take_refill(self) -> bytes:
        while True:
            try:
                fr = read_frame(self.desc.sock, TOKEN_TIMEOUT)
            except TimeoutError:
                raise PeerGone(f"{self.w.name}: no refill frame on {self.key}") from None
            if fr is None:
                raise PeerGone(f"{self.w.name}: peer of {self.key} went away before refill")
            if fr[0] == Frame.REFILL:
                return fr[1]
            self.desc._absorb(*fr)

    def resend(self, data: bytes) -> None:
        self.desc.send_data(data)

    def restore_local(self, data: bytes) -> None:
        # nothing can follow data from a closed peer, so the inbox end is the right place
        self.desc.inbox += data


class RealEndpoint:
    def __init__(self, worker: "Worker"):
        self.w = worker
        self.vpid = worker.vpid

    @property
    def host_id(self) -> int:
        return self.w.host_id

    def park_threads(self) -> int:
        return self.w.park()

    def unpark_threads(self) -> int:
        return self.w.unpark()

    def sides(self) -> dict[str, RealSide]:
        out = {}
        for fd in sorted(self.w.fds):
            desc = self.w.fds[fd]
            if desc.key not in out:
                out[desc.key] = RealSide(self.w, desc)
        return out

    def get_owner(self, key):
        side = self.sides().get(key)
        return side.desc.owner if side else None

    def set_owner(self, key, owner) -> None:
        side = self.sides().get(key)
        if side is not None:
            side.desc.owner = owner

    def records(self, leaders: dict[str, int]) -> list[DescriptorRecord]:
        recs = []
        for fd in sorted(self.w.fds):
            d = self.w.fds[fd]
            pending = d.is_stream and not d.confirmed
            recs.append(DescriptorRecord(
                fd_num=fd, kind=d.kind, socket_id=d.desc_id, role=d.role,
                owner_election=leaders.get(d.key), path=d.path, offset=d.offset,
                peer_closed=d.is_stream and not pending and not self.w.peer_open.get(d.key, False),
                writable=d.writable, label=d.label,
                listener=d.listener if pending else None))
        return recs

    def peer_info(self, key: str):
        sid, role = key.rsplit("/", 1)
        peer = self.w.leaders.get(f"{sid}/{Role(role).peer.value}")
        return (peer, self.w.host_id) if peer is not None else None

    def state(self) -> dict:
        return self.w.state()

    def meta(self) -> dict:
        w = self.w
        return {"name": w.name, "real_pid": os.getpid(), "host_name": w.hostname,
                "host_index": 0, "cluster_size": w.cluster_size, "run_dir": str(w.run_dir),
                "options": w.options}

    def run_hooks(self, kind: str) -> None:
        self.w.run_hooks(kind)


# --- the managed process ----------------------------------------------------------------

@dataclass
class WorkerOptions:
    mode: str = "plain"
    sync: str = "none"
    level: int = 6
    basename: str = "ckpt"
    pace: float = 0.0
    linger: bool = False


class Worker:
    def __init__(self, name: str, program, run_dir, coordinator: str, *,
                 section: str | None = "main", options: dict | None = None,
                 hostname: str = "localhost"):
        self.name = name
        self.program = parse_workload(program) if isinstance(program, str) else program
        self.run_dir = Path(run_dir)
        self.coordinator = coordinator
        self.options = dict(options or {})
        self.opts = WorkerOptions(**self.options)
        self.hostname = hostname
        self.host_id = host_id_for(hostname, 0)
        self.vpid = os.getpid()
        self.threads: list[ThreadState] = [ThreadState(section)] if section else []
        self.fds: dict[int, RealDesc] = {}
        self.heap: dict[str, bytearray] = {}
        self.delivered: dict[str, bytearray] = {}
        self.children: list[int] = []
        self.forks = 0
        self.tick = 0
        self.sock = SocketIdFactory(self.host_id, self.vpid)
        self.segments: dict[str, tuple[str, bool]] = {}
        self.hook_keys: list[str] = []
        self.hooks: dict[str, list] = {"pre_ckpt": [], "post_ckpt": [], "post_restart": []}
        self.in_hook = False
        self.leaders: dict[str, int] = {}
        self.peer_open: dict[str, bool] = {}
        self.cluster_size = 0
        self.epoch = 0
        self.done_epoch = 0
        self.status = "running"
        self.attached = False
        self.finished = False
        self._cv = threading.Condition()
        self._suspend = False
        self._parked = False
        self._children: list[subprocess.Popen] = []
        self._restart_image: CheckpointImage | None = None
        self._ready_fd: int | None = None
        self._manager: threading.Thread | None = None
        self._client: CoordinatorClient | None = None
        self._registered = threading.Event()
        self._quit = threading.Event()
        self.fs = OsFilesystem()
        self.timings: list[dict] = []

    # -- files in the run directory -------------------------------------------------

    def _path(self, sub: str, leaf: str) -> Path:
        p = self.run_dir / sub
        p.mkdir(parents=True, exist_ok=True)
        return p / leaf

    def write_pidfile(self) -> None:
        self._path("pids", f"{self.name}.pid").write_text(f"{os.getpid()}\n")

    def publish_listener(self, fd: int, desc: RealDesc) -> None:
        host, port = desc.sock.getsockname()[:2]
        tmp = self._path("listeners", f".{self.name}.{fd}.tmp")
        tmp.write_text(_dump({"address": f"{host}:{port}", "id": desc.desc_id.to_list()}))
        os.replace(tmp, self._path("listeners", f"{self.name}.{fd}"))

    def lookup_listener(self, peer: str, lfd: int):
        p = self.run_dir / "listeners" / f"{peer}.{lfd}"
        try:
            info = json.loads(p.read_text())
        except (OSError, ValueError):
            return None
        return info["address"], GlobalSocketId.from_list(info["id"])

    # -- state for the substrate --------------------------------------------------------

    def state(self) -> dict:
        fds = {}
        for fd, d in self.fds.items():
            fds[fd] = {"key": d.key, "inbox": bytes(d.inbox), "confirmed": d.confirmed,
                       "eof": d.eof}
        return {
            "name": self.name, "vpid": self.vpid, "program": self.program.text,
            "threads": [vars(t).copy() for t in self.threads],
            "heap": {k: bytes(v) for k, v in self.heap.items()},
            "delivered": {k: bytes(v) for k, v in self.delivered.items()},
            "children": list(self.children), "forks": self.forks, "tick": self.tick,
            "sock_seq": self.sock.seq,
            "segments": {k: [p, w] for k, (p, w) in self.segments.items()},
            "hook_keys": list(self.hook_keys), "fds": fds,
            "shm": {p: self.fs.read_file(p) for p, _ in self.segments.values()
                    if os.path.exists(p)},
        }

    def load_state(self, st: dict) -> None:
        self.name = st["name"]
        self.vpid = st["vpid"]
        self.program = parse_workload(st["program"])
        self.threads = [ThreadState(**t) for t in st["threads"]]
        self.heap = {k: bytearray(v) for k, v in st["heap"].items()}
        self.delivered = {k: bytearray(v) for k, v in st["delivered"].items()}
        self.children = list(st["children"])
        self.forks = st["forks"]
        self.tick = st["tick"]
        self.sock = SocketIdFactory(self.host_id, self.vpid, st["sock_seq"])
        self.segments = {k: (p, bool(w)) for k, (p, w) in st["segments"].items()}
        self.hook_keys = list(st["hook_keys"])
        for fd, info in st["fds"].items():
            d = self.fds.get(int(fd))
            if d is not None:
                d.inbox = bytearray(info["inbox"])
                d.confirmed = info["confirmed"]
                d.eof = info["eof"]

    # -- suspension -------------------------------------------------------------------

    @property
    def delayed(self) -> bool:
        return any(t.delay > 0 for t in self.threads)

    def maybe_park(self) -> None:
        with self._cv:
            if not self._suspend or self.delayed:
                return
            self._parked = True
            self._cv.notify_all()
            self._cv.wait_for(lambda: not self._suspend)
            self._parked = False
            self._cv.notify_all()

    def park(self) -> int:
        """Ask the application thread to stop at its next frame boundary and
        keep reading incoming frames until it has."""
        with self._cv:
            self._suspend = True
            self.status = "checkpointing"
        deadline = time.monotonic() + SUSPEND_TIMEOUT
        while True:
            with self._cv:
                if self._parked or self.finished:
                    return len(self.threads)
                self._cv.wait(0.002)
            self.prefetch()
            if time.monotonic() > deadline:
                raise ThreadUnresponsive(f"{self.name}: application did not park")

    def unpark(self) -> int:
        with self._cv:
            self._suspend = False
            self.status = "running"
            self._cv.notify_all()
        return len(self.threads)

    def prefetch(self) -> None:
        for d in self._streams():
            try:
                d.poll()
            except OSError:
                d.eof = True

    def _streams(self):
        seen = set()
        for fd in sorted(self.fds):
            d = self.fds[fd]
            if d.is_stream and d.sock is not None and id(d) not in seen:
                seen.add(id(d))
                yield d

    # -- hooks --------------------------------------------------------------------------

    def run_hooks(self, kind: str) -> None:
        self.in_hook = True
        try:
            for fn in self.hooks.get(kind, []):
                fn()
            for key in self.hook_keys:
                self.heap.setdefault(key, bytearray()).extend(f"{kind};".encode())
        finally:
            self.in_hook = False

    # -- the application loop ---------------------------------------------------------

    def run(self) -> None:
        aware.set_current(aware.RealAware(self))
        self.write_pidfile()
        self.start_manager()
        self._registered.wait(30)
        if self._ready_fd is not None:
            os.write(self._ready_fd, READY)
            os.close(self._ready_fd)
            self._ready_fd = None
        while True:
            self.maybe_park()
            live = [(tid, t) for tid, t in enumerate(list(self.threads)) if not t.done]
            if not live:
                break
            progress = False
            for tid, t in live:
                progress |= self._exec(tid, t)
                self.maybe_park()
            if self.opts.pace:
                time.sleep(self.opts.pace)
            elif not progress:
                streams = [d.sock for d in self._streams() if not d.eof]
                if streams:
                    select.select(streams, [], [], 0.005)
                else:
                    time.sleep(0.002)
        self.write_results()
        with self._cv:
            self.finished = True
            self._cv.notify_all()
            # never leave in the middle of an epoch
            self._cv.wait_for(lambda: not self._suspend)
        if self.opts.linger and self.attached:
            self._quit.wait()

    def write_results(self) -> None:
        out = {"name": self.name, "vpid": self.vpid,
               "heap": {k: bytes(v).hex() for k, v in sorted(self.heap.items())},
               "delivered": {k: bytes(v).hex() for k, v in sorted(self.delivered.items())}}
        tmp = self._path("results", f".{self.name}.tmp")
        tmp.write_text(_dump(out))
        os.replace(tmp, self._path("results", f"{self.name}.json"))

    def _exec(self, tid: int, t: ThreadState) -> bool:
        steps = self.program[t.section]
        if t.pc >= len(steps):
            t.done = True
            return False
        st = steps[t.pc]
        before = t.partial
        done = getattr(self, "_op_" + st.op)(tid, t, *st.args)
        if done:
            t.pc += 1
            t.partial = 0
            t.accepted = False
            t.wait_tick = None
            t.result = None
            self.tick += 1
            if t.pc >= len(steps):
                t.done = True
            return True
        return t.partial != before

    def _desc(self, fd: int) -> RealDesc:
        d = self.fds.get(fd)
        if d is None:
            raise BadDescriptor(f"{self.name}: fd {fd} is not open")
        return d

    def _install(self, fd: int, desc: RealDesc) -> None:
        if fd in self.fds:
            raise BadDescriptor(f"{self.name}: fd {fd} already open")
        self.fds[fd] = desc
        if desc.owner is None:
            desc.owner = self.vpid

    # -- operations -------------------------------------------------------------------

    def _op_listen(self, tid, t, fd):
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        s.bind(("127.0.0.1", 0))
        s.listen(128)
        desc = RealDesc(DescriptorKind.TCP_LISTENER, self.sock.make(self.tick), sock=s)
        self._install(fd, desc)
        self.publish_listener(fd, desc)
        return True

    def _op_accept(self, tid, t, fd, lfd):
        ldesc = self._desc(lfd)
        if not readable(ldesc.sock):
            return False
        conn, _ = ldesc.sock.accept()
        conn.setblocking(True)
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        fr = read_frame(conn, 10.0)
        if fr is None or fr[0] != Frame.HELLO:
            conn.close()
            raise HandshakeMismatch(f"{self.name}: connection without a hello")
        hello = json.loads(fr[1])
        desc = RealDesc(DescriptorKind.TCP_CONNECTED, GlobalSocketId.from_list(hello["id"]),
                        Role.ACCEPTOR, conn, hello["label"])
        desc.send_frame(Frame.ACCEPTED)
        self._install(fd, desc)
        return True

    def _op_connect(self, tid, t, fd, peer, lfd):
        info = self.lookup_listener(peer, lfd)
        if info is None:
            return False
        addr, lid = info
        host, port = addr.rsplit(":", 1)
        try:
            s = socket.create_connection((host, int(port)), timeout=5.0)
        except OSError:
            return False      # stale address from an earlier run; retry
        s.settimeout(None)
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sid = self.sock.make(self.tick)
        desc = RealDesc(DescriptorKind.TCP_CONNECTED, sid, Role.CONNECTOR, s,
                        f"{self.name}#{sid.conn_seq}")
        desc.confirmed = False
        desc.listener = lid
        desc.send_frame(Frame.HELLO, _dump({"id": sid.to_list(), "label": desc.label}).encode())
        self._install(fd, desc)
        return True

    def _stream(self, fd: int) -> RealDesc | None:
        d = self._desc(fd)
        if not d.is_stream:
            raise BadDescriptor(f"fd {fd} is {d.kind.value}, not a stream")
        if not d.confirmed:
            d.poll()
            if not d.confirmed:
                return None
        return d

    def _op_send(self, tid, t, fd, n, seed):
        d = self._stream(fd)
        if d is None:
            return False
        if d.kind is DescriptorKind.PROMOTED_PIPE and d.role is Role.ACCEPTOR:
            raise BadDescriptor("write on the read end of a pipe")
        chunk = payload(seed, n)[t.partial:t.partial + FRAME_MAX]
        if chunk:
            d.send_frame(Frame.DATA, chunk)
            t.partial += len(chunk)
        return t.partial >= n

    def _op_recv(self, tid, t, fd, n, key):
        d = self._stream(fd)
        if d is None:
            return False
        if d.kind is DescriptorKind.PROMOTED_PIPE and d.role is Role.CONNECTOR:
            raise BadDescriptor("read on the write end of a pipe")
        if not d.inbox:
            d.poll()
        take = bytes(d.inbox[:n - t.partial])
        if take:
            del d.inbox[:len(take)]
            self.heap.setdefault(key, bytearray()).extend(take)
            self.delivered.setdefault(f"{d.label}>{d.role.peer.value}", bytearray()).extend(take)
            t.partial += len(take)
        return t.partial >= n

    def _op_pipe(self, tid, t, rfd, wfd):
        a, b = socket.socketpair()
        sid = self.sock.make(self.tick)
        label = f"{self.name}#{sid.conn_seq}"
        self._install(rfd, RealDesc(DescriptorKind.PROMOTED_PIPE, sid, Role.ACCEPTOR, a, label))
        self._install(wfd, RealDesc(DescriptorKind.PROMOTED_PIPE, sid, Role.CONNECTOR, b, label))
        return True

    def _op_close(self, tid, t, fd):
        d = self.fds.pop(fd, None)
        if d is None:
            raise BadDescriptor(f"{self.name}: fd {fd} is not open")
        if all(o is not d for o in self.fds.values()):
            d.close()
        return True

    def _op_open(self, tid, t, fd, path):
        if not os.path.exists(path):
            raise BadDescriptor(f"{path}: no such file")
        self._install(fd, RealDesc(DescriptorKind.REGULAR_FILE, self.sock.make(self.tick),
                                   path=path, writable=os.access(path, os.W_OK)))
        return True

    def _op_read(self, tid, t, fd, n, key):
        d = self._desc(fd)
        with open(d.path, "rb") as fh:
            fh.seek(d.offset)
            data = fh.read(n)
        d.offset += len(data)
        self.heap.setdefault(key, bytearray()).extend(data)
        return True

    def _op_mmap(self, tid, t, seg, path, rw):
        if not os.path.exists(path):
            self.fs.write_file(path, bytes(SHM_DEFAULT_SIZE))
        self.segments[seg] = (path, bool(rw))
        return True

    def _op_shmwrite(self, tid, t, seg, off, n, seed):
        path, writable = self.segments[seg]
        if not writable or not os.access(path, os.W_OK):
            raise WriteRejected(f"segment {seg} ({path}) is read-only")
        with open(path, "r+b") as fh:
            fh.seek(off)
            fh.write(payload(seed, n))
        return True

    def _op_shmread(self, tid, t, seg, off, n, key):
        path, _ = self.segments[seg]
        with open(path, "rb") as fh:
            fh.seek(off)
            self.heap.setdefault(key, bytearray()).extend(fh.read(n))
        return True

    def _op_put(self, tid, t, key, n, seed):
        self.heap[key] = bytearray(payload(seed, n))
        return True

    def _op_compute(self, tid, t, key):
        self.heap[key] = bytearray(hashlib.sha256(self.heap.get(key, b"")).digest())
        return True

    def _op_tagpid(self, tid, t, key):
        self.heap[key] = bytearray(str(self.vpid).encode())
        return True

    def _op_thread(self, tid, t, section):
        self.threads.append(ThreadState(section))
        return True

    def _op_delay_enter(self, tid, t):
        t.delay += 1
        return True

    def _op_delay_exit(self, tid, t):
        if t.delay <= 0:
            raise UnbalancedExit(f"{self.name} thread {tid}: delay_exit without delay_enter")
        t.delay -= 1
        return True

    def _op_hook(self, tid, t, key):
        self.hook_keys.append(key)
        return True

    def _op_yield(self, tid, t):
        return True

    def _op_ckpt(self, tid, t, key):
        # the request returns at once; the step completes when the epoch has
        if t.result is None:
            try:
                t.result = f"epoch:{self.request_checkpoint()}"
            except CheckpointInProgress:
                t.result = "busy"
        if t.result.startswith("epoch:") and self.done_epoch < int(t.result[6:]):
            return not self.attached
        self.heap[key] = bytearray(t.result.encode())
        return True

    def request_checkpoint(self, wait: bool = False) -> int:
        if self.in_hook:
            raise NotAllowedInHook("checkpoint requested from inside a hook")
        with CoordinatorClient(self.coordinator) as c:
            return c.request_checkpoint(wait=wait)

    def _op_fork(self, tid, t, section):
        self.forks += 1
        self._start_child(f"{self.name}.{self.forks}", section, share=True)
        return True

    def _op_spawn(self, tid, t, host, section):
        # real mode is localhost-only: every host index maps to this machine
        self.forks += 1
        self._start_child(f"{self.name}.r{self.forks}", section, share=False)
        return True

    def _start_child(self, name: str, section: str, share: bool) -> int:
        fdmap, pass_fds = {}, []
        if share:
            for fd, d in sorted(self.fds.items()):
                fdmap[fd] = {"kind": d.kind.value, "id": d.desc_id.to_list(),
                             "role": d.role.value, "label": d.label, "path": d.path,
                             "offset": d.offset, "writable": d.writable,
                             "confirmed": d.confirmed,
                             "listener": d.listener.to_list() if d.listener else None,
                             "real": d.sock.fileno() if d.sock is not None else None}
                if d.sock is not None:
                    pass_fds.append(d.sock.fileno())
        spec = {"name": name, "section": section, "program": self.program.text,
                "heap": {k: bytes(v).hex() for k, v in self.heap.items()} if share else {},
                "segments": dict(self.segments) if share else {},
                "hook_keys": list(self.hook_keys) if share else [],
                "tick": self.tick if share else 0, "fds": fdmap,
                "run_dir": str(self.run_dir), "coordinator": self.coordinator,
                "options": self.options}
        spec_path = self._path("spawn", f"{name}.json")
        spec_path.write_text(_dump(spec))
        with CoordinatorClient(self.coordinator) as c:
            live = set(c.status()["vpids"])

        def forker():
            return _spawn_python(["child", str(spec_path)], pass_fds, self._children)

        real, vpid = fork_until_no_conflict(None, live, forker,
                                            kill=_kill_child(self._children))
        proc = self._children[-1]
        _await_ready(proc, name)
        self.children.append(vpid)
        return vpid

    # -- manager ----------------------------------------------------------------------

    def start_manager(self) -> None:
        self._manager = threading.Thread(target=self._manager_main, daemon=True,
                                         name=f"ckpt-manager-{self.name}")
        self._manager.start()

    def _manager_main(self) -> None:
        try:
            self._client = CoordinatorClient(self.coordinator, timeout=30)
            img = self._restart_image
            extra = {}
            if img is not None:
                extra = {"restart": True, "epoch": img.generation,
                         "expected": img.meta.get("cluster_size", 0)}
            reply = self._client.register(self.vpid, self.hostname, **extra)
            self.attached = True
            self._registered.set()
            self.epoch = reply["epoch"]
            if img is not None:
                self._restart_epoch(img)
            elif reply["mode"] == "checkpointing" and reply.get("released") == "checkpoint-request":
                self._epoch(reply["epoch"])
            while True:
                tag, rep = self._client.report(self.vpid, BarrierName.CHECKPOINT_REQUEST,
                                               epoch=self.epoch)
                log.debug("%s: request barrier -> %s %s", self.name, tag.name, rep)
                if tag is Msg.ABORT:
                    break
                self._epoch(rep["epoch"])
        except CheckpointError as exc:
            log.warning("%s: manager stopped: %s", self.name, exc)
        except OSError as exc:
            log.warning("%s: manager lost its coordinator: %s", self.name, exc)
        finally:
            self.attached = False
            self._registered.set()
            self.unpark()
            self._quit.set()

    def _new_manager(self) -> CheckpointManager:
        o = self.opts
        return CheckpointManager(RealEndpoint(self), ckpt_dir=self.run_dir, basename=o.basename,
                                 mode=o.mode, sync=o.sync, level=o.level,
                                 writer=self._fork_writer)

    def _report(self, barrier: BarrierName, prefetch: bool = False, **extra) -> dict:
        if not prefetch:
            tag, rep = self._client.report(self.vpid, barrier, **extra)
        else:
            with ThreadPoolExecutor(1) as ex:
                fut = ex.submit(self._client.report, self.vpid, barrier, **extra)
                while not fut.done():
                    self.prefetch()
                    time.sleep(0.001)
                tag, rep = fut.result()
        log.debug("%s: %s -> %s %s", self.name, barrier.label, tag.name, rep)
        if tag is Msg.ABORT:
            raise _Aborted(rep.get("reason", "aborted"))
        return rep

    def _epoch(self, epoch: int) -> None:
        self.epoch = epoch
        m = self._new_manager()
        m.begin_epoch(epoch)
        t_suspend = time.perf_counter()
        drained = False
        try:
            m.suspend()
            self._report(BarrierName.SUSPENDED, prefetch=True)
            self.run_hooks("pre_ckpt")
            claims = m.claims()
            rep = self._report(BarrierName.ELECTION_COMPLETED, claims=claims)
            self.leaders = rep.get("leaders", {})
            m.apply_election(self.leaders)
            self._confirm_pending()
            self.peer_open = {d.key: d.peer_key in self.leaders for d in self._streams()}
            m.flush()
            m.drain()
            drained = True
            rep = self._report(BarrierName.DRAINED)
            self.cluster_size = rep.get("processes", 0)
            path = m.write_image()
            self._report(BarrierName.CHECKPOINTED, image=str(path), host=self.hostname)
            m.refill_sockets()
            self._report(BarrierName.REFILLED)
            m.resume()
        except _Aborted as exc:
            log.warning("%s: epoch %d aborted: %s", self.name, epoch, exc)
            if drained:
                sides = RealEndpoint(self).sides()
                for key, data in m.buffer.items():
                    sides[key].desc.inbox += data
            self.unpark()
        suspended = time.perf_counter() - t_suspend
        self.done_epoch = epoch
        m.wait_written()
        self._log_timings(m, suspended)

    def _confirm_pending(self) -> None:
        """A connector whose acceptor holds the connection in the election
        register has an ACCEPTED frame on its way; wait for it."""
        for d in self._streams():
            if not d.confirmed and d.peer_key in self.leaders:
                while not d.confirmed:
                    fr = read_frame(d.sock, TOKEN_TIMEOUT)
                    if fr is None:
                        raise PeerGone(f"{self.name}: acceptor of {d.key} vanished")
                    d._absorb(*fr)

    def _restart_epoch(self, img: CheckpointImage) -> None:
        self.epoch = img.generation
        m = self._new_manager()
        m.enter_restart(img)
        t0 = time.perf_counter()
        self.leaders = dict(m.leaders)
        m.refill_sockets()
        self._report(BarrierName.REFILLED)
        m.resume()
        self.done_epoch = img.generation
        self._log_timings(m, time.perf_counter() - t0)

    def _fork_writer(self, m: CheckpointManager, image: CheckpointImage):
        """Forked checkpointing: a child process captures, serializes,
        compresses and writes while the parent resumes."""
        pid = os.fork()
        if pid == 0:
            code = 1
            try:
                image.snapshot_blob = m.substrate.capture(self.state())
                m._write(image)
                if m.sync != "none":
                    storage.apply_sync_policy(m.sync, m.epoch, m.ckpt_dir)
                code = 0
            finally:
                os._exit(code)

        def wait():
            _, status = os.waitpid(pid, 0)
            if os.waitstatus_to_exitcode(status) != 0:
                raise CheckpointError(f"{self.name}: forked image writer failed")
        return _REAPER.submit(wait)

    def _log_timings(self, m: CheckpointManager, suspended: float) -> None:
        recs = [dict(r) for r in m.timer.records]
        recs.append({"path": m.path, "stage": "suspended", "duration": suspended,
                     "vpid": self.vpid, "epoch": m.epoch})
        for r in recs:
            r["name"] = self.name
            r["mode"] = m.mode
        self.timings.extend(recs)
        with open(self._path("timings", f"{self.name}.jsonl"), "a") as fh:
            for r in recs:
                fh.write(_dump(r) + "\n")


class _Aborted(Exception):
    pass


_REAPER = ThreadPoolExecutor(max_workers=2, thread_name_prefix="ckpt-reap")


# --- child processes --------------------------------------------------------------------

def _spawn_python(args: list[str], pass_fds, registry: list, env_extra=None) -> int:
    r, w = os.pipe()
    env = {**os.environ, **(env_extra or {})}
    env["DCKPT_READY_FD"] = str(w)
    src = str(Path(__file__).resolve().parent.parent)
    env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
    proc = subprocess.Popen([sys.executable, "-m", "dckpt.realmode", *args],
                            pass_fds=[*pass_fds, w], env=env)
    os.close(w)
    proc.ready_fd = r
    registry.append(proc)
    return proc.pid


def _kill_child(registry: list):
    def kill(pid: int) -> None:
        for proc in registry:
            if proc.pid == pid:
                proc.kill()
                proc.wait()
                os.close(proc.ready_fd)
                registry.remove(proc)
                return
    return kill


def _await_ready(proc, name: str, timeout: float = 60.0) -> None:
    r = proc.ready_fd
    ok, _, _ = select.select([r], [], [], timeout)
    data = os.read(r, 16) if ok else b""
    os.close(r)
    if data != READY:
        raise RetryBudgetExhausted(f"process {name} did not start")


def _ready_fd_from_env() -> int | None:
    v = os.environ.pop("DCKPT_READY_FD", None)
    return int(v) if v else None


def run_child(spec_path: str) -> None:
    spec = json.loads(Path(spec_path).read_text())
    w = Worker(spec["name"], spec["program"], spec["run_dir"], spec["coordinator"],
               section=spec["section"], options=spec["options"])
    w.heap = {k: bytearray.fromhex(v) for k, v in spec["heap"].items()}
    w.segments = {k: (p, bool(rw)) for k, (p, rw) in spec["segments"].items()}
    w.hook_keys = list(spec["hook_keys"])
    w.tick = spec["tick"]
    shared: dict[int, RealDesc] = {}
    for fd, info in spec["fds"].items():
        real = info["real"]
        if real is not None and real in shared:
            w.fds[int(fd)] = shared[real]
            continue
        sock = socket.socket(fileno=real) if real is not None else None
        d = RealDesc(DescriptorKind(info["kind"]), GlobalSocketId.from_list(info["id"]),
                     Role(info["role"]), sock, info["label"], info["path"], info["offset"],
                     info["writable"])
        d.confirmed = info["confirmed"]
        d.listener = GlobalSocketId.from_list(info["listener"]) if info["listener"] else None
        w.fds[int(fd)] = d
        if real is not None:
            shared[real] = d
    w._ready_fd = _ready_fd_from_env()
    w.run()


def launch(name: str, program_text: str, run_dir, coordinator: str, options=None) -> Worker:
    """Run a root process in the calling OS process (the launcher becomes it)."""
    w = Worker(name, program_text, run_dir, coordinator, options=options)
    w._ready_fd = _ready_fd_from_env()
    w.run()
    return w


# --- restart ----------------------------------------------------------------------------

@dataclass
class PoolEntry:
    key: str
    kind: DescriptorKind
    sock: socket.socket | None = None
    rec: DescriptorRecord | None = None


@dataclass
class HostRestartReal:
    """The unified restart process for this host."""

    images: list[CheckpointImage]
    coordinator: str
    seed: int | None = None
    pool: dict[int, PoolEntry] = field(default_factory=dict)
    by_key: dict[str, int] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    def _add(self, entry: PoolEntry) -> None:
        n = len(self.pool) + 3
        self.pool[n] = entry
        self.by_key[entry.key] = n

    def _sides(self):
        seen = set()
        for img in self.images:
            for rec in img.conn_table.records:
                key = side_key(rec.socket_id, rec.role)
                if key not in seen:
                    seen.add(key)
                    yield img, key, rec

    def reopen_files_and_listeners(self, client: CoordinatorClient) -> None:
        t0 = time.perf_counter()
        for img, key, rec in self._sides():
            if rec.kind is DescriptorKind.TCP_LISTENER:
                s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
                s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
                s.bind(("127.0.0.1", 0))
                s.listen(128)
                host, port = s.getsockname()[:2]
                run_dir = Path(img.meta.get("run_dir", "."))
                (run_dir / "listeners").mkdir(parents=True, exist_ok=True)
                tmp = run_dir / "listeners" / f".{img.meta['name']}.{rec.fd_num}.tmp"
                tmp.write_text(_dump({"address": f"{host}:{port}",
                                      "id": rec.socket_id.to_list()}))
                os.replace(tmp, run_dir / "listeners" / f"{img.meta['name']}.{rec.fd_num}")
                client.advertise(f"listen:{rec.socket_id}", f"{host}:{port}")
                self._add(PoolEntry(key, rec.kind, s, rec))
            elif not rec.kind.is_stream:
                self._add(PoolEntry(key, rec.kind, None, rec))
        self.timings["restore-files"] = time.perf_counter() - t0

    def reconnect_sockets(self, client: CoordinatorClient) -> None:
        t0 = time.perf_counter()
        rl = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        rl.bind(("127.0.0.1", 0))
        rl.listen(1024)
        addr = "%s:%d" % rl.getsockname()[:2]
        accepting: dict[str, DescriptorRecord] = {}
        lookups = []
        for _, key, rec in self._sides():
            if not rec.kind.is_stream:
                continue
            if rec.listener is not None:
                lookups.append(("listen", key, rec))
            elif rec.peer_closed:
                a, b = socket.socketpair()
                b.close()
                self._add(PoolEntry(key, rec.kind, a, rec))
            elif rec.role is Role.ACCEPTOR:
                client.advertise(str(rec.socket_id), addr)
                accepting[str(rec.socket_id)] = rec
            else:
                lookups.append(("peer", key, rec))
        random.Random(self.seed).shuffle(lookups)
        for what, key, rec in lookups:
            target = f"listen:{rec.listener}" if what == "listen" else str(rec.socket_id)
            host, port = client.lookup(target).rsplit(":", 1)
            s = socket.create_connection((host, int(port)))
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            hello = _dump({"id": rec.socket_id.to_list(), "label": rec.label}).encode()
            s.sendall(wire.pack(Frame.HELLO, hello))
            self._add(PoolEntry(key, rec.kind, s, rec))
        for _ in range(len(accepting)):
            conn, _ = rl.accept()
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            fr = read_frame(conn, 30.0)
            sid = GlobalSocketId.from_list(json.loads(fr[1])["id"]) if fr else None
            rec = accepting.pop(str(sid), None)
            if rec is None:
                raise HandshakeMismatch(f"restart handshake for unknown socket {sid}")
            self._add(PoolEntry(side_key(rec.socket_id, rec.role), rec.kind, conn, rec))
        rl.close()
        self.timings["reconnect"] = time.perf_counter() - t0

    def fork_into_user_processes(self, image_paths: list[str], live: set[int]) -> list:
        t0 = time.perf_counter()
        children: list[subprocess.Popen] = []
        pool_spec = {str(n): {"key": e.key, "real": e.sock.fileno() if e.sock else None}
                     for n, e in self.pool.items()}
        pass_fds = [e.sock.fileno() for e in self.pool.values() if e.sock is not None]
        started = []
        for img, path in zip(self.images, image_paths):
            def forker(path=path):
                return _spawn_python(["resume", path, _dump(pool_spec)], pass_fds, children,
                                     {"DCKPT_COORDINATOR": self.coordinator})
            fork_until_no_conflict(img.vpid, live, forker, kill=_kill_child(children))
            started.append((children[-1], img.meta.get("name")))
        for proc, name in started:
            _await_ready(proc, name)
        self.timings["restore-memory"] = time.perf_counter() - t0
        for e in self.pool.values():
            if e.sock is not None:
                e.sock.close()
        return [p for p, _ in started]


def restart_host(image_paths: list[str], coordinator: str, seed: int | None = None,
                 wait: bool = True) -> list:
    images = load_images(image_paths)
    gens = {img.generation for img in images}
    if len(gens) != 1:
        from .errors import IncompleteEpoch
        raise IncompleteEpoch(f"images from several generations: {sorted(gens)}")
    expected = images[0].meta.get("cluster_size") or len(images)
    eng = HostRestartReal(images, coordinator, seed)
    with CoordinatorClient(coordinator, timeout=30) as client:
        client.register(None, restart=True, epoch=images[0].generation, expected=expected)
        eng.reopen_files_and_listeners(client)
        eng.reconnect_sockets(client)
    live = {img.vpid for img in images}
    procs = eng.fork_into_user_processes([str(p) for p in image_paths], live)
    run_dir = Path(images[0].meta.get("run_dir", "."))
    timing_path = run_dir / "timings" / f"restart-{os.getpid()}.jsonl"
    timing_path.parent.mkdir(parents=True, exist_ok=True)
    with open(timing_path, "a") as fh:
        for stage, dur in eng.timings.items():
            fh.write(_dump({"path": "restart", "stage": stage, "duration": dur,
                            "epoch": images[0].generation, "vpid": None}) + "\n")
    if wait:
        for p in procs:
            p.wait()
    return procs


def run_resume(image_path: str, pool_json: str) -> None:
    """Body of one restored process: rearrange inherited descriptors,
    restore memory, then rejoin the protocol at the refill stage."""
    img = storage.read_image_file(image_path)
    pool = {int(n): v for n, v in json.loads(pool_json).items()}
    by_key = {v["key"]: n for n, v in pool.items()}
    wanted = {rec.fd_num: by_key[side_key(rec.socket_id, rec.role)]
              for rec in img.conn_table.records}
    table, _ = rearrange_descriptors(pool, wanted)
    keep = {e["real"] for e in table.values() if e["real"] is not None}
    for e in pool.values():
        if e["real"] is not None and e["real"] not in keep:
            os.close(e["real"])
    st = DEFAULT_SUBSTRATE.restore(img.snapshot_blob)
    meta = img.meta
    w = Worker(meta["name"], st["program"], meta["run_dir"], os.environ["DCKPT_COORDINATOR"],
               section=None, options=meta.get("options"),
               hostname=meta.get("host_name", "localhost"))
    recs = {rec.fd_num: rec for rec in img.conn_table.records}
    made: dict[int, RealDesc] = {}
    for fd, entry in sorted(table.items()):
        rec = recs[fd]
        real = entry["real"]
        key = id(entry)
        if key in made:
            w.fds[fd] = made[key]
            continue
        sock = socket.socket(fileno=real) if real is not None else None
        d = RealDesc(rec.kind, rec.socket_id, rec.role, sock, rec.label, rec.path, rec.offset,
                     rec.writable)
        d.listener = rec.listener
        made[key] = d
        w.fds[fd] = d
    w.load_state(st)
    w.peer_open = {side_key(r.socket_id, r.role): not r.peer_closed
                   for r in img.conn_table.records if r.kind.is_stream}
    restore_shared_memory(w.fs, [SegmentRecord(p, d) for p, d in sorted(st.get("shm", {}).items())])
    w._restart_image = img
    w._suspend = True      # stay parked until the refill stage is over
    w._ready_fd = _ready_fd_from_env()
    w.run()


# --- entry point for helper processes --------------------------------------------------------

def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python3 -m dckpt.realmode")
    sub = ap.add_subparsers(dest="cmd", required=True)
    wk = sub.add_parser("worker")
    wk.add_argument("name")
    wk.add_argument("workload")
    wk.add_argument("--dir", required=True)
    wk.add_argument("--coordinator", required=True)
    wk.add_argument("--options", default="{}")
    c = sub.add_parser("child")
    c.add_argument("spec")
    r = sub.add_parser("resume")
    r.add_argument("image")
    r.add_argument("pool")
    args = ap.parse_args(argv)
    logging.basicConfig(level=os.environ.get("DCKPT_LOGLEVEL", "WARNING"))
    signal.signal(signal.SIGTERM, lambda *_: os._exit(143))
    if args.cmd == "worker":
        launch(args.name, Path(args.workload).read_text(), args.dir, args.coordinator,
               json.loads(args.options))
    elif args.cmd == "child":
        run_child(args.spec)
    else:
        run_resume(args.image, args.pool)
    return 0


if __name__ == "__main__":
    sys.exit(main())
