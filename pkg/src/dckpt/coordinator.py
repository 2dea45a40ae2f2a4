"""Checkpoint coordinator: process registry, barrier service, restart-time
discovery and checkpoint triggering.

:class:`Coordinator` is a pure state machine.  The simulator drives it
directly; :class:`CoordinatorServer` wraps it behind the wire protocol with
blocking semantics for real processes, and :class:`CoordinatorClient` is the
matching client.
"""

from __future__ import annotations

import enum
import logging
import os
import select
import socket
import socketserver
import threading
import time
from dataclasses import dataclass
from typing import Callable

from . import wire
from .core import BarrierName
from .errors import (CheckpointError, CheckpointInProgress, CoordinatorUnreachable,
                     DuplicateVpid, EpochAborted, LookupTimeout, OutOfOrderBarrier,
                     UnknownProcess, WrongMode)
from .wire import Msg

log = logging.getLogger(__name__)

ENV_COORDINATOR = "DCKPT_COORDINATOR"
DEFAULT_PORT = 7779
REAL_RESTART_CMD = "python3 -m dckpt restart --mode real"


class Mode(str, enum.Enum):
    RUNNING = "running"
    CHECKPOINTING = "checkpointing"
    RESTARTING = "restarting"


@dataclass
class ProcEntry:
    vpid: int
    host: str
    address: str = ""
    live: bool = True


class Coordinator:
    """Coordinator state.  Every mutation appends to ``trace`` so tests can
    check barrier order and message counts."""

    def __init__(self, interval: float | None = None):
        self.registry: dict[int, ProcEntry] = {}
        self.mode = Mode.RUNNING
        self.epoch = 0
        self.released: BarrierName | None = None
        self.barrier_table: dict[BarrierName, set[int]] = {b: set() for b in BarrierName}
        self.waiting_request: set[int] = set()
        self.advertisements: dict[str, object] = {}
        self.election: dict[str, int] = {}
        self.expected = 0
        self.aborts = 0
        self.interval = interval
        self._next_due = interval
        self.trace: list[dict] = []
        self._listeners: list[Callable[[dict], None]] = []

    # -- bookkeeping ---------------------------------------------------------

    def subscribe(self, fn: Callable[[dict], None]) -> None:
        self._listeners.append(fn)

    def _emit(self, event: str, **fields) -> dict:
        rec = {"seq": len(self.trace), "event": event, "epoch": self.epoch, **fields}
        self.trace.append(rec)
        for fn in self._listeners:
            fn(rec)
        return rec

    @property
    def live(self) -> set[int]:
        return {v for v, e in self.registry.items() if e.live}

    def status(self) -> dict:
        return {
            "mode": self.mode.value,
            "epoch": self.epoch,
            "processes": len(self.live),
            "released": self.released.label if self.released else None,
            "aborts": self.aborts,
            "vpids": sorted(self.live),
        }

    # -- registry ------------------------------------------------------------

    def register(self, vpid: int, host: str, address: str = "") -> None:
        if vpid in self.live:
            raise DuplicateVpid(f"vpid {vpid} is already registered")
        self.registry[vpid] = ProcEntry(vpid, host, address)
        self._emit("register", vpid=vpid, host=host)

    def deregister(self, vpid: int) -> None:
        if vpid not in self.registry:
            return
        del self.registry[vpid]
        self.waiting_request.discard(vpid)
        for s in self.barrier_table.values():
            s.discard(vpid)
        self._emit("deregister", vpid=vpid)
        if self.mode is Mode.CHECKPOINTING and self.released is BarrierName.CHECKPOINT_REQUEST:
            # it left before suspending: nothing of it will be in the epoch
            self._maybe_release(BarrierName.SUSPENDED)
        elif self.mode is not Mode.RUNNING:
            self.abort(f"process {vpid} lost during {self.mode.value}")

    # -- checkpoint ----------------------------------------------------------

    def request_checkpoint(self) -> int:
        if self.mode is not Mode.RUNNING:
            raise CheckpointInProgress(f"coordinator is {self.mode.value}")
        self.epoch += 1
        self.mode = Mode.CHECKPOINTING
        self.election.clear()
        self._release(BarrierName.CHECKPOINT_REQUEST)
        return self.epoch

    def tick(self, now: float) -> int | None:
        """Advance the interval clock.  Returns the new epoch when an interval
        checkpoint starts; a tick that lands during a checkpoint is dropped."""
        if not self.interval or self._next_due is None or now < self._next_due:
            return None
        while self._next_due <= now:
            self._next_due += self.interval
        if self.mode is not Mode.RUNNING or not self.live:
            self._emit("interval-skipped", now=now)
            return None
        return self.request_checkpoint()

    def barrier_report(self, vpid: int, barrier: BarrierName) -> bool:
        """Record that ``vpid`` reached ``barrier``.  Returns True when this
        report completed the quorum and released the barrier."""
        barrier = BarrierName(barrier)
        if vpid not in self.live:
            raise UnknownProcess(f"vpid {vpid} is not registered")
        self._emit("report", vpid=vpid, barrier=barrier.label)
        if barrier is BarrierName.CHECKPOINT_REQUEST:
            if self.mode is not Mode.RUNNING and self.released is not BarrierName.REFILLED:
                self.abort(f"vpid {vpid} waited for a request during {self.mode.value}")
                raise OutOfOrderBarrier("request barrier reported mid-epoch")
            self.waiting_request.add(vpid)
            return False
        expected = self.released.next() if self.released else None
        if (self.mode is Mode.RUNNING or barrier is not expected
                or vpid in self.barrier_table[barrier]):
            self.abort(f"vpid {vpid} reported {barrier.label} out of order")
            raise OutOfOrderBarrier(
                f"vpid {vpid} reported {barrier.label}; next barrier is "
                f"{expected.label if expected else 'none'}")
        self.barrier_table[barrier].add(vpid)
        return self._maybe_release(barrier)

    def _maybe_release(self, barrier: BarrierName) -> bool:
        live = self.live
        if not live or not live <= self.barrier_table[barrier] or len(live) < self.expected:
            return False
        self._release(barrier)
        return True

    def _release(self, barrier: BarrierName) -> None:
        self.released = barrier
        self.barrier_table[barrier].clear()
        if barrier is BarrierName.CHECKPOINT_REQUEST:
            self.waiting_request.clear()
        self._emit("release", barrier=barrier.label)
        if barrier is BarrierName.REFILLED:
            self.mode = Mode.RUNNING
            self.advertisements.clear()
            self.election.clear()
            self.expected = 0
            self._emit("epoch-complete")

    def abort(self, reason: str) -> None:
        self.aborts += 1
        self.mode = Mode.RUNNING
        self.released = None
        for s in self.barrier_table.values():
            s.clear()
        self.advertisements.clear()
        self.election.clear()
        self.expected = 0
        self._emit("abort", reason=reason)

    # -- election register ---------------------------------------------------

    def elect(self, vpid: int, keys) -> None:
        """Last writer wins, the same rule F_SETOWN gives when every sharer
        sets itself as owner."""
        if self.released is not BarrierName.SUSPENDED:
            raise OutOfOrderBarrier("election writes are only valid after 'suspended'")
        for key in keys:
            self.election[key] = vpid

    def leader(self, key: str) -> int | None:
        return self.election.get(key)

    def is_leader(self, vpid: int, key: str) -> bool:
        return self.election.get(key) == vpid

    # -- restart / discovery -------------------------------------------------

    def begin_restart(self, epoch: int, expected: int) -> None:
        """Enter restarting mode with barriers 1..5 considered released, so
        restored processes resume at the refill stage."""
        if self.mode is not Mode.RUNNING:
            raise CheckpointInProgress(f"coordinator is {self.mode.value}")
        self.mode = Mode.RESTARTING
        self.epoch = epoch
        self.expected = expected
        self.released = BarrierName.CHECKPOINTED
        self._emit("restart-begin", expected=expected)

    def advertise(self, key: str, address) -> None:
        if self.mode is not Mode.RESTARTING:
            raise WrongMode("advertise is only valid while restarting")
        self.advertisements[key] = address
        self._emit("advertise", key=key)

    def lookup(self, key: str):
        """Non-blocking lookup; callers that need blocking semantics retry
        until a value appears (the server does this with a condition)."""
        if self.mode is not Mode.RESTARTING:
            raise WrongMode("lookup is only valid while restarting")
        return self.advertisements.get(key)

    # -- trace helpers -------------------------------------------------------

    def releases(self, epoch: int | None = None) -> list[dict]:
        return [e for e in self.trace if e["event"] == "release"
                and (epoch is None or e["epoch"] == epoch)]


# --- TCP service --------------------------------------------------------------

_ERRORS = {cls.__name__: cls for cls in (DuplicateVpid, CheckpointInProgress, OutOfOrderBarrier,
                                         WrongMode, UnknownProcess, EpochAborted, LookupTimeout)}


class _Handler(socketserver.BaseRequestHandler):
    server: "CoordinatorServer"

    def setup(self):
        self.vpid: int | None = None
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def handle(self):
        srv = self.server
        while True:
            try:
                tag, msg = wire.recv_json(self.request)
            except (ConnectionError, OSError):
                break
            try:
                reply_tag, reply = srv.dispatch(self, Msg(tag), msg)
            except PeerDisconnected:
                break
            except CheckpointError as exc:
                reply_tag, reply = Msg.ERROR, {"type": type(exc).__name__, "message": str(exc)}
            try:
                self.request.sendall(wire.pack_json(reply_tag, reply))
            except OSError:
                break
            if tag == Msg.QUIT:
                # only now: the process may exit as soon as serve_forever returns
                threading.Thread(target=srv.shutdown, daemon=True).start()
                break

    def finish(self):
        if self.vpid is not None:
            with self.server.cond:
                self.server.state.deregister(self.vpid)
                self.server.cond.notify_all()


class CoordinatorServer(socketserver.ThreadingTCPServer):
    """Threaded front end; all state mutations hold ``cond``."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, host: str = "127.0.0.1", port: int = 0, interval: float | None = None):
        super().__init__((host, port), _Handler)
        self.state = Coordinator(interval=interval)
        self.cond = threading.Condition()
        self.quitting = False
        self._thread: threading.Thread | None = None
        self._ticker: threading.Thread | None = None
        self._t0 = time.monotonic()
        self.images: dict[int, dict[int, tuple[str, str]]] = {}
        self.scripts: dict[int, str] = {}
        self._scripted: set[int] = set()

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "CoordinatorServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True,
                                        name="coordinator")
        self._thread.start()
        if self.state.interval:
            self._ticker = threading.Thread(target=self._tick_loop, daemon=True)
            self._ticker.start()
        return self

    def stop(self) -> None:
        with self.cond:
            self.quitting = True
            self.cond.notify_all()
        self.shutdown()
        self.server_close()

    def _tick_loop(self):
        while not self.quitting:
            time.sleep(min(0.05, self.state.interval))
            with self.cond:
                if self.state.tick(time.monotonic() - self._t0) is not None:
                    self.cond.notify_all()

    def _wait(self, pred, timeout: float | None = None, handler=None) -> bool:
        """Wait for ``pred`` under ``cond``.  With ``handler`` the client's
        socket is checked between slices, so a process killed while parked
        at a barrier is deregistered promptly."""
        # state may have changed in this handler; let other waiters see it first
        self.cond.notify_all()
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            step = PEER_CHECK
            if deadline is not None:
                step = min(step, max(0.0, deadline - time.monotonic()))
            if self.cond.wait_for(lambda: self.quitting or pred(), step):
                return True
            if deadline is not None and time.monotonic() >= deadline:
                return False
            if handler is not None and handler.vpid is not None and _peer_gone(handler.request):
                self.state.deregister(handler.vpid)
                handler.vpid = None
                self.cond.notify_all()
                raise PeerDisconnected("client went away")

    def dispatch(self, handler: _Handler, tag: Msg, msg: dict):
        st = self.state
        with self.cond:
            try:
                return self._dispatch(handler, tag, msg, st)
            finally:
                self.cond.notify_all()

    def _dispatch(self, handler, tag, msg, st):
        if tag is Msg.REGISTER:
            if msg.get("restart") and st.mode is Mode.RUNNING:
                st.begin_restart(msg["epoch"], msg.get("expected", 0))
            if msg.get("vpid") is None:
                # a unified restart process: no registry entry
                return Msg.ACK, {"epoch": st.epoch, "mode": st.mode.value}
            if msg.get("restart"):
                # the killed incarnation's connection may not be noticed yet
                self._wait(lambda: msg["vpid"] not in st.live, 5.0)
            else:
                # a new process may join an epoch only before anyone is suspended
                self._wait(lambda: st.mode is Mode.RUNNING or (
                    st.mode is Mode.CHECKPOINTING
                    and st.released is BarrierName.CHECKPOINT_REQUEST), msg.get("timeout"))
            st.register(msg["vpid"], msg.get("host", "localhost"), msg.get("address", ""))
            handler.vpid = msg["vpid"]
            return Msg.ACK, {"epoch": st.epoch, "mode": st.mode.value,
                             "released": st.released.label if st.released else None}
        if tag is Msg.CKPT_REQUEST:
            epoch = st.request_checkpoint()
            if msg.get("wait"):
                aborts = st.aborts
                self._wait(lambda: st.aborts != aborts or (
                    st.epoch == epoch and st.mode is Mode.RUNNING), msg.get("timeout"))
                if st.aborts != aborts:
                    raise EpochAborted(f"epoch {epoch} aborted")
            return Msg.ACK, {"epoch": epoch}
        if tag is Msg.BARRIER_REPORT:
            return self._barrier(handler, msg, st)
        if tag is Msg.ADVERTISE:
            st.advertise(msg["key"], msg["address"])
            return Msg.ACK, {}
        if tag is Msg.LOOKUP:
            key = msg["key"]
            ok = self._wait(lambda: st.mode is not Mode.RESTARTING or key in st.advertisements,
                            msg.get("timeout"))
            addr = st.lookup(key)
            if not ok or addr is None:
                raise LookupTimeout(f"no advertisement for {key}")
            return Msg.LOOKUP_REPLY, {"key": key, "address": addr}
        if tag is Msg.STATUS:
            if msg.get("script_for") is not None:
                ep = msg["script_for"]
                self._wait(lambda: ep in self.scripts, msg.get("timeout", 30.0))
                return Msg.STATUS, {**st.status(), "script": self.scripts.get(ep)}
            return Msg.STATUS, st.status()
        if tag is Msg.QUIT:
            self.quitting = True
            return Msg.ACK, {}
        raise OutOfOrderBarrier(f"unexpected message {tag!r}")

    def _barrier(self, handler, msg, st):
        vpid = msg["vpid"]
        barrier = BarrierName(msg["barrier"])
        if barrier is BarrierName.CHECKPOINT_REQUEST:
            known = msg.get("epoch", st.epoch)
            if not (st.epoch > known and st.mode is Mode.CHECKPOINTING):
                st.barrier_report(vpid, barrier)
            # else an epoch began after this process last looked: join it now
            self._wait(lambda: st.epoch > known and st.mode is Mode.CHECKPOINTING,
                       handler=handler)
            if self.quitting:
                return Msg.ABORT, {"reason": "quit"}
            return Msg.BARRIER_RELEASE, {"barrier": int(barrier), "epoch": st.epoch}
        if barrier is BarrierName.ELECTION_COMPLETED and msg.get("claims"):
            st.elect(vpid, msg["claims"])
        if barrier is BarrierName.CHECKPOINTED and msg.get("image"):
            self.images.setdefault(st.epoch, {})[vpid] = (msg.get("host", "localhost"),
                                                          msg["image"])
        epoch, aborts = st.epoch, st.aborts
        st.barrier_report(vpid, barrier)
        self._wait(lambda: st.aborts != aborts or (
            st.epoch == epoch and st.released is not None and st.released >= barrier),
            handler=handler)
        if self.quitting:
            return Msg.ABORT, {"reason": "quit"}
        if st.aborts != aborts:
            return Msg.ABORT, {"reason": "epoch aborted"}
        reply = {"barrier": int(barrier), "epoch": epoch, "processes": len(st.live)}
        if barrier is BarrierName.ELECTION_COMPLETED:
            reply["leaders"] = dict(st.election)
        if barrier is BarrierName.REFILLED and epoch not in self._scripted:
            self._scripted.add(epoch)
            threading.Thread(target=self._write_script, args=(epoch,), daemon=True).start()
        return Msg.BARRIER_RELEASE, reply

    def _write_script(self, epoch: int, timeout: float = 120.0) -> None:
        """Regenerate the restart script once every image of ``epoch`` is on
        disk (forked writers may still be busy when 'refilled' releases)."""
        from . import storage
        entries = self.images.get(epoch, {})
        if not entries:
            return
        deadline = time.monotonic() + timeout
        while any(not os.path.exists(p) for _, p in entries.values()):
            if time.monotonic() > deadline or self.quitting:
                log.warning("epoch %d: images missing, no restart script", epoch)
                return
            time.sleep(0.01)
        manifest = storage.RestartManifest(coordinator=self.address, epoch=epoch,
                                           restart_cmd=REAL_RESTART_CMD)
        for vpid in sorted(entries):
            host, path = entries[vpid]
            manifest.hosts.setdefault(host, []).append(path)
        ckpt_dir = os.path.dirname(os.path.dirname(next(iter(entries.values()))[1]))
        storage.write_restart_script(storage.generate_restart_script(manifest), ckpt_dir)
        with self.cond:
            self.scripts[epoch] = os.path.join(ckpt_dir, storage.SCRIPT_NAME)
            self.cond.notify_all()


PEER_CHECK = 0.2


class PeerDisconnected(Exception):
    pass


def _peer_gone(sock: socket.socket) -> bool:
    # a waiting client has nothing else in flight, so readable means EOF
    try:
        r, _, _ = select.select([sock], [], [], 0)
        return bool(r) and sock.recv(1, socket.MSG_PEEK) == b""
    except OSError:
        return True


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def resolve_address(addr: str | None) -> str:
    return addr or os.environ.get(ENV_COORDINATOR) or f"127.0.0.1:{DEFAULT_PORT}"


class CoordinatorClient:
    """Blocking request/response client.  One outstanding call at a time."""

    def __init__(self, address: str, timeout: float | None = 10.0):
        self.address = address
        host, port = parse_address(address)
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise CoordinatorUnreachable(f"cannot reach coordinator at {address}: {exc}") from exc
        self.sock.settimeout(None)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._lock = threading.Lock()

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def call(self, tag: Msg, payload: dict | None = None) -> tuple[Msg, dict]:
        with self._lock:
            try:
                self.sock.sendall(wire.pack_json(tag, payload or {}))
                rtag, reply = wire.recv_json(self.sock)
            except (ConnectionError, OSError) as exc:
                from .errors import CoordinatorLost
                raise CoordinatorLost(str(exc)) from exc
        rtag = Msg(rtag)
        if rtag is Msg.ERROR:
            cls = _ERRORS.get(reply.get("type"), CheckpointError)
            raise cls(reply.get("message", ""))
        return rtag, reply

    def register(self, vpid: int, host: str = "localhost", address: str = "", **extra) -> dict:
        return self.call(Msg.REGISTER, {"vpid": vpid, "host": host, "address": address, **extra})[1]

    def request_checkpoint(self, wait: bool = False, timeout: float | None = None) -> int:
        return self.call(Msg.CKPT_REQUEST, {"wait": wait, "timeout": timeout})[1]["epoch"]

    def report(self, vpid: int, barrier: BarrierName, **extra) -> tuple[Msg, dict]:
        return self.call(Msg.BARRIER_REPORT, {"vpid": vpid, "barrier": int(barrier), **extra})

    def advertise(self, key: str, address) -> None:
        self.call(Msg.ADVERTISE, {"key": key, "address": address})

    def lookup(self, key: str, timeout: float | None = 30.0):
        return self.call(Msg.LOOKUP, {"key": key, "timeout": timeout})[1]["address"]

    def status(self) -> dict:
        return self.call(Msg.STATUS)[1]

    def wait_script(self, epoch: int, timeout: float = 30.0) -> str | None:
        """Block until the restart script for ``epoch`` has been written."""
        return self.call(Msg.STATUS, {"script_for": epoch, "timeout": timeout})[1].get("script")

    def quit(self) -> None:
        self.call(Msg.QUIT)
