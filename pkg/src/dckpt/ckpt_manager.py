"""Per-process checkpoint manager.

The manager owns the protocol steps between barriers: suspend user
threads, elect a leader for every shared descriptor, flush and drain
in-flight stream data, write the image, send drained data back for the
sender to refill, and resume.  It talks to its process through an
*endpoint* (simulated process or real-socket runtime) so the same code
serves both modes and both the checkpoint and restart paths.
"""

from __future__ import annotations

import concurrent.futures
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from . import storage
from .core import BarrierName, CheckpointImage, ConnectionInfoTable
from .errors import PeerGone, ThreadUnresponsive, TokenTimeout
from .substrate import DEFAULT_SUBSTRATE

log = logging.getLogger(__name__)

MODES = {
    "plain": ("none", False),
    "compressed": ("gzip", False),
    "forked-compressed": ("gzip", True),
    "forked": ("none", True),
}

CKPT_STAGES = ("suspend", "elect", "drain", "write", "refill")
RESTART_STAGES = ("restore-files", "reconnect", "restore-memory", "refill")


class StageTimer:
    """Collects per-stage timing records (stage, duration) for the report."""

    def __init__(self, path: str = "checkpoint", vpid: int | None = None):
        self.path = path
        self.vpid = vpid
        self.epoch: int | None = None
        self.records: list[dict] = []

    def add(self, stage: str, duration: float, path: str | None = None) -> None:
        for rec in self.records:
            if (rec["stage"] == stage and rec["epoch"] == self.epoch
                    and rec["path"] == (path or self.path)):
                rec["duration"] += duration
                return
        self.records.append({"path": path or self.path, "stage": stage, "duration": duration,
                             "vpid": self.vpid, "epoch": self.epoch})

    @contextmanager
    def stage(self, name: str, path: str | None = None):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.add(name, time.perf_counter() - t0, path)


class Side(Protocol):
    """One held open description as seen by the manager."""

    key: str
    stream: bool
    peer_open: bool

    def send_token(self) -> None: ...
    def drain_until_token(self) -> bytes: ...
    def drain_available(self) -> bytes: ...
    def send_refill(self, data: bytes) -> None: ...
    def take_refill(self) -> bytes: ...
    def resend(self, data: bytes) -> None: ...
    def restore_local(self, data: bytes) -> None: ...


class Endpoint(Protocol):
    vpid: int
    host_id: int

    def park_threads(self) -> int: ...
    def unpark_threads(self) -> int: ...
    def sides(self) -> dict[str, Side]: ...
    def records(self, leaders: dict[str, int]) -> list: ...
    def peer_info(self, key: str) -> tuple[int, int] | None: ...
    def state(self) -> dict: ...
    def meta(self) -> dict: ...
    def run_hooks(self, kind: str) -> None: ...
    def get_owner(self, key: str) -> int | None: ...
    def set_owner(self, key: str, owner: int | None) -> None: ...


@dataclass
class SuspensionReceipt:
    vpid: int
    parked: int
    owners: dict[str, int | None] = field(default_factory=dict)


class CheckpointManager:
    def __init__(self, endpoint: Endpoint, *, ckpt_dir, basename: str = "ckpt",
                 mode: str = "plain", sync: str = "none", level: int = 6,
                 substrate=DEFAULT_SUBSTRATE, writer=None):
        self.ep = endpoint
        self.vpid = endpoint.vpid
        self.ckpt_dir = Path(ckpt_dir)
        self.basename = basename
        self.codec, self.forked = MODES[mode]
        self.mode = mode
        self.sync = sync
        self.level = level
        self.substrate = substrate
        self.writer = writer
        self.timer = StageTimer("checkpoint", self.vpid)
        self.epoch = 0
        self.receipt: SuspensionReceipt | None = None
        self.leaders: dict[str, int] = {}
        self.leading: set[str] = set()
        self.buffer: dict[str, bytes] = {}
        self.conn_table: ConnectionInfoTable | None = None
        self.image_path: Path | None = None
        self.pending_write = None
        self.path = "checkpoint"

    # -- step 1 ----------------------------------------------------------------

    def begin_epoch(self, epoch: int) -> None:
        self.epoch = epoch
        self.timer.epoch = epoch
        self.path = "checkpoint"
        self.buffer = {}
        self.leaders = {}
        self.leading = set()

    # -- step 2 ----------------------------------------------------------------

    def suspend(self) -> SuspensionReceipt:
        with self.timer.stage("suspend"):
            parked = self.ep.park_threads()
            owners = {k: self.ep.get_owner(k) for k in self.ep.sides()}
            self.receipt = SuspensionReceipt(self.vpid, parked, owners)
        return self.receipt

    suspend_user_threads = suspend

    # -- step 3 ----------------------------------------------------------------

    def claims(self) -> list[str]:
        """Keys this process writes into the election register."""
        with self.timer.stage("elect"):
            keys = sorted(self.ep.sides())
            for k in keys:
                self.ep.set_owner(k, self.vpid)
        return keys

    def apply_election(self, register: dict[str, int]) -> set[str]:
        with self.timer.stage("elect"):
            sides = self.ep.sides()
            self.leaders = {k: register[k] for k in sides if k in register}
            self.leading = {k for k in sides if register.get(k) == self.vpid}
        return self.leading

    def is_leader(self, key: str) -> bool:
        return key in self.leading

    def elect_leaders(self, register) -> set[str]:
        """Claim every held description in ``register`` (a mutable mapping
        or an object with ``elect(vpid, keys)``) and read back the winners
        once every claimant has written."""
        keys = self.claims()
        if hasattr(register, "elect"):
            register.elect(self.vpid, keys)
            return self.apply_election(register.election)
        for k in keys:
            register[k] = self.vpid
        return self.apply_election(register)

    # -- step 4 ----------------------------------------------------------------

    def _led_streams(self):
        sides = self.ep.sides()
        return [(k, sides[k]) for k in sorted(self.leading) if sides[k].stream]

    def flush(self) -> None:
        """Send the drain token down every outgoing direction this process leads."""
        with self.timer.stage("drain"):
            for _, side in self._led_streams():
                if side.peer_open:
                    side.send_token()

    def drain(self) -> dict[str, bytes]:
        """Receive everything in flight toward each led side, up to the
        peer's token.  Afterwards the connection table is persisted."""
        with self.timer.stage("drain"):
            for key, side in self._led_streams():
                if side.peer_open:
                    self.buffer[key] = side.drain_until_token()
                else:
                    self.buffer[key] = side.drain_available()
            self.conn_table = self.connection_table()
            storage.write_conn_table(self.conn_table, self.ckpt_dir, self.basename, self.epoch)
        return self.buffer

    def drain_sockets(self) -> dict[str, bytes]:
        self.flush()
        return self.drain()

    def connection_table(self) -> ConnectionInfoTable:
        records = self.ep.records(self.leaders)
        peers = {}
        for rec in records:
            if rec.kind.is_stream and rec.socket_id is not None:
                info = self.ep.peer_info(f"{rec.socket_id}/{rec.role.value}")
                if info is not None:
                    peers[rec.socket_id] = info
        return ConnectionInfoTable(owner=self.vpid, records=records, peers=peers)

    # -- step 5 ----------------------------------------------------------------

    def build_image(self) -> CheckpointImage:
        return CheckpointImage(
            vpid=self.vpid,
            host_id=self.ep.host_id,
            generation=self.epoch,
            snapshot_blob=b"",
            conn_table=self.conn_table or self.connection_table(),
            drained_data=dict(self.buffer),
            vpid_map=[self.vpid],
            codec=self.codec,
            meta=self.ep.meta(),
        )

    def write_image(self) -> Path:
        """Write this epoch's image.  In forked mode the capture happens here
        and serialization, compression and the write run in the background."""
        with self.timer.stage("write"):
            image = self.build_image()
            path = storage.epoch_dir(self.ckpt_dir, self.epoch) / storage.image_filename(
                self.basename, self.vpid, self.epoch)
            if self.forked:
                if self.writer is not None:
                    self.pending_write = self.writer(self, image)
                else:
                    image.snapshot_blob = self.substrate.capture(self.ep.state())
                    self.pending_write = _BACKGROUND.submit(self._write, image)
            else:
                image.snapshot_blob = self.substrate.capture(self.ep.state())
                self._write(image)
            self.image_path = path
        if self.sync != "none" and not self.forked:
            with self.timer.stage("sync"):
                storage.apply_sync_policy(self.sync, self.epoch, self.ckpt_dir)
        return path

    def _write(self, image: CheckpointImage) -> Path:
        return storage.write_image_file(image, self.ckpt_dir, self.basename, self.level)

    def wait_written(self) -> None:
        if self.pending_write is not None:
            result = self.pending_write
            if hasattr(result, "result"):
                result.result()
            elif callable(result):
                result()
            self.pending_write = None

    # -- step 6 ----------------------------------------------------------------

    def send_refills(self) -> None:
        """Hand drained bytes back toward their sender."""
        with self.timer.stage("refill"):
            sides = self.ep.sides()
            for key in sorted(self.buffer):
                side = sides.get(key)
                if side is None:
                    raise PeerGone(f"vpid {self.vpid} no longer holds {key}")
                if side.peer_open:
                    side.send_refill(self.buffer[key])
                else:
                    side.restore_local(self.buffer[key])

    def resend_refills(self) -> None:
        """As the sender: take back the refill frame and re-send its bytes."""
        with self.timer.stage("refill"):
            for _, side in self._led_streams():
                if side.peer_open:
                    side.resend(side.take_refill())

    def refill_sockets(self) -> None:
        self.send_refills()
        self.resend_refills()

    # -- step 7 ----------------------------------------------------------------

    def resume(self) -> int:
        owners = self.receipt.owners if self.receipt else {}
        for key in self.ep.sides():
            self.ep.set_owner(key, owners.get(key))
        n = self.ep.unpark_threads()
        self.buffer = {}
        self.leading = set()
        self.leaders = {}
        self.receipt = None
        self.ep.run_hooks("post_restart" if self.path == "restart" else "post_ckpt")
        return n

    resume_user_threads = resume

    # -- restart entry -----------------------------------------------------------

    def enter_restart(self, image: CheckpointImage) -> None:
        """Resume the protocol right after the 'checkpointed' barrier using the
        drained data and leader marks stored in ``image``."""
        self.begin_epoch(image.generation)
        self.path = "restart"
        self.timer.path = "restart"
        self.buffer = dict(image.drained_data)
        self.leading = {f"{r.socket_id}/{r.role.value}" for r in image.conn_table.records
                        if r.owner_election == self.vpid}
        self.leaders = {f"{r.socket_id}/{r.role.value}": r.owner_election
                        for r in image.conn_table.records if r.owner_election is not None}


_BACKGROUND = concurrent.futures.ThreadPoolExecutor(max_workers=4, thread_name_prefix="ckpt-write")


# --- simulator endpoint -----------------------------------------------------------

class SimSide:
    def __init__(self, cluster, proc, desc):
        self.cluster = cluster
        self.proc = proc
        self.desc = desc
        self.key = desc.key
        self.stream = desc.is_stream and desc.channel is not None

    @property
    def peer_open(self) -> bool:
        return not self.desc.channel.closed[self.desc.role.peer]

    @property
    def _out(self):
        return self.desc.channel.dirs[self.desc.role]

    @property
    def _in(self):
        return self.desc.channel.dirs[self.desc.role.peer]

    def send_token(self) -> None:
        self._out.push_control("token")

    def drain_until_token(self) -> bytes:
        d = self._in
        out = bytearray()
        while d.items:
            tag, _ = d.items[0]
            if tag == "token":
                d.items.popleft()
                return bytes(out)
            if tag != "data":
                break
            out += d.pull(len(d.items[0][1]))
        raise TokenTimeout(f"{self.proc.name}: no drain token on {self.key}")

    def drain_available(self) -> bytes:
        return self._in.pull(self._in.queued)

    def send_refill(self, data: bytes) -> None:
        self._out.push_control("refill", data)

    def take_refill(self) -> bytes:
        data = self._in.pop_control("refill")
        if data is None:
            raise PeerGone(f"{self.proc.name}: no refill frame on {self.key}")
        return data

    def resend(self, data: bytes) -> None:
        self._out.push(data, force=True)

    def restore_local(self, data: bytes) -> None:
        self._in.push(data, force=True)


class SimEndpoint:
    def __init__(self, cluster, proc):
        self.cluster = cluster
        self.proc = proc
        self.vpid = proc.vpid

    @property
    def host_id(self) -> int:
        return self.cluster.hosts[self.proc.host].host_id

    def park_threads(self) -> int:
        for t in self.proc.threads:
            t.parked = True
        self.proc.suspended = True
        self.proc.status = "checkpointing"
        self.cluster.log("suspend", name=self.proc.name, vpid=self.vpid)
        return len(self.proc.threads)

    def unpark_threads(self) -> int:
        for t in self.proc.threads:
            t.parked = False
        self.proc.suspended = False
        self.proc.status = "running"
        self.cluster.log("resume", name=self.proc.name, vpid=self.vpid)
        return len(self.proc.threads)

    def sides(self) -> dict[str, SimSide]:
        out = {}
        for desc in self.proc.fds.values():
            if desc.key not in out:
                out[desc.key] = SimSide(self.cluster, self.proc, desc)
        return out

    def get_owner(self, key: str):
        side = self.sides().get(key)
        return side.desc.owner if side else None

    def set_owner(self, key: str, owner) -> None:
        side = self.sides().get(key)
        if side is not None:
            side.desc.owner = owner

    def records(self, leaders: dict[str, int]) -> list:
        recs = []
        for fd in sorted(self.proc.fds):
            desc = self.proc.fds[fd]
            rec = desc.record(fd)
            rec.owner_election = leaders.get(desc.key)
            recs.append(rec)
        return recs

    def peer_info(self, key: str):
        sides = self.sides()
        desc = sides[key].desc
        peer_key = f"{desc.desc_id}/{desc.role.peer.value}"
        leader = self.cluster.coordinator.leader(peer_key)
        for p in self.cluster.ordered():
            for d in p.fds.values():
                if d.channel is desc.channel and d.role is desc.role.peer:
                    vpid = leader if leader is not None else p.vpid
                    host = self.cluster.procs[vpid].host if vpid in self.cluster.procs else p.host
                    return (vpid, self.cluster.hosts[host].host_id)
        return None

    def state(self) -> dict:
        st = self.proc.state()
        fs = self.cluster.fs
        # segment contents travel with the image so restart can rebuild files
        st["shm"] = {path: bytes(fs.files[path]) for path, _ in self.proc.segments.values()
                     if path in fs.files}
        return st

    def meta(self) -> dict:
        c = self.cluster
        return {
            "name": self.proc.name,
            "real_pid": self.proc.real_pid,
            "host_index": self.proc.host,
            "host_name": c.hosts[self.proc.host].name,
            "clock": c.clock,
            "cluster_size": len(c.live_vpids()),
            "capacity": c.capacity,
            "seed": c.seed,
            "roots": c.roots,
            "next_pid": c.next_pid,
        }

    def run_hooks(self, kind: str) -> None:
        p = self.proc
        for fn in p.hooks.get(kind, []):
            fn()
        for key in p.hook_keys:
            p.heap.setdefault(key, bytearray()).extend(f"{kind};".encode())
        if p.hook_keys or p.hooks.get(kind):
            self.cluster.log("hook", name=p.name, kind=kind)


# --- simulator epoch driver -------------------------------------------------------

@dataclass
class EpochResult:
    epoch: int
    images: dict[int, Path]
    script: Path | None
    timings: list[dict]
    drained: dict[int, dict[str, bytes]] = field(default_factory=dict)


def run_sim_epoch(cluster, *, started: bool, ckpt_dir, mode: str = "plain", sync: str = "none",
                  basename: str = "ckpt", level: int = 6, observer=None,
                  max_delay_ticks: int = 10_000, script: bool = True) -> EpochResult:
    """Drive one full epoch across every live simulated process, reporting
    each barrier to the cluster's coordinator."""
    coord = cluster.coordinator
    epoch = coord.epoch if started else coord.request_checkpoint()
    cluster.log("epoch-start", epoch=epoch)
    procs = cluster.ordered()
    managers = {p.vpid: CheckpointManager(SimEndpoint(cluster, p), ckpt_dir=ckpt_dir,
                                          basename=basename, mode=mode, sync=sync, level=level)
                for p in procs}
    for m in managers.values():
        m.begin_epoch(epoch)

    def notify(phase):
        if observer is not None:
            observer(phase, cluster, managers)

    def report_all(barrier):
        for p in procs:
            coord.barrier_report(p.vpid, barrier)
        assert coord.released is barrier, f"barrier {barrier.label} not released"
        notify(barrier.label)

    notify("checkpoint-request")
    # step 2: processes inside a delay region keep running until they leave it
    waiting = list(procs)
    spins = 0
    while True:
        still = []
        for p in waiting:
            if p.delayed:
                still.append(p)
            else:
                managers[p.vpid].suspend()
                coord.barrier_report(p.vpid, BarrierName.SUSPENDED)
        if not still:
            break
        spins += 1
        if spins > max_delay_ticks:
            raise ThreadUnresponsive(f"{[p.name for p in still]} stayed in a delay region")
        for p in still:
            cluster._run_process(p)
        waiting = still
    assert coord.released is BarrierName.SUSPENDED
    notify("suspended")
    for p in procs:
        SimEndpoint(cluster, p).run_hooks("pre_ckpt")
    # step 3
    for p in procs:
        coord.elect(p.vpid, managers[p.vpid].claims())
    report_all(BarrierName.ELECTION_COMPLETED)
    for m in managers.values():
        m.apply_election(coord.election)
    # step 4
    for m in managers.values():
        m.flush()
    for m in managers.values():
        m.drain()
    report_all(BarrierName.DRAINED)
    # step 5
    images = {}
    for p in procs:
        images[p.vpid] = managers[p.vpid].write_image()
    report_all(BarrierName.CHECKPOINTED)
    # step 6
    drained = {v: dict(m.buffer) for v, m in managers.items()}
    for m in managers.values():
        m.send_refills()
    for m in managers.values():
        m.resend_refills()
    report_all(BarrierName.REFILLED)
    # step 7
    for p in procs:
        managers[p.vpid].resume()
        coord.barrier_report(p.vpid, BarrierName.CHECKPOINT_REQUEST)
    cluster.log("epoch-end", epoch=epoch)
    for m in managers.values():
        m.wait_written()
    script_path = None
    if script:
        manifest = storage.RestartManifest(
            coordinator="sim", epoch=epoch, restart_cmd=SIM_RESTART_CMD)
        for p in procs:
            host = cluster.hosts[p.host].name
            manifest.hosts.setdefault(host, []).append(str(images[p.vpid]))
            manifest.expected[host] = manifest.expected.get(host, 0) + 1
        script_path = storage.write_restart_script(storage.generate_restart_script(manifest),
                                                   ckpt_dir)
    timings = [r for m in managers.values() for r in m.timer.records]
    return EpochResult(epoch, images, script_path, timings, drained)


SIM_RESTART_CMD = "python3 -m dckpt restart --mode sim"
