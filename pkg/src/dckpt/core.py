"""Shared domain types: socket identity, virtual pids, descriptor records,
connection tables, barrier names and the in-memory checkpoint image."""

from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass, field
from typing import Iterable

MAGIC = b"CKP1"
FORMAT_VERSION = 1


@dataclass(frozen=True, order=True)
class GlobalSocketId:
    """Identity of one connection, stable across process relocation."""

    host_id: int
    creator_pid: int
    timestamp: int
    conn_seq: int

    def to_list(self) -> list[int]:
        return [self.host_id, self.creator_pid, self.timestamp, self.conn_seq]

    @classmethod
    def from_list(cls, values: Iterable[int]) -> "GlobalSocketId":
        h, p, t, s = values
        return cls(int(h), int(p), int(t), int(s))

    def __str__(self) -> str:
        return f"{self.host_id:x}:{self.creator_pid}:{self.timestamp}:{self.conn_seq}"


@dataclass(frozen=True)
class VirtualPid:
    vpid: int
    real_pid: int

    def __post_init__(self):
        if self.vpid <= 0 or self.real_pid <= 0:
            raise ValueError("pids must be positive")


class Conflict:
    """Returned (not raised) when a fresh real pid collides with a live vpid."""

    __slots__ = ("real_pid",)

    def __init__(self, real_pid: int):
        self.real_pid = real_pid

    def __repr__(self) -> str:
        return f"Conflict({self.real_pid})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Conflict) and other.real_pid == self.real_pid

    def __hash__(self) -> int:
        return hash(("Conflict", self.real_pid))


def host_id_for(hostname: str, index: int) -> int:
    """64-bit host id: hostname hash in the high word, coordinator index in the low."""
    return ((zlib.crc32(hostname.encode()) & 0xFFFFFFFF) << 32) | (index & 0xFFFFFFFF)


class SocketIdFactory:
    """Per-process connection counter.  The counter never resets, not even
    across restarts, so ids minted before and after a restart cannot collide."""

    def __init__(self, host_id: int, creator: int, seq: int = 0):
        self.host_id = host_id
        self.creator = creator
        self.seq = seq

    def make(self, tick: int) -> GlobalSocketId:
        sid = make_socket_id(self.host_id, self.creator, tick, self.seq)
        self.seq += 1
        return sid


def make_socket_id(host_id: int, creator, clock: int, seq_counter: int) -> GlobalSocketId:
    creator_pid = creator.vpid if isinstance(creator, VirtualPid) else int(creator)
    return GlobalSocketId(int(host_id), creator_pid, int(clock), int(seq_counter))


def assign_virtual_pid(parent, real_pid: int, live_vpids) -> VirtualPid | Conflict:
    """A new child's vpid is its real pid unless that number is already a
    live vpid, in which case the caller must kill the child and fork again."""
    del parent  # vpid numbering does not depend on the parent
    if real_pid in live_vpids:
        return Conflict(real_pid)
    return VirtualPid(real_pid, real_pid)


class DescriptorKind(str, enum.Enum):
    TCP_LISTENER = "tcp-listener"
    TCP_CONNECTED = "tcp-connected"
    UNIX_DOMAIN = "unix-domain"
    PROMOTED_PIPE = "promoted-pipe"
    REGULAR_FILE = "regular-file"
    SHM_BACKING = "shm-backing"

    @property
    def is_stream(self) -> bool:
        return self in (DescriptorKind.TCP_CONNECTED, DescriptorKind.PROMOTED_PIPE,
                        DescriptorKind.UNIX_DOMAIN)


class Role(str, enum.Enum):
    CONNECTOR = "connector"
    ACCEPTOR = "acceptor"
    NONE = "none"

    @property
    def peer(self) -> "Role":
        if self is Role.CONNECTOR:
            return Role.ACCEPTOR
        if self is Role.ACCEPTOR:
            return Role.CONNECTOR
        return Role.NONE


@dataclass
class DescriptorRecord:
    fd_num: int
    kind: DescriptorKind
    socket_id: GlobalSocketId | None = None
    role: Role = Role.NONE
    owner_election: int | None = None
    path: str | None = None
    offset: int = 0
    capacity: int | None = None
    peer_closed: bool = False
    writable: bool = True
    # channel label (stable name used in delivery logs)
    label: str | None = None
    # connector side still waiting in this listener's accept queue
    listener: GlobalSocketId | None = None

    def __post_init__(self):
        self.kind = DescriptorKind(self.kind)
        self.role = Role(self.role)
        if self.kind in (DescriptorKind.TCP_CONNECTED, DescriptorKind.PROMOTED_PIPE):
            if self.socket_id is None or self.role is Role.NONE:
                raise ValueError(f"{self.kind.value} descriptor needs a socket id and a role")

    @property
    def side(self) -> tuple[GlobalSocketId | None, Role]:
        """Key of the shared open description this descriptor refers to."""
        return (self.socket_id, self.role)

    def to_json(self) -> dict:
        return {
            "fd": self.fd_num,
            "kind": self.kind.value,
            "socket_id": self.socket_id.to_list() if self.socket_id else None,
            "role": self.role.value,
            "owner_election": self.owner_election,
            "path": self.path,
            "offset": self.offset,
            "capacity": self.capacity,
            "peer_closed": self.peer_closed,
            "writable": self.writable,
            "label": self.label,
            "listener": self.listener.to_list() if self.listener else None,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DescriptorRecord":
        sid = d.get("socket_id")
        lsn = d.get("listener")
        return cls(
            fd_num=d["fd"],
            kind=DescriptorKind(d["kind"]),
            socket_id=GlobalSocketId.from_list(sid) if sid else None,
            role=Role(d.get("role", "none")),
            owner_election=d.get("owner_election"),
            path=d.get("path"),
            offset=d.get("offset", 0),
            capacity=d.get("capacity"),
            peer_closed=d.get("peer_closed", False),
            writable=d.get("writable", True),
            label=d.get("label"),
            listener=GlobalSocketId.from_list(lsn) if lsn else None,
        )


@dataclass
class ConnectionInfoTable:
    owner: int
    records: list[DescriptorRecord] = field(default_factory=list)
    peers: dict[GlobalSocketId, tuple[int, int]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "owner": self.owner,
            "records": [r.to_json() for r in self.records],
            "peers": [[sid.to_list(), list(peer)] for sid, peer in sorted(self.peers.items())],
        }

    @classmethod
    def from_json(cls, d: dict) -> "ConnectionInfoTable":
        return cls(
            owner=d["owner"],
            records=[DescriptorRecord.from_json(r) for r in d["records"]],
            peers={GlobalSocketId.from_list(s): (int(p[0]), int(p[1])) for s, p in d["peers"]},
        )


class BarrierName(enum.IntEnum):
    """Protocol barriers in release order.  ``CHECKPOINT_REQUEST`` is the
    step-1 barrier managers park at during normal execution."""

    CHECKPOINT_REQUEST = 1
    SUSPENDED = 2
    ELECTION_COMPLETED = 3
    DRAINED = 4
    CHECKPOINTED = 5
    REFILLED = 6

    @property
    def label(self) -> str:
        return _BARRIER_LABELS[self]

    def next(self) -> "BarrierName | None":
        return BarrierName(self + 1) if self < BarrierName.REFILLED else None


_BARRIER_LABELS = {
    BarrierName.CHECKPOINT_REQUEST: "checkpoint-request",
    BarrierName.SUSPENDED: "suspended",
    BarrierName.ELECTION_COMPLETED: "election-completed",
    BarrierName.DRAINED: "drained",
    BarrierName.CHECKPOINTED: "checkpointed",
    BarrierName.REFILLED: "refilled",
}


def side_key(socket_id: GlobalSocketId, role: Role | str) -> str:
    """String form of a (socket id, role) pair, used as election and
    drain-buffer key and in JSON."""
    return f"{socket_id}/{Role(role).value}"


def parse_side_key(key: str) -> tuple[GlobalSocketId, Role]:
    sid, role = key.rsplit("/", 1)
    h, p, t, s = sid.split(":")
    return GlobalSocketId(int(h, 16), int(p), int(t), int(s)), Role(role)


@dataclass
class CheckpointImage:
    vpid: int
    host_id: int
    generation: int
    snapshot_blob: bytes
    conn_table: ConnectionInfoTable
    drained_data: dict[str, bytes] = field(default_factory=dict)
    vpid_map: list[int] = field(default_factory=list)
    version: int = FORMAT_VERSION
    codec: str = "none"
    # extra header metadata: process name, host name, cluster size, clock...
    meta: dict = field(default_factory=dict)

    def header_json(self) -> dict:
        return {
            "vpid": self.vpid,
            "host_id": self.host_id,
            "generation": self.generation,
            "vpid_map": list(self.vpid_map),
            "codec": self.codec,
            "meta": self.meta,
        }
