"""Length-prefixed framing shared by the coordinator protocol and the
real-socket data channels.

A frame is ``u32 length | u8 tag | payload`` (little-endian), where
``length`` counts payload bytes only.  Coordinator payloads are UTF-8 JSON.
"""

from __future__ import annotations

import enum
import json
import socket
import struct

HEADER = struct.Struct("<IB")
MAX_FRAME = 1 << 31


class Msg(enum.IntEnum):
    REGISTER = 1
    CKPT_REQUEST = 2
    BARRIER_REPORT = 3
    BARRIER_RELEASE = 4
    ABORT = 5
    ADVERTISE = 6
    LOOKUP = 7
    LOOKUP_REPLY = 8
    STATUS = 9
    ACK = 10
    ERROR = 11
    QUIT = 12


class Frame(enum.IntEnum):
    """Tags used on application data channels in real-socket mode."""

    DATA = 0x20
    TOKEN = 0x21
    REFILL = 0x22
    HELLO = 0x23
    ACCEPTED = 0x24


def pack(tag: int, payload: bytes = b"") -> bytes:
    return HEADER.pack(len(payload), int(tag)) + payload


def pack_json(tag: int, obj) -> bytes:
    return pack(tag, json.dumps(obj, sort_keys=True).encode())


def recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed connection")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def recv_frame(sock: socket.socket) -> tuple[int, bytes]:
    length, tag = HEADER.unpack(recv_exact(sock, HEADER.size))
    if length > MAX_FRAME:
        raise ConnectionError(f"oversized frame ({length} bytes)")
    return tag, recv_exact(sock, length) if length else b""


def recv_json(sock: socket.socket) -> tuple[int, dict]:
    tag, payload = recv_frame(sock)
    return tag, (json.loads(payload) if payload else {})


class FrameDecoder:
    """Incremental decoder for frames arriving on a non-blocking socket."""

    def __init__(self):
        self.buf = bytearray()

    def feed(self, data: bytes) -> None:
        self.buf += data

    def next(self) -> tuple[int, bytes] | None:
        if len(self.buf) < HEADER.size:
            return None
        length, tag = HEADER.unpack_from(self.buf, 0)
        end = HEADER.size + length
        if len(self.buf) < end:
            return None
        payload = bytes(self.buf[HEADER.size:end])
        del self.buf[:end]
        return tag, payload
