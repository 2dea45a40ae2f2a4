from __future__ import annotations

import socket
import struct

from hypothesis import given, strategies as st

from dckpt import wire
from dckpt.wire import FrameDecoder, Msg


def test_frame_layout_little_endian():
    f = wire.pack(Msg.STATUS, b"xyz")
    assert f == struct.pack("<I", 3) + bytes([9]) + b"xyz"


@given(st.lists(st.tuples(st.integers(0, 255), st.binary(max_size=300)), max_size=20),
       st.integers(1, 17))
def test_decoder_handles_any_split(frames, chunk):
    stream = b"".join(wire.pack(t, p) for t, p in frames)
    dec = FrameDecoder()
    got = []
    for i in range(0, len(stream), chunk):
        dec.feed(stream[i:i + chunk])
        while (fr := dec.next()) is not None:
            got.append(fr)
    assert got == frames


def test_json_over_socketpair():
    a, b = socket.socketpair()
    try:
        a.sendall(wire.pack_json(Msg.REGISTER, {"vpid": 5, "host": "h"}))
        a.sendall(wire.pack(Msg.ACK))
        assert wire.recv_json(b) == (Msg.REGISTER, {"host": "h", "vpid": 5})
        assert wire.recv_json(b) == (Msg.ACK, {})
    finally:
        a.close()
        b.close()
