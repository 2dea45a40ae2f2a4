from __future__ import annotations

import random
import socket
import types

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from dckpt import storage
from dckpt.ckpt_manager import CheckpointManager, SimEndpoint, StageTimer, run_sim_epoch
from dckpt.core import Role, side_key
from dckpt.errors import ThreadUnresponsive, TokenTimeout
from dckpt.realmode import RealSide
from dckpt.simnet import Cluster, RunOutcome

from helpers import IDLE, TOKENISH, fill_in_flight, random_payload, run_checked_epoch, \
    share_topology


def two_procs(capacity=64 * 1024):
    c = Cluster(2, capacity=capacity)
    a, b = c.spawn_process(0, IDLE), c.spawn_process(1, IDLE)
    ch = c.sim_connect(a, (b, c.sim_listen(b)), src_fd=5, accept_fd=6)
    return c, a, b, ch


def test_hello_in_flight_is_drained_and_refilled(tmp_path):
    c, a, b, ch = two_procs()
    c.sim_send(a, 5, b"hello")
    facts = run_checked_epoch(c, tmp_path)
    assert facts["result"].drained[b][side_key(ch.socket_id, Role.ACCEPTOR)] == b"hello"
    assert facts["drain_ok"] and facts["quiet_ok"] and facts["refill_ok"]
    assert c.sim_recv(b, 6, 10) == b"hello"


def test_empty_channel_still_has_entry(tmp_path):
    c, a, b, ch = two_procs()
    res = run_checked_epoch(c, tmp_path)["result"]
    assert res.drained[b][side_key(ch.socket_id, Role.ACCEPTOR)] == b""
    assert res.drained[a][side_key(ch.socket_id, Role.CONNECTOR)] == b""


def test_twenty_sockets_random_payloads(tmp_path):
    rng = random.Random(4)
    c = Cluster(3)
    vs = [c.spawn_process(i % 3, IDLE) for i in range(6)]
    for _ in range(20):
        x, y = rng.sample(vs, 2)
        c.sim_connect(x, (y, c.sim_listen(y)))
    fill_in_flight(c, rng)
    facts = run_checked_epoch(c, tmp_path)
    assert facts["drain_ok"] and facts["refill_ok"], facts["mismatch"]


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.integers(0, 2**32))
def test_drain_and_leader_properties(tmp_path_factory, seed):
    rng = random.Random(seed)
    c = share_topology(rng)
    fill_in_flight(c, rng)
    facts = run_checked_epoch(c, tmp_path_factory.mktemp("e"))
    assert facts["leaders_ok"] and facts["drain_ok"] and facts["quiet_ok"] \
        and facts["refill_ok"], facts["mismatch"]


def test_shared_socket_single_leader(tmp_path):
    c, a, b, ch = two_procs()
    k1, k2 = c.sim_fork(a), c.sim_fork(a)
    facts = run_checked_epoch(c, tmp_path)
    key = side_key(ch.socket_id, Role.CONNECTOR)
    assert len(facts["leaders"][key]) == 1
    assert facts["leaders"][key][0] in {a, k1, k2}
    assert facts["leaders"][side_key(ch.socket_id, Role.ACCEPTOR)] == [b]


def test_owner_restored_after_resume(tmp_path):
    c, a, b, ch = two_procs()
    kid = c.sim_fork(a)
    desc = c.procs[a].fds[5]
    desc.owner = 4242
    run_sim_epoch(c, started=False, ckpt_dir=tmp_path, script=False)
    assert desc.owner == 4242 and kid


def test_threads_parked_and_resumed():
    c = Cluster(1)
    v = c.spawn_process(0, "section main\n1 thread t\n2 thread t\n3 thread t\n4 thread t\n"
                           "5 yield\nsection t\n1 yield\n")
    for _ in range(4):
        c.step()
    m = CheckpointManager(SimEndpoint(c, c.procs[v]), ckpt_dir=".")
    assert m.suspend().parked == 5
    assert all(t.parked for t in c.procs[v].threads)
    assert m.resume() == 5
    assert not any(t.parked for t in c.procs[v].threads)


def test_delay_region_defers_suspension(tmp_path):
    c = Cluster(1)
    v = c.spawn_process(0, "section main\n1 delay_enter\n2 delay_enter\n3 put a 4 1\n"
                           "4 delay_exit\n5 put b 4 2\n6 delay_exit\n7 put c 4 3\n")
    c.step()
    c.step()  # nested twice now
    res = run_sim_epoch(c, started=False, ckpt_dir=tmp_path, script=False)
    # suspension only once both regions were left: a and b exist, c does not
    assert set(c.procs[v].heap) == {"a", "b"}
    sus = [e for e in c.trace if e["event"] == "suspend"][0]["clock"]
    exits = [e for e in c.trace if e["event"] == "delay-exit"]
    assert exits[-1]["depth"] == 0 and all(e["clock"] <= sus for e in exits)
    assert res.epoch == 1


def test_delay_forever_times_out(tmp_path):
    c = Cluster(1)
    c.spawn_process(0, "section main\n1 pipe 3 4\n2 delay_enter\n3 recv 3 1 x\n")
    c.step()
    c.step()
    with pytest.raises(ThreadUnresponsive):
        run_sim_epoch(c, started=False, ckpt_dir=tmp_path, script=False, max_delay_ticks=5)


def test_plain_image_round_trip(tmp_path):
    c = Cluster(1)
    v = c.spawn_process(0, "section main\n1 put big 1048576 5\n")
    c.run()
    res = c.checkpoint(tmp_path, mode="plain")
    path = res.images[v]
    assert path.stat().st_size >= 1 << 20
    img = storage.read_image_file(path)
    assert storage.parse_image(storage.serialize_image(img)) == img
    assert path.name == f"ckpt_{v}_1.ckpt" and path.parent.name == "1"


def test_compressed_zero_heap(tmp_path):
    c = Cluster(1)
    v = c.spawn_process(0, "section main\n1 yield\n")
    c.procs[v].heap["z"] = bytearray(10 << 20)
    res = c.checkpoint(tmp_path, mode="compressed")
    assert res.images[v].stat().st_size < (10 << 20) // 100


def test_forked_mode_writes_in_background(tmp_path):
    c = Cluster(1)
    v = c.spawn_process(0, IDLE)
    c.procs[v].heap["h"] = bytearray(random.Random(1).randbytes(4 << 20))
    res = c.checkpoint(tmp_path, mode="forked-compressed")
    img = storage.read_image_file(res.images[v])
    assert img.codec == "gzip"


def test_stage_records():
    t = StageTimer("checkpoint", 5)
    t.epoch = 2
    with t.stage("drain"):
        pass
    with t.stage("drain"):
        pass
    assert len(t.records) == 1 and t.records[0]["stage"] == "drain"


def test_ten_epochs_loop_back(tmp_path, pingpong):
    c = pingpong()
    c.configure_checkpoints(tmp_path)
    for i in range(10):
        c.run(until=c.clock + 2)
        c.checkpoint()
    c.run()
    ref = pingpong()
    ref.run()
    assert RunOutcome.of(c) == RunOutcome.of(ref)
    reqs = [e for e in c.coordinator.trace
            if e["event"] == "release" and e["barrier"] == "checkpoint-request"]
    assert len(reqs) == 10


def test_hooks_fire_once_per_epoch(tmp_path):
    c = Cluster(1)
    v = c.spawn_process(0, IDLE)
    log = []
    c.procs[v].hooks["pre_ckpt"].append(lambda: log.append("pre"))
    c.procs[v].hooks["post_ckpt"].append(lambda: log.append("post"))
    c.procs[v].hooks["post_restart"].append(lambda: log.append("restart"))
    for _ in range(3):
        c.checkpoint(tmp_path, script=False)
    assert log == ["pre", "post"] * 3


# --- real-socket sides over a socketpair -------------------------------------

def _real_pair():
    from dckpt.core import DescriptorKind, GlobalSocketId
    from dckpt.realmode import RealDesc
    s1, s2 = socket.socketpair()
    sid = GlobalSocketId(1, 2, 3, 4)
    d1 = RealDesc(DescriptorKind.TCP_CONNECTED, sid, Role.CONNECTOR, s1)
    d2 = RealDesc(DescriptorKind.TCP_CONNECTED, sid, Role.ACCEPTOR, s2)
    w = types.SimpleNamespace(name="t", peer_open={d1.key: True, d2.key: True})
    return RealSide(w, d1), RealSide(w, d2), d1, d2


@pytest.mark.parametrize("seed", range(25))
def test_real_drain_with_token_lookalikes(seed):
    rng = random.Random(seed)
    s1, s2, d1, d2 = _real_pair()
    try:
        data = random_payload(rng, rng.randint(0, 64 * 1024))
        data += rng.choice(TOKENISH)
        d1.send_data(data)
        s1.send_token()
        assert s2.drain_until_token() == data
        s2.send_refill(data)
        s1.resend(s1.take_refill())
        d2.poll(1.0)
        while len(d2.inbox) < len(data) and d2.poll(1.0):
            pass
        assert bytes(d2.inbox) == data
    finally:
        d1.close()
        d2.close()


def test_real_drain_peer_gone():
    s1, s2, d1, d2 = _real_pair()
    d1.send_data(b"partial")
    d1.close()
    with pytest.raises(TokenTimeout):
        s2.drain_until_token()
    d2.close()
