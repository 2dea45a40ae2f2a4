from __future__ import annotations

import json
import time

import pytest

import realrun as R
from dckpt import storage
from dckpt.coordinator import CoordinatorClient, CoordinatorServer

pytestmark = pytest.mark.slow


def test_ring_checkpoint_kill_restart(tmp_path):
    ref = R.ring_reference(tmp_path / "base", 4, 30, 20000)
    got, facts = R.ring_checkpoint_kill_restart(tmp_path / "run", 4, 30, 20000)
    assert facts["partial_results"] == []        # killed before finishing
    assert R.without_vpid(got) == R.without_vpid(ref)
    assert {n: r["vpid"] for n, r in got.items()} == facts["pids"]
    inv = storage.parse_restart_script(open(facts["script"]).read())
    assert len(inv) == 1 and len(inv[0].images) == 4     # one host: localhost


APP = """section main
1 put a 1000 3
2 ckpt r
3 hook h
4 put b 10 4
"""


def test_application_requested_checkpoint(tmp_path):
    srv = CoordinatorServer().start()
    procs = R.start(tmp_path, srv.address, {"solo": APP})
    try:
        res = R.results(tmp_path, ["solo"], timeout=30)
    finally:
        R.stop(procs, CoordinatorClient(srv.address))
        srv.stop()
    heap = {k: bytes.fromhex(v) for k, v in res["solo"]["heap"].items()}
    assert heap["r"] == b"epoch:1"
    assert sorted(p.name for p in (tmp_path / "1").glob("*.ckpt")) == \
        [f"ckpt_{res['solo']['vpid']}_1.ckpt"]


def test_interval_checkpoints(tmp_path):
    srv = CoordinatorServer(interval=0.3).start()
    procs = R.start(tmp_path, srv.address, {"big": R.BIG_HEAP.format(size=1000)},
                    {"linger": True})
    client = CoordinatorClient(srv.address)
    try:
        R.wait_registered(client, 1)
        deadline = time.monotonic() + 20
        while client.status()["epoch"] < 3 and time.monotonic() < deadline:
            time.sleep(0.05)
        assert client.status()["epoch"] >= 3
    finally:
        R.stop(procs, client)
        srv.stop()


def test_forked_suspends_shorter_than_plain(tmp_path):
    size = 16 * 2 ** 20
    plain = R.median_suspended(tmp_path / "plain", "plain", size, reps=3)
    forked = R.median_suspended(tmp_path / "forked", "forked", size, reps=3)
    assert forked < plain


def test_timing_records_are_reportable(tmp_path):
    from dckpt import report
    R.median_suspended(tmp_path, "compressed", 1000, reps=2)
    recs = report.load_records([tmp_path])
    b = report.breakdown(recs)
    assert b.rows["Total"]["compressed"].reps == 2
    img = next(tmp_path.glob("2/*.ckpt"))
    meta = storage.read_image_file(img).meta
    assert json.loads(json.dumps(meta))["run_dir"] == str(tmp_path)
