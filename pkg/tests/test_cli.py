from __future__ import annotations

import json
import os
import socket
import subprocess
import sys
import time
from pathlib import Path

import pytest

from dckpt import cli, storage
from dckpt.coordinator import CoordinatorClient, CoordinatorServer

SRC = str(Path(cli.__file__).resolve().parent.parent)

SERVER = """section main
1 listen 3
2 accept 4 3
3 recv 4 70000 in0
4 send 4 30000 5
5 compute in0
6 yield
7 yield
"""

CLIENT = """section main
1 connect 3 p0 3
2 send 3 70000 1
3 recv 3 30000 back
4 compute back
"""


def env():
    return {**os.environ, "PYTHONPATH": SRC + os.pathsep + os.environ.get("PYTHONPATH", "")}


def dckpt(*args, cwd, timeout=60, **kw):
    return subprocess.run([sys.executable, "-m", "dckpt", *args], cwd=cwd, env=env(),
                          capture_output=True, text=True, timeout=timeout, **kw)


@pytest.fixture
def programs(tmp_path):
    (tmp_path / "a.wl").write_text(SERVER)
    (tmp_path / "b.wl").write_text(CLIENT)
    return tmp_path


def dead_port() -> int:
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def test_sim_launch_interval_and_restart(programs):
    d = programs
    assert cli.main(["launch", "--mode", "sim", "--hosts", "2", "--dir", str(d / "run"),
                     "--interval", "3", str(d / "a.wl"), str(d / "b.wl")]) == 0
    run = d / "run"
    ref = json.loads((run / "results.json").read_text())
    epochs = sorted(int(p.name) for p in run.iterdir() if p.name.isdigit())
    assert epochs and epochs == list(range(1, len(epochs) + 1))
    script = run / "restart_script.sh"
    inv = storage.parse_restart_script(script.read_text())
    assert len(inv) == 2

    # the whole script onto one host
    assert cli.main(["restart", "--mode", "sim", "--dir", str(d / "r1"), "--hosts", "1",
                     "--placement", "0,0", str(script)]) == 0
    assert json.loads((d / "r1" / "results.json").read_text()) == ref
    # an older epoch, from the image files, mode guessed
    imgs = sorted(str(p) for p in (run / "1").glob("*.ckpt"))
    assert cli.main(["restart", "--dir", str(d / "r2"), *imgs]) == 0
    assert json.loads((d / "r2" / "results.json").read_text()) == ref
    # timing records for both paths landed where report can find them
    recs = cli.report_mod.load_records([run, d / "r1"])
    assert {r["path"] for r in recs} == {"checkpoint", "restart"}


def test_command_drives_paced_sim(programs):
    d = programs
    p = subprocess.Popen([sys.executable, "-m", "dckpt", "launch", "--mode", "sim", "--hosts", "2",
                          "--dir", "run", "--pace", "0.05", "--compression", "none",
                          "a.wl", "b.wl"], cwd=d, env=env(), stdout=subprocess.PIPE, text=True)
    try:
        addr_file = d / "run" / cli.ADDR_FILE
        deadline = time.monotonic() + 20
        while not addr_file.exists() and time.monotonic() < deadline:
            time.sleep(0.02)
        st = dckpt("command", "--status", "--dir", "run", cwd=d)
        assert st.returncode == 0 and "mode: running" in st.stdout
        ck = dckpt("command", "--checkpoint", "--dir", "run", cwd=d)
        assert ck.returncode == 0, ck.stderr
        assert ck.stdout.strip() == "1"
        out, _ = p.communicate(timeout=60)
    finally:
        p.kill()
    assert p.returncode == 0
    assert "checkpoint 1: 2 images" in out
    assert (d / "run" / "1").is_dir()
    assert not (d / "run" / cli.ADDR_FILE).exists()


def test_unreachable_coordinator_exit_code(tmp_path):
    r = dckpt("command", "--status", "--coordinator", f"127.0.0.1:{dead_port()}", cwd=tmp_path)
    assert r.returncode == 3
    assert "CoordinatorUnreachable" in r.stderr


def test_user_errors_exit_2(tmp_path):
    (tmp_path / "bad.wl").write_text("section main\n1 frobnicate 3\n")
    assert dckpt("launch", "--mode", "sim", "bad.wl", cwd=tmp_path).returncode == 2
    assert dckpt("launch", "--mode", "sim", "missing.wl", cwd=tmp_path).returncode == 2
    assert dckpt("restart", "missing.sh", cwd=tmp_path).returncode == 2
    (tmp_path / "junk.ckpt").write_bytes(b"garbage")
    assert dckpt("restart", "--mode", "sim", "junk.ckpt", cwd=tmp_path).returncode == 2
    # argparse usage errors share the code
    assert dckpt("command", cwd=tmp_path).returncode == 2


def test_exit_code_mapping():
    from dckpt import errors
    assert cli.exit_code(errors.CoordinatorUnreachable("x")) == 3
    assert cli.exit_code(errors.MissingImage("x")) == 2
    assert cli.exit_code(errors.MalformedTrace("x")) == 2
    assert cli.exit_code(errors.TokenTimeout("x")) == 4
    assert cli.exit_code(errors.CheckpointError("x")) == 4


def test_mode_and_sync_names():
    assert cli.ckpt_mode("gzip", False) == "compressed"
    assert cli.ckpt_mode("gzip", True) == "forked-compressed"
    assert cli.ckpt_mode("none", True) == "forked"
    assert cli.ckpt_mode("none", False) == "plain"
    assert cli.sync_policy("current") == "sync-current"
    assert cli.sync_policy("none") == "none"


def test_coordinator_subcommand_and_quit(tmp_path):
    p = subprocess.Popen([sys.executable, "-m", "dckpt", "coordinator", "--dir", str(tmp_path)],
                         env=env(), stdout=subprocess.PIPE, text=True)
    try:
        addr = p.stdout.readline().strip()
        assert (tmp_path / cli.ADDR_FILE).read_text().strip() == addr
        r = dckpt("command", "--status", "--dir", str(tmp_path), cwd=tmp_path)
        assert "processes: 0" in r.stdout
        assert dckpt("command", "--quit", "--coordinator", addr, cwd=tmp_path).returncode == 0
        p.wait(timeout=10)
    finally:
        p.kill()
    assert not (tmp_path / cli.ADDR_FILE).exists()


def test_auto_spawn_reuses_live_coordinator(tmp_path, monkeypatch):
    import argparse
    monkeypatch.delenv("DCKPT_COORDINATOR", raising=False)
    args = argparse.Namespace(coordinator=None, dir=str(tmp_path))
    addr = cli.ensure_coordinator(args)
    try:
        assert cli.ensure_coordinator(args) == addr
        with CoordinatorClient(addr) as c:
            assert c.status()["mode"] == "running"
    finally:
        with CoordinatorClient(addr) as c:
            c.quit()
    # a stale address file is replaced by a fresh coordinator
    deadline = time.monotonic() + 10
    while (tmp_path / cli.ADDR_FILE).exists() and time.monotonic() < deadline:
        time.sleep(0.05)
    (tmp_path / cli.ADDR_FILE).write_text(f"127.0.0.1:{dead_port()}\n")
    fresh = cli.ensure_coordinator(args)
    try:
        assert cli._reachable(fresh)
    finally:
        with CoordinatorClient(fresh) as c:
            c.quit()


def test_explicit_coordinator_wins(tmp_path, monkeypatch):
    import argparse
    srv = CoordinatorServer().start()
    try:
        monkeypatch.setenv("DCKPT_COORDINATOR", srv.address)
        args = argparse.Namespace(coordinator=None, dir=str(tmp_path))
        assert cli.ensure_coordinator(args) == srv.address
        assert not (tmp_path / cli.ADDR_FILE).exists()
    finally:
        srv.stop()
