from __future__ import annotations

import random

import pytest

from dckpt.scenarios import check_restart, generate
from dckpt.workload import parse_workload


def test_generation_is_deterministic():
    a, b = generate(11), generate(11)
    assert a.roots == b.roots and a.features == b.features
    assert generate(12).roots != a.roots


def test_bounds_and_syntax():
    for seed in range(40):
        sc = generate(seed)
        assert 1 <= sc.n_hosts <= 8
        assert 2 <= sc.n_procs <= 32
        for host, text in sc.roots:
            assert 0 <= host < sc.n_hosts
            parse_workload(text)


def test_reference_runs_finish_with_matching_process_count():
    for seed in range(20):
        sc = generate(seed)
        c = sc.build()
        c.run(until=200_000)
        assert c.all_done(), seed
        assert len(c.procs) == sc.n_procs


def test_features_are_all_exercised():
    seen = set()
    for seed in range(60):
        seen |= generate(seed).features
    assert seen >= {"tcp", "pipe", "shm", "fork", "spawn", "handoff", "close", "delay"}


@pytest.mark.parametrize("seed", [0, 3, 7, 21])
def test_check_restart_matches_reference(tmp_path, seed):
    ok, info = check_restart(generate(seed), tmp_path, rng=random.Random(seed))
    assert ok, info
    assert info["n_hosts"] >= generate(seed).n_hosts


def test_check_restart_at_start_and_compressed(tmp_path):
    sc = generate(5)
    ok, info = check_restart(sc, tmp_path / "a", at=1)
    assert ok, info
    ok, info = check_restart(sc, tmp_path / "b", mode="compressed")
    assert ok, info


def test_oracle_detects_tampering(tmp_path):
    """Flipping one refilled in-flight byte after restart must change the
    outcome; otherwise the equality check above would prove nothing."""
    from dckpt import storage
    from dckpt.restart import restart_sim_from_script
    from dckpt.simnet import RunOutcome

    for seed in range(60):
        sc = generate(seed)
        ref, total = sc.reference()
        c = sc.build()
        c.run(until=total // 2)
        if any(c.in_flight().values()):
            break
    else:
        pytest.skip("no scenario with bytes in flight at mid-run")
    res = c.checkpoint(tmp_path)
    pre = RunOutcome.of(c)
    lines = storage.parse_restart_script(res.script.read_text())
    rr = restart_sim_from_script(res.script, [0] * len(lines), n_hosts=sc.n_hosts,
                                 seed=sc.seed)
    buf = next(buf for ch in rr.cluster.channels for d in ch.dirs.values()
               for tag, buf in d.items if tag == "data" and buf)
    buf[0] ^= 0xFF
    rr.cluster.run()
    assert sc.outcome(rr.cluster, pre) != ref
