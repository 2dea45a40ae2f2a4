from __future__ import annotations

import sys

import pytest

from dckpt.simnet import Cluster

# two processes: p0 serves, p1 connects, traffic both ways with a fork in p1
PINGPONG = """
section main
1 listen 3
2 accept 4 3
3 recv 4 70000 in0
4 send 4 30000 11
5 recv 4 500 in1
6 compute in1
"""

CLIENT = """
section main
1 connect 3 p0 3
2 send 3 70000 7
3 recv 3 30000 back
4 pipe 5 6
5 fork kid
6 send 6 4000 21
7 send 3 500 9
section kid
1 recv 5 4000 frompipe
2 tagpid me
"""


@pytest.fixture
def pingpong():
    """A 2-host cluster running a server and a forking client."""
    def build(seed: int = 1) -> Cluster:
        c = Cluster(2, seed)
        c.spawn_process(0, PINGPONG)
        c.spawn_process(1, CLIENT)
        return c
    return build


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance lines even when output is captured."""
    mod = sys.modules.get("test_acceptance")
    if not mod or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(mod.RESULTS):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
