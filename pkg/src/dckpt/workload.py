"""Scripted workloads.

A workload is a set of named sections; a process starts running section
``main`` and forked children, remote spawns and extra threads start at the
section named in the step that created them.  Lines look like::

    # comment
    section main
    1 listen 3
    2 accept 4 3
    3 recv 4 128 inbox

Step numbers restart at 1 in every section and must be consecutive.

Operations (``FD`` are small integers, ``KEY`` names a heap entry, ``SEED``
picks the deterministic payload generator):

==============================  =================================================
``listen FD``                   create a TCP listener at FD
``accept FD LFD``               wait for one connection on listener LFD, install at FD
``connect FD PEER LFD``         connect to listener LFD of process PEER (by name)
``send FD N SEED``              send N generated bytes (blocks while the queue is full)
``recv FD N KEY``               receive exactly N bytes, appended to heap KEY
``pipe RFD WFD``                create a pipe; promoted to a one-way socket
``close FD``                    close a descriptor
``open FD PATH``                open a regular file for reading
``read FD N KEY``               read N bytes from the file offset into heap KEY
``mmap SEG PATH RW``            map a shared segment backed by PATH (RW is 0 or 1)
``shmwrite SEG OFF N SEED``     write N generated bytes at OFF into segment SEG
``shmread SEG OFF N KEY``       copy N bytes at OFF of segment SEG into heap KEY
``put KEY N SEED``              store N generated bytes at heap KEY
``compute KEY``                 replace heap KEY by its SHA-256 digest
``tagpid KEY``                  store the process's virtual pid at heap KEY
``fork SECTION``                fork; the child runs SECTION and shares all descriptors
``spawn HOST SECTION``          start a fresh process on HOST (remote exec)
``thread SECTION``              start another thread in this process
``delay_enter`` / ``delay_exit``  bracket a region during which checkpoints wait
``ckpt KEY``                    request a checkpoint from inside the application
``hook KEY``                    record checkpoint/restart hook events in heap KEY
``yield``                       do nothing for one scheduler tick
==============================  =================================================
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .errors import WorkloadSyntaxError

ARITY = {
    "listen": 1, "accept": 2, "connect": 3, "send": 3, "recv": 3, "pipe": 2,
    "close": 1, "open": 2, "read": 3, "mmap": 3, "shmwrite": 4, "shmread": 4,
    "put": 3, "compute": 1, "tagpid": 1, "fork": 1, "spawn": 2, "thread": 1,
    "delay_enter": 0, "delay_exit": 0, "ckpt": 1, "hook": 1, "yield": 0,
}

_INT_ARGS = {
    "listen": (0,), "accept": (0, 1), "connect": (0, 2), "send": (0, 1, 2),
    "recv": (0, 1), "pipe": (0, 1), "close": (0,), "open": (0,), "read": (0, 1),
    "mmap": (2,), "shmwrite": (1, 2, 3), "shmread": (1, 2), "put": (1, 2),
    "spawn": (0,),
}


@dataclass(frozen=True)
class Step:
    num: int
    op: str
    args: tuple


class Program:
    def __init__(self, sections: dict[str, list[Step]], text: str):
        self.sections = sections
        self.text = text
        if "main" not in sections:
            raise WorkloadSyntaxError("workload has no 'main' section")
        for sec in sections.values():
            for step in sec:
                if step.op in ("fork", "thread") and step.args[0] not in sections:
                    raise WorkloadSyntaxError(f"unknown section {step.args[0]!r}")
                if step.op == "spawn" and step.args[1] not in sections:
                    raise WorkloadSyntaxError(f"unknown section {step.args[1]!r}")

    def __getitem__(self, section: str) -> list[Step]:
        return self.sections[section]

    def __reduce__(self):
        return (parse_workload, (self.text,))


def parse_workload(text: str) -> Program:
    sections: dict[str, list[Step]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        if words[0] == "section":
            if len(words) != 2:
                raise WorkloadSyntaxError(f"line {lineno}: 'section NAME' expected")
            current = sections.setdefault(words[1], [])
            continue
        if current is None:
            raise WorkloadSyntaxError(f"line {lineno}: step outside a section")
        try:
            num = int(words[0])
        except ValueError:
            raise WorkloadSyntaxError(f"line {lineno}: step number expected") from None
        if num != len(current) + 1:
            raise WorkloadSyntaxError(f"line {lineno}: step {num} out of sequence")
        if len(words) < 2 or words[1] not in ARITY:
            raise WorkloadSyntaxError(f"line {lineno}: unknown operation")
        op, args = words[1], words[2:]
        if len(args) != ARITY[op]:
            raise WorkloadSyntaxError(f"line {lineno}: {op} takes {ARITY[op]} arguments")
        try:
            conv = tuple(int(a) if i in _INT_ARGS.get(op, ()) else a for i, a in enumerate(args))
        except ValueError:
            raise WorkloadSyntaxError(f"line {lineno}: integer argument expected") from None
        current.append(Step(num, op, conv))
    return Program(sections, text)


def payload(seed: int, n: int) -> bytes:
    """Deterministic pseudo-random payload used by send/put/shmwrite."""
    return random.Random(seed).randbytes(n) if n else b""
