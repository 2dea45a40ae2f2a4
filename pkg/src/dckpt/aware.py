"""Programming interface for applications that know they are checkpointed.

Code running inside a managed process calls the module-level functions;
they act on the *current context*, a :mod:`contextvars` variable the runtime
sets for each process (or a test sets with :func:`use`).  Outside any
managed process the context is detached: queries answer "not under
checkpoint control" and checkpoint requests raise :class:`NotAttached`.
"""

from __future__ import annotations

import contextvars
import time
from contextlib import contextmanager
from typing import Callable

from .errors import CheckpointInProgress, NotAllowedInHook, NotAttached, UnbalancedExit

HOOK_KINDS = ("pre_ckpt", "post_ckpt", "post_restart")


class AwareContext:
    """Base behaviour shared by every context; subclasses supply the
    process-specific parts."""

    def __init__(self):
        self.in_hook = False

    # overridden ------------------------------------------------------------

    @property
    def attached(self) -> bool:
        return False

    def _thread(self):
        raise NotImplementedError

    def _hook_table(self) -> dict[str, list]:
        raise NotImplementedError

    def _request(self) -> int:
        raise NotAttached("not running under checkpoint control")

    def status(self) -> dict:
        return {"attached": False, "state": "running", "epoch": 0, "processes": 0}

    # shared ----------------------------------------------------------------

    def request_checkpoint(self) -> int:
        if not self.attached:
            raise NotAttached("not running under checkpoint control")
        if self.in_hook:
            raise NotAllowedInHook("hooks may not request checkpoints")
        return self._request()

    def delay_enter(self) -> int:
        t = self._thread()
        t.delay += 1
        return t.delay

    def delay_exit(self) -> int:
        t = self._thread()
        if t.delay <= 0:
            raise UnbalancedExit("delay_exit without a matching delay_enter")
        t.delay -= 1
        return t.delay

    def register_hooks(self, pre_ckpt: Callable | None = None, post_ckpt: Callable | None = None,
                       post_restart: Callable | None = None) -> None:
        table = self._hook_table()
        for kind, fn in zip(HOOK_KINDS, (pre_ckpt, post_ckpt, post_restart)):
            if fn is not None:
                table.setdefault(kind, []).append(self._guard(fn))

    def _guard(self, fn):
        def run():
            self.in_hook = True
            try:
                fn()
            finally:
                self.in_hook = False
        return run


class _Counter:
    delay = 0


class Detached(AwareContext):
    """Context of code not started by the launcher."""

    def __init__(self):
        super().__init__()
        self._t = _Counter()
        self._hooks: dict[str, list] = {}

    def _thread(self):
        return self._t

    def _hook_table(self):
        # kept so registration is harmless; nothing ever fires them
        return self._hooks


class SimAware(AwareContext):
    """Context of thread ``tid`` of simulated process ``vpid``.  A request
    runs the whole epoch before returning, so the caller observes a
    completed checkpoint."""

    def __init__(self, cluster, vpid: int, tid: int = 0):
        super().__init__()
        self.cluster = cluster
        self.vpid = vpid
        self.tid = tid

    @property
    def proc(self):
        return self.cluster.procs.get(self.vpid)

    @property
    def attached(self) -> bool:
        p = self.proc
        return p is not None and p.alive

    def _thread(self):
        return self.proc.threads[self.tid]

    def _hook_table(self):
        return self.proc.hooks

    def _request(self) -> int:
        coord = self.cluster.coordinator
        epoch = coord.request_checkpoint()
        self.cluster._run_epoch(started=True)
        return epoch

    def status(self) -> dict:
        coord = self.cluster.coordinator
        return {"attached": self.attached, "state": coord.mode.value, "epoch": coord.epoch,
                "processes": len(coord.live)}


class RealAware(AwareContext):
    """Context of a thread inside a real-socket worker.  A request parks the
    calling thread (it is at a safe point by definition) until the epoch it
    started has finished."""

    def __init__(self, worker, tid: int = 0, poll: float = 0.002):
        super().__init__()
        self.worker = worker
        self.tid = tid
        self.poll = poll

    @property
    def attached(self) -> bool:
        return self.worker.attached

    def _thread(self):
        return self.worker.threads[self.tid]

    def _hook_table(self):
        return self.worker.hooks

    def _request(self) -> int:
        w = self.worker
        epoch = w.request_checkpoint()
        while w.done_epoch < epoch and w.attached:
            w.maybe_park()
            time.sleep(self.poll)
        return epoch

    def status(self) -> dict:
        w = self.worker
        return {"attached": w.attached, "state": w.status, "epoch": w.epoch,
                "processes": w.cluster_size}


_current: contextvars.ContextVar[AwareContext] = contextvars.ContextVar(
    "dckpt_aware", default=Detached())


def current() -> AwareContext:
    return _current.get()


def set_current(ctx: AwareContext):
    return _current.set(ctx)


@contextmanager
def use(ctx: AwareContext):
    token = _current.set(ctx)
    try:
        yield ctx
    finally:
        _current.reset(token)


def is_under_ckpt() -> bool:
    return current().attached


def request_checkpoint_from_app() -> int:
    return current().request_checkpoint()


def delay_enter() -> int:
    return current().delay_enter()


def delay_exit() -> int:
    return current().delay_exit()


@contextmanager
def delay_region():
    """Checkpoints wait while any thread of the process is inside."""
    ctx = current()
    ctx.delay_enter()
    try:
        yield
    finally:
        ctx.delay_exit()


def register_hooks(pre_ckpt=None, post_ckpt=None, post_restart=None) -> None:
    current().register_hooks(pre_ckpt, post_ckpt, post_restart)


def status() -> dict:
    return current().status()


__all__ = ["AwareContext", "Detached", "SimAware", "RealAware", "CheckpointInProgress",
           "current", "set_current", "use", "is_under_ckpt", "request_checkpoint_from_app",
           "delay_enter", "delay_exit", "delay_region", "register_hooks", "status"]
