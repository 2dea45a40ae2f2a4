"""Command-line front end.

    dckpt launch   [options] PROGRAM...      run workloads under checkpoint control
    dckpt command  --checkpoint | --status | --quit
    dckpt restart  [options] SCRIPT | IMAGE...
    dckpt report   [--csv] TIMINGS...
    dckpt coordinator [--port N]             run a coordinator in the foreground

Exit codes: 0 success, 2 user error, 3 coordinator unreachable, 4 protocol
violation.
"""

from __future__ import annotations

import argparse
import fcntl
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

from . import report as report_mod
from . import storage
from .coordinator import (ENV_COORDINATOR, CoordinatorClient, CoordinatorServer, Mode,
                          resolve_address)
from .core import BarrierName
from .errors import (BadProgramSpec, CheckpointError, CodecFailure, CoordinatorUnreachable,
                     DirectoryNotWritable, ImageFormatError, IncompleteEpoch, MalformedTrace,
                     MissingImage, WorkloadSyntaxError)

log = logging.getLogger("dckpt")

EXIT_OK, EXIT_USER, EXIT_UNREACHABLE, EXIT_PROTOCOL = 0, 2, 3, 4
USER_ERRORS = (BadProgramSpec, WorkloadSyntaxError, IncompleteEpoch, MissingImage,
               ImageFormatError, MalformedTrace, DirectoryNotWritable, CodecFailure)
ADDR_FILE = "coordinator.addr"


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, CoordinatorUnreachable):
        return EXIT_UNREACHABLE
    if isinstance(exc, USER_ERRORS):
        return EXIT_USER
    if isinstance(exc, CheckpointError):
        return EXIT_PROTOCOL
    return EXIT_USER


def ckpt_mode(compression: str, forked: bool) -> str:
    if compression == "gzip":
        return "forked-compressed" if forked else "compressed"
    return "forked" if forked else "plain"


def sync_policy(s: str) -> str:
    return {"current": "sync-current", "previous": "sync-previous"}.get(s, s)


# --- coordinator discovery ---------------------------------------------------------

def _reachable(addr: str) -> bool:
    try:
        with CoordinatorClient(addr, timeout=2) as c:
            c.status()
        return True
    except CheckpointError:
        return False


def find_coordinator(args) -> str | None:
    """--coordinator, then the environment, then ``<dir>/coordinator.addr``."""
    if args.coordinator:
        return args.coordinator
    if os.environ.get(ENV_COORDINATOR):
        return os.environ[ENV_COORDINATOR]
    f = Path(args.dir) / ADDR_FILE
    if f.exists():
        return f.read_text().strip()
    return None


def ensure_coordinator(args, interval: float | None = None) -> str:
    """Return a reachable coordinator address, spawning one (detached) in
    the checkpoint directory when none is configured or the recorded one is
    gone."""
    explicit = args.coordinator or os.environ.get(ENV_COORDINATOR)
    if explicit:
        return explicit
    d = Path(args.dir)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / ".coordinator.lock", "w") as lock:
        fcntl.flock(lock, fcntl.LOCK_EX)
        addr = find_coordinator(args)
        if addr and _reachable(addr):
            return addr
        (d / ADDR_FILE).unlink(missing_ok=True)
        cmd = [sys.executable, "-m", "dckpt", "coordinator", "--dir", str(d), "--port", "0"]
        if interval:
            cmd += ["--interval", str(interval)]
        subprocess.Popen(cmd, start_new_session=True, stdin=subprocess.DEVNULL,
                         stdout=subprocess.DEVNULL, env=_child_env())
        deadline = time.monotonic() + 20
        while time.monotonic() < deadline:
            if (d / ADDR_FILE).exists():
                addr = (d / ADDR_FILE).read_text().strip()
                if addr and _reachable(addr):
                    return addr
            time.sleep(0.02)
    raise CoordinatorUnreachable("auto-spawned coordinator did not come up")


def _child_env() -> dict:
    src = str(Path(__file__).resolve().parent.parent)
    env = dict(os.environ)
    env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
    return env


def _write_addr(d: Path, addr: str) -> None:
    d.mkdir(parents=True, exist_ok=True)
    tmp = d / f".{ADDR_FILE}.{os.getpid()}"
    tmp.write_text(addr + "\n")
    os.replace(tmp, d / ADDR_FILE)


# --- subcommands ---------------------------------------------------------------------

def _read_program(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise BadProgramSpec(f"cannot read program {path}: {exc}") from None


def cmd_coordinator(args) -> int:
    srv = CoordinatorServer(port=args.port, interval=args.interval).start()
    d = Path(args.dir)
    _write_addr(d, srv.address)
    print(srv.address, flush=True)
    try:
        srv._thread.join()
    except KeyboardInterrupt:
        srv.stop()
    finally:
        f = d / ADDR_FILE
        if f.exists() and f.read_text().strip() == srv.address:
            f.unlink()
    return EXIT_OK


def cmd_launch(args) -> int:
    texts = [_read_program(p) for p in args.program]
    from .workload import parse_workload
    for text in texts:
        parse_workload(text)
    if args.mode == "sim":
        return _launch_sim(args, texts)
    if len(texts) != 1:
        raise BadProgramSpec("real mode launches one program per command")
    from . import realmode
    addr = ensure_coordinator(args, args.interval)
    name = args.name or Path(args.program[0]).stem
    opts = {"mode": ckpt_mode(args.compression, args.forked), "sync": sync_policy(args.sync),
            "pace": args.pace}
    realmode.launch(name, texts[0], args.dir, addr, opts)
    return EXIT_OK


class SimSession:
    """A simulated cluster whose coordinator is also served over TCP, so
    ``dckpt command`` can drive it like a real computation."""

    def __init__(self, args, cluster=None):
        from .simnet import Cluster
        self.args = args
        self.dir = Path(args.dir)
        self.srv = CoordinatorServer().start()
        if args.interval:
            self.srv.state.interval = args.interval
            self.srv.state._next_due = args.interval
        self.cluster = cluster or Cluster(args.hosts, args.seed, coordinator=self.srv.state)
        self.cluster.configure_checkpoints(self.dir, mode=ckpt_mode(args.compression, args.forked),
                                           sync=sync_policy(args.sync))
        _write_addr(self.dir, self.srv.address)
        self.seen_epochs = len(self.cluster.epochs)
        self.prefix = None

    def run(self) -> None:
        c, coord = self.cluster, self.srv.state
        idle = 0
        while not c.all_done():
            with self.srv.cond:
                progressed = c.step()
                if coord.mode is Mode.CHECKPOINTING and coord.released is BarrierName.CHECKPOINT_REQUEST:
                    c._run_epoch(started=True)
                    progressed = True
                self.srv.cond.notify_all()
            self._record_epochs()
            idle = 0 if progressed else idle + 1
            if idle > 200:
                from .simnet import SimulationStuck
                raise SimulationStuck(f"no progress at clock {c.clock}")
            if self.args.pace:
                time.sleep(self.args.pace)
            if self.args.stop_at and c.clock >= self.args.stop_at:
                return
        self.write_results()

    def _record_epochs(self) -> None:
        from .simnet import RunOutcome
        for res in self.cluster.epochs[self.seen_epochs:]:
            so_far = RunOutcome.of(self.cluster, self.prefix)
            edir = storage.epoch_dir(self.dir, res.epoch)
            (edir / "delivered.json").write_text(json.dumps(
                {k: v.hex() for k, v in so_far.delivered.items()}, sort_keys=True))
            mode = ckpt_mode(self.args.compression, self.args.forked)
            report_mod.write_records([{**r, "mode": mode, "run": str(self.dir)}
                                      for r in res.timings],
                                     self.dir / "timings" / "sim.jsonl")
            print(f"checkpoint {res.epoch}: {len(res.images)} images, script {res.script}",
                  flush=True)
        self.seen_epochs = len(self.cluster.epochs)

    def write_results(self) -> Path:
        from .simnet import RunOutcome
        out = RunOutcome.of(self.cluster, self.prefix)
        path = self.dir / "results.json"
        path.write_text(json.dumps(outcome_to_json(out), sort_keys=True))
        return path

    def close(self) -> None:
        self.srv.stop()
        f = self.dir / ADDR_FILE
        if f.exists() and f.read_text().strip() == self.srv.address:
            f.unlink()


def outcome_to_json(out) -> dict:
    return {"delivered": {k: v.hex() for k, v in out.delivered.items()},
            "heaps": {p: {k: v.hex() for k, v in h.items()} for p, h in out.heaps.items()},
            "files": {k: v.hex() for k, v in out.files.items()}}


def _launch_sim(args, texts) -> int:
    s = SimSession(args)
    try:
        for i, text in enumerate(texts):
            s.cluster.spawn_process(i % args.hosts, text)
        s.run()
    finally:
        s.close()
    return EXIT_OK


def cmd_command(args) -> int:
    addr = find_coordinator(args) or resolve_address(None)
    with CoordinatorClient(addr, timeout=5) as c:
        if args.checkpoint:
            epoch = c.request_checkpoint(wait=True, timeout=args.timeout)
            print(epoch)
        elif args.quit:
            c.quit()
            print("quit")
        else:
            st = c.status()
            for k in ("mode", "epoch", "processes", "released"):
                print(f"{k}: {st.get(k)}")
    return EXIT_OK


def _restart_inputs(paths: list[str]):
    """Either one restart script or a list of images."""
    if len(paths) == 1 and not paths[0].endswith(".ckpt"):
        p = Path(paths[0])
        if not p.exists():
            raise MissingImage(f"{p}: no such file")
        text = p.read_text()
        if text.startswith("#!"):
            return p, storage.parse_restart_script(text)
    return None, [storage.RestartInvocation(coordinator="", images=list(paths))]


def _guess_mode(invocations) -> str:
    for inv in invocations:
        if inv.mode:
            return inv.mode
    img = storage.read_image_file(invocations[0].images[0])
    return "real" if "run_dir" in img.meta else "sim"


def cmd_restart(args) -> int:
    script, invocations = _restart_inputs(args.inputs)
    if not invocations or not any(inv.images for inv in invocations):
        raise IncompleteEpoch("nothing to restart")
    mode = args.mode or _guess_mode(invocations)
    if args.dir is None:
        args.dir = str(script.parent if script else Path(invocations[0].images[0]).parent.parent)
    if mode == "sim":
        return _restart_sim(args, invocations)
    from . import realmode
    if script is None and len(invocations) == 1 and not args.spawn:
        addr = args.coordinator or ensure_coordinator(args)
        realmode.restart_host(invocations[0].images, addr, seed=args.seed)
        return EXIT_OK
    addr = args.coordinator or invocations[0].coordinator
    if not addr or not _reachable(addr):
        args.coordinator = None
        addr = ensure_coordinator(args)
    procs = [subprocess.Popen([sys.executable, "-m", "dckpt", "restart", "--mode", "real",
                               "--coordinator", addr, *inv.images], env=_child_env())
             for inv in invocations]
    codes = [p.wait() for p in procs]
    return max(codes) if codes else EXIT_OK


def _restart_sim(args, invocations) -> int:
    from .restart import restart_sim
    from .simnet import RunOutcome
    args.hosts = args.hosts or len(invocations)
    placement = ([int(x) for x in args.placement.split(",")] if args.placement
                 else list(range(len(invocations))))
    s = None
    try:
        s = SimSession(args)
        with s.srv.cond:
            rr = restart_sim([inv.images for inv in invocations], placement, n_hosts=args.hosts,
                             seed=args.seed, coordinator=s.srv.state,
                             ckpt_options=s_opts(args))
        s.cluster = rr.cluster
        s.seen_epochs = len(rr.cluster.epochs)
        img = storage.read_image_file(invocations[0].images[0])
        prev = Path(invocations[0].images[0]).parent / "delivered.json"
        if prev.exists():
            s.prefix = RunOutcome(delivered={k: bytes.fromhex(v) for k, v in
                                             json.loads(prev.read_text()).items()})
        report_mod.write_records([{**r, "mode": ckpt_mode(args.compression, args.forked),
                                   "run": str(s.dir)} for r in rr.timings],
                                 s.dir / "timings" / "sim.jsonl")
        print(f"restarted generation {img.generation}: {len(rr.cluster.procs)} processes",
              flush=True)
        s.run()
    finally:
        if s is not None:
            s.close()
    return EXIT_OK


def s_opts(args) -> dict:
    return {"ckpt_dir": args.dir, "mode": ckpt_mode(args.compression, args.forked),
            "sync": sync_policy(args.sync)}


def cmd_report(args) -> int:
    recs = report_mod.load_records(args.paths)
    if not recs:
        raise MalformedTrace("no timing records found")
    text = report_mod.render_csv(recs) if args.csv else report_mod.render_text(recs)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- parser --------------------------------------------------------------------------------

def _common(p, mode: bool = True) -> None:
    p.add_argument("--coordinator", help="coordinator host:port")
    p.add_argument("--dir", default=None, help="checkpoint directory")
    if mode:
        p.add_argument("--mode", choices=("sim", "real"), default=None)
        p.add_argument("--seed", type=int, default=0, help="simulator seed")
        p.add_argument("--compression", choices=("none", "gzip"), default="gzip")
        p.add_argument("--forked", action="store_true", help="write images from a forked child")
        p.add_argument("--sync", choices=("none", "current", "previous"), default="none")
        p.add_argument("--interval", type=float, default=None,
                       help="checkpoint period (ticks in sim mode, seconds in real mode)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dckpt", description="distributed checkpoint/restart")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("launch", help="run workloads under checkpoint control")
    _common(p)
    p.add_argument("--name", help="process name (real mode; default: program file stem)")
    p.add_argument("--hosts", type=int, default=1, help="simulated hosts")
    p.add_argument("--pace", type=float, default=0.0,
                   help="seconds to sleep per tick (sim) or per step (real)")
    p.add_argument("--stop-at", type=int, default=None, help="sim: abandon the run at this tick")
    p.add_argument("program", nargs="+", help="workload file(s)")
    p.set_defaults(fn=cmd_launch)

    p = sub.add_parser("command", help="talk to a running coordinator")
    _common(p, mode=False)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint", action="store_true")
    g.add_argument("--status", action="store_true")
    g.add_argument("--quit", action="store_true")
    p.add_argument("--timeout", type=float, default=60.0)
    p.set_defaults(fn=cmd_command)

    p = sub.add_parser("restart", help="restart from a script or images")
    _common(p)
    p.add_argument("--hosts", type=int, default=None, help="sim: hosts in the new cluster")
    p.add_argument("--placement", help="sim: comma-separated host index per script line")
    p.add_argument("--pace", type=float, default=0.0)
    p.add_argument("--stop-at", type=int, default=None)
    p.add_argument("--spawn", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("inputs", nargs="+", help="restart script or image files")
    p.set_defaults(fn=cmd_restart)

    p = sub.add_parser("report", help="stage breakdown and scaling report")
    p.add_argument("--csv", action="store_true")
    p.add_argument("--out")
    p.add_argument("paths", nargs="+", help="timing .jsonl files or run directories")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("coordinator", help="run a coordinator in the foreground")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--dir", default=".")
    p.add_argument("--interval", type=float, default=None)
    p.set_defaults(fn=cmd_coordinator)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    if args.cmd in ("launch", "command") and args.dir is None:
        args.dir = "."
    if args.cmd == "launch" and args.mode is None:
        args.mode = "real"
    try:
        return args.fn(args)
    except CheckpointError as exc:
        print(f"dckpt: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)
    except OSError as exc:
        print(f"dckpt: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
