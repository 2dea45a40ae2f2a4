"""Checkpoint image format, compression, sync policies and restart scripts.

Image layout (all integers little-endian)::

    b"CKP1" | u32 version | section*

    section := u64 length | payload | u32 crc32(payload)

Sections appear in the order header, conn_table, drained_data,
snapshot_blob.  The header and connection table are UTF-8 JSON and are never
compressed, so the codec can be read before anything is inflated.  With the
``gzip`` codec the last two sections are gzip members.
"""

from __future__ import annotations

import errno
import gzip
import json
import os
import shlex
import struct
import tempfile
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from .core import FORMAT_VERSION, MAGIC, CheckpointImage, ConnectionInfoTable
from .errors import (BadMagic, ChecksumMismatch, CodecFailure, IncompleteEpoch,
                     StorageFull, SyncFailure, TruncatedSection, VersionMismatch)

SECTIONS = ("header", "conn_table", "drained_data", "snapshot_blob")
CODECS = ("none", "gzip")
SCRIPT_NAME = "restart_script.sh"
DEFAULT_RESTART_CMD = "python3 -m dckpt restart"


# --- compression --------------------------------------------------------------

def _norm_codec(codec: str) -> str:
    if codec in ("deflate", "gzip"):
        return "gzip"
    if codec in ("none", None, ""):
        return "none"
    raise CodecFailure(f"unknown codec {codec!r}")


def compress_stream(data: bytes, codec: str = "gzip", level: int = 6) -> bytes:
    codec = _norm_codec(codec)
    if codec == "none":
        return bytes(data)
    try:
        return gzip.compress(data, compresslevel=level, mtime=0)
    except (zlib.error, OSError, ValueError) as exc:
        raise CodecFailure(str(exc)) from exc


def decompress_stream(data: bytes, codec: str = "gzip") -> bytes:
    codec = _norm_codec(codec)
    if codec == "none":
        return bytes(data)
    try:
        return gzip.decompress(data)
    except (zlib.error, OSError, EOFError) as exc:
        raise CodecFailure(str(exc)) from exc


# --- serialization ------------------------------------------------------------

def _encode_drained(drained: dict[str, bytes]) -> bytes:
    out = [struct.pack("<I", len(drained))]
    for key in sorted(drained):
        kb = key.encode()
        data = drained[key]
        out.append(struct.pack("<I", len(kb)))
        out.append(kb)
        out.append(struct.pack("<Q", len(data)))
        out.append(bytes(data))
    return b"".join(out)


def _decode_drained(buf: bytes) -> dict[str, bytes]:
    try:
        (count,) = struct.unpack_from("<I", buf, 0)
        pos = 4
        result = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            key = buf[pos:pos + klen].decode()
            pos += klen
            (dlen,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            if pos + dlen > len(buf):
                raise TruncatedSection("drained entry runs past section end", "drained_data")
            result[key] = bytes(buf[pos:pos + dlen])
            pos += dlen
    except struct.error as exc:
        raise TruncatedSection(str(exc), "drained_data") from exc
    return result


def serialize_image(image: CheckpointImage, level: int = 6) -> bytes:
    codec = _norm_codec(image.codec)
    header = json.dumps(image.header_json() | {"version": image.version},
                        sort_keys=True).encode()
    conn = json.dumps(image.conn_table.to_json(), sort_keys=True).encode()
    drained = compress_stream(_encode_drained(image.drained_data), codec, level)
    blob = compress_stream(image.snapshot_blob, codec, level)
    parts = [MAGIC, struct.pack("<I", image.version)]
    for payload in (header, conn, drained, blob):
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
        parts.append(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
    return b"".join(parts)


def parse_image(data: bytes) -> CheckpointImage:
    view = memoryview(data)
    if len(view) < 4 or bytes(view[:4]) != MAGIC:
        raise BadMagic("not a checkpoint image", "magic")
    if len(view) < 8:
        raise TruncatedSection("missing version", "version")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"image format version {version}, engine reads {FORMAT_VERSION}",
                              "version")
    pos = 8
    payloads = {}
    for name in SECTIONS:
        if pos + 8 > len(view):
            raise TruncatedSection(f"section {name} length missing", name)
        (length,) = struct.unpack_from("<Q", view, pos)
        pos += 8
        if pos + length + 4 > len(view):
            raise TruncatedSection(f"section {name} truncated", name)
        payload = view[pos:pos + length]
        pos += length
        (crc,) = struct.unpack_from("<I", view, pos)
        pos += 4
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise ChecksumMismatch(f"section {name} checksum mismatch", name)
        payloads[name] = payload
    try:
        header = json.loads(bytes(payloads["header"]))
        conn = ConnectionInfoTable.from_json(json.loads(bytes(payloads["conn_table"])))
    except (ValueError, KeyError, TypeError) as exc:
        raise ChecksumMismatch(f"undecodable metadata: {exc}", "header") from exc
    codec = header.get("codec", "none")
    drained = _decode_drained(decompress_stream(bytes(payloads["drained_data"]), codec))
    blob = decompress_stream(bytes(payloads["snapshot_blob"]), codec)
    return CheckpointImage(
        vpid=header["vpid"],
        host_id=header["host_id"],
        generation=header["generation"],
        snapshot_blob=blob,
        conn_table=conn,
        drained_data=drained,
        vpid_map=list(header.get("vpid_map", [])),
        version=version,
        codec=codec,
        meta=header.get("meta", {}),
    )


# --- files --------------------------------------------------------------------

def image_filename(basename: str, vpid: int, epoch: int) -> str:
    return f"{basename}_{vpid}_{epoch}.ckpt"


def epoch_dir(ckpt_dir, epoch: int) -> Path:
    return Path(ckpt_dir) / str(epoch)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-" + path.name)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        if exc.errno in (errno.ENOSPC, errno.EDQUOT):
            raise StorageFull(str(exc)) from exc
        raise


def write_image_file(image: CheckpointImage, ckpt_dir, basename: str = "ckpt",
                     level: int = 6) -> Path:
    path = epoch_dir(ckpt_dir, image.generation) / image_filename(basename, image.vpid,
                                                                  image.generation)
    _atomic_write(path, serialize_image(image, level))
    return path


def read_image_file(path) -> CheckpointImage:
    with open(path, "rb") as fh:
        return parse_image(fh.read())


def write_conn_table(table: ConnectionInfoTable, ckpt_dir, basename: str, epoch: int) -> Path:
    path = epoch_dir(ckpt_dir, epoch) / f"{basename}_{table.owner}_{epoch}.conn.json"
    _atomic_write(path, json.dumps(table.to_json(), sort_keys=True).encode())
    return path


# --- sync policies ------------------------------------------------------------

SYNC_POLICIES = ("none", "sync-current", "sync-previous")


def _fsync_tree(path: Path) -> int:
    count = 0
    for f in sorted(path.glob("*.ckpt")):
        fd = os.open(f, os.O_RDONLY)
        try:
            os.fsync(fd)
        finally:
            os.close(fd)
        count += 1
    dfd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(dfd)
    finally:
        os.close(dfd)
    return count


def apply_sync_policy(policy: str, epoch: int, ckpt_dir) -> float:
    """Apply a durability policy after writing ``epoch``; returns the time
    spent blocking.  ``sync-previous`` flushes epoch-1, which keeps every
    checkpoint except the newest durable without stalling on the one just
    written."""
    policy = {"current": "sync-current", "previous": "sync-previous"}.get(policy, policy)
    if policy not in SYNC_POLICIES:
        raise SyncFailure(f"unknown sync policy {policy!r}")
    if policy == "none":
        return 0.0
    target = epoch if policy == "sync-current" else epoch - 1
    d = epoch_dir(ckpt_dir, target)
    if target < 1 or not d.is_dir():
        return 0.0
    start = time.perf_counter()
    try:
        _fsync_tree(d)
    except OSError as exc:
        raise SyncFailure(str(exc)) from exc
    return time.perf_counter() - start


# --- restart script -----------------------------------------------------------

@dataclass
class RestartManifest:
    """What one finished epoch needs for a restart: image paths per host and
    the coordinator address.  ``expected`` lists how many images each host
    must contribute."""

    coordinator: str
    epoch: int
    hosts: dict[str, list[str]] = field(default_factory=dict)
    expected: dict[str, int] = field(default_factory=dict)
    restart_cmd: str = DEFAULT_RESTART_CMD


def generate_restart_script(manifest: RestartManifest) -> str:
    hosts = set(manifest.hosts) | set(manifest.expected)
    if not hosts:
        raise IncompleteEpoch("manifest lists no hosts")
    lines = ["#!/bin/sh",
             f"# restart generation {manifest.epoch}",
             "set -e"]
    for host in sorted(hosts):
        images = list(manifest.hosts.get(host, []))
        want = manifest.expected.get(host, len(images))
        present = [p for p in images if p and os.path.exists(p)]
        if want == 0 or len(present) < want or len(present) < len(images):
            raise IncompleteEpoch(f"host {host}: {len(present)} of {max(want, len(images))} "
                                  f"images present for epoch {manifest.epoch}")
        args = " ".join(shlex.quote(str(p)) for p in images)
        lines.append(f"{manifest.restart_cmd} --coordinator {manifest.coordinator} {args} &")
    lines.append("wait")
    return "\n".join(lines) + "\n"


def write_restart_script(text: str, ckpt_dir) -> Path:
    path = Path(ckpt_dir) / SCRIPT_NAME
    _atomic_write(path, text.encode())
    os.chmod(path, 0o755)
    return path


@dataclass
class RestartInvocation:
    coordinator: str
    images: list[str]
    mode: str | None = None


def parse_restart_script(text: str, restart_cmd: str = DEFAULT_RESTART_CMD) -> list[RestartInvocation]:
    """Recover the per-host invocations from a generated script.  Lines that
    do not start with ``restart_cmd`` are ignored; ``--mode`` may appear
    before ``--coordinator``."""
    prefix = shlex.split(restart_cmd)
    result = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        words = shlex.split(line.rstrip("&").strip())
        if words[:len(prefix)] != prefix:
            continue
        rest = words[len(prefix):]
        mode = coordinator = None
        while rest and rest[0].startswith("--"):
            if len(rest) < 2:
                raise IncompleteEpoch(f"malformed restart line: {line!r}")
            flag, value, rest = rest[0], rest[1], rest[2:]
            if flag == "--mode":
                mode = value
            elif flag == "--coordinator":
                coordinator = value
            else:
                raise IncompleteEpoch(f"unknown option {flag} in restart line")
        if coordinator is None:
            raise IncompleteEpoch(f"malformed restart line: {line!r}")
        result.append(RestartInvocation(coordinator, rest, mode))
    return result
