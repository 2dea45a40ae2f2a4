"""Single-process snapshot substrate.

The distributed layer hands the substrate a process state and gets back an
opaque blob; at restart the substrate turns the blob back into state.  The
default implementation pickles a plain-data dictionary, which is all the
simulator and the cooperative real-socket runtime keep.
"""

from __future__ import annotations

import pickle
from typing import Protocol

from .errors import CorruptSnapshot


class SnapshotSubstrate(Protocol):
    def capture(self, state: dict) -> bytes: ...

    def restore(self, blob: bytes) -> dict: ...


class PickleSubstrate:
    protocol = pickle.HIGHEST_PROTOCOL

    def capture(self, state: dict) -> bytes:
        return pickle.dumps(state, protocol=self.protocol)

    def restore(self, blob: bytes) -> dict:
        try:
            state = pickle.loads(blob)
        except Exception as exc:  # truncated or garbled pickles raise many types
            raise CorruptSnapshot(f"cannot restore snapshot: {exc!r}") from exc
        if not isinstance(state, dict):
            raise CorruptSnapshot("snapshot does not hold a process state")
        return state


DEFAULT_SUBSTRATE = PickleSubstrate()
