"""Exception hierarchy.

Every failure raised by the package derives from :class:`CheckpointError` so
callers can catch one type.  Exit codes used by the CLI are attached to the
classes that map onto them.
"""

from __future__ import annotations


class CheckpointError(Exception):
    exit_code = 2


# --- core / simulator -------------------------------------------------------

class UnknownHost(CheckpointError):
    pass


class DeadParent(CheckpointError):
    pass


class NotListening(CheckpointError):
    pass


class BadDescriptor(CheckpointError):
    pass


class WouldBlock(CheckpointError):
    """Send on a full queue or receive on an empty one; the scheduler yields."""


class WriteRejected(CheckpointError):
    pass


class WorkloadSyntaxError(CheckpointError):
    pass


# --- coordinator ------------------------------------------------------------

class CoordinatorError(CheckpointError):
    exit_code = 4


class DuplicateVpid(CoordinatorError):
    pass


class CheckpointInProgress(CoordinatorError):
    pass


class OutOfOrderBarrier(CoordinatorError):
    pass


class WrongMode(CoordinatorError):
    pass


class UnknownProcess(CoordinatorError):
    pass


class EpochAborted(CoordinatorError):
    pass


class CoordinatorUnreachable(CheckpointError):
    exit_code = 3


class CoordinatorLost(CoordinatorUnreachable):
    pass


# --- manager ----------------------------------------------------------------

class ThreadUnresponsive(CheckpointError):
    pass


class TokenTimeout(CheckpointError):
    pass


class PeerGone(CheckpointError):
    pass


class StorageFull(CheckpointError):
    pass


class CompressionFailure(CheckpointError):
    pass


# --- restart ----------------------------------------------------------------

class MissingImage(CheckpointError):
    pass


class BindFailure(CheckpointError):
    pass


class HandshakeMismatch(CheckpointError):
    pass


class LookupTimeout(CheckpointError):
    pass


class ForkFailure(CheckpointError):
    pass


class FdCollisionUnresolvable(CheckpointError):
    pass


class CorruptSnapshot(CheckpointError):
    pass


class RetryBudgetExhausted(CheckpointError):
    pass


class DirectoryNotWritable(CheckpointError):
    pass


# --- storage ----------------------------------------------------------------

class ImageFormatError(CheckpointError):
    """Base for parse failures; ``section`` names the offending section."""

    def __init__(self, message: str, section: str | None = None):
        super().__init__(message)
        self.section = section


class BadMagic(ImageFormatError):
    pass


class TruncatedSection(ImageFormatError):
    pass


class ChecksumMismatch(ImageFormatError):
    pass


class VersionMismatch(ImageFormatError):
    pass


class CodecFailure(CheckpointError):
    pass


class SyncFailure(CheckpointError):
    pass


class IncompleteEpoch(CheckpointError):
    pass


# --- aware API / CLI --------------------------------------------------------

class NotAttached(CheckpointError):
    pass


class UnbalancedExit(CheckpointError):
    pass


class NotAllowedInHook(CheckpointError):
    pass


class MalformedTrace(CheckpointError):
    pass


class BadProgramSpec(CheckpointError):
    pass
