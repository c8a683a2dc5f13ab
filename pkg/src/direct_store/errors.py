"""Exception types shared across the stores."""


class StorageError(Exception):
    pass


class CorruptionError(StorageError):
    """A data block failed its checksum; ``ranges`` bracket every key it could hold."""

    def __init__(self, ranges, message=None):
        self.ranges = list(ranges)
        super().__init__(message or f"checksum mismatch in {len(self.ranges)} key range(s)")


class MetadataFatal(StorageError):
    """Every copy of a required metadata block or file failed verification."""


class StoreClosed(StorageError):
    pass


class SnapshotInvalidated(StorageError):
    """The snapshot was dropped because a patch touched its store."""


class LogCorruption(StorageError):
    """A replicated-log entry failed its checksum. Fatal: log protection is out of scope."""


class NoQuorum(StorageError):
    pass


class RecoveryTimeout(StorageError):
    pass


class ShardFailed(StorageError):
    """The replica left the fast recovery path and awaits full re-replication."""


class ReadFailed(StorageError):
    pass


class BlockDeleted(ReadFailed):
    """Repair could not fetch a peer copy because the block was deleted concurrently."""


class InsufficientReplicas(StorageError):
    pass
