"""LSM key-value store with checksummed blocks and duplicated metadata."""

from .format import DELETE, PUT, CorruptKeyRange, Record, SstReader, build_sst
from .store import CompactionResult, LsmStore, Snapshot

__all__ = [
    "DELETE",
    "PUT",
    "CorruptKeyRange",
    "Record",
    "SstReader",
    "build_sst",
    "CompactionResult",
    "LsmStore",
    "Snapshot",
]
