"""Quorum-replicated shard group with patch-based corruption recovery."""

from .log import PatchRequest, WriteBatch, decode_entry, encode_entry, index_of, seq_of
from .shard import CostModel, LegacyRecovery, RecoveryEvent, Replica, ShardGroup, random_batch

__all__ = [
    "PatchRequest",
    "WriteBatch",
    "decode_entry",
    "encode_entry",
    "index_of",
    "seq_of",
    "CostModel",
    "LegacyRecovery",
    "RecoveryEvent",
    "Replica",
    "ShardGroup",
    "random_batch",
]
